//! One-dimensional chaotic maps on the unit interval and their orbit
//! statistics.
//!
//! All dynamics run in `f64`. Orbit statistics ([`lyapunov_estimate`],
//! [`invariant_density`]) iterate a *jittered* orbit: after every step a
//! deterministic perturbation of magnitude at most [`ORBIT_JITTER`] is added.
//! Without it a binary floating-point orbit of the Tent map with `mu = 2`
//! loses one mantissa bit per step and lands on the fixed point 0 after
//! about 55 iterations. An orbit that starts on a fixed point is never
//! jittered.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::mix;

/// Tolerance for inputs and outputs that leave `[0, 1]` through round-off.
pub const ROUND_OFF: f64 = 1e-12;

/// Magnitude bound of the per-step perturbation used by orbit statistics.
pub const ORBIT_JITTER: f64 = 1e-12;

pub const DEFAULT_BURN_IN: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MapKind {
    Logistic,
    Tent,
    Sine,
}

impl MapKind {
    pub const ALL: [MapKind; 3] = [MapKind::Logistic, MapKind::Tent, MapKind::Sine];

    pub fn name(self) -> &'static str {
        match self {
            MapKind::Logistic => "logistic",
            MapKind::Tent => "tent",
            MapKind::Sine => "sine",
        }
    }

    /// Largest admissible control parameter.
    pub fn max_param(self) -> f64 {
        match self {
            MapKind::Logistic => 4.0,
            MapKind::Tent => 2.0,
            MapKind::Sine => 1.0,
        }
    }

    pub fn default_param(self) -> f64 {
        match self {
            MapKind::Logistic => 3.99,
            MapKind::Tent => 2.0,
            MapKind::Sine => 1.0,
        }
    }
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "logistic" => Ok(MapKind::Logistic),
            "tent" => Ok(MapKind::Tent),
            "sine" => Ok(MapKind::Sine),
            other => Err(Error::InvalidParam(format!(
                "unknown map '{other}' (expected logistic, tent or sine)"
            ))),
        }
    }
}

/// A chaotic map together with its control parameter (`r` for Logistic and
/// Sine, `mu` for Tent).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChaoticMapSpec {
    kind: MapKind,
    param: f64,
}

impl ChaoticMapSpec {
    pub fn new(kind: MapKind, param: f64) -> Result<Self> {
        if !(param > 0.0 && param <= kind.max_param()) {
            return Err(Error::InvalidParam(format!(
                "{kind} parameter {param} outside (0, {}]",
                kind.max_param()
            )));
        }
        Ok(Self { kind, param })
    }

    pub fn with_default(kind: MapKind) -> Self {
        Self {
            kind,
            param: kind.default_param(),
        }
    }

    pub fn logistic(r: f64) -> Result<Self> {
        Self::new(MapKind::Logistic, r)
    }

    pub fn tent(mu: f64) -> Result<Self> {
        Self::new(MapKind::Tent, mu)
    }

    pub fn sine(r: f64) -> Result<Self> {
        Self::new(MapKind::Sine, r)
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn param(&self) -> f64 {
        self.param
    }

    /// Raw map evaluation without range checks.
    #[inline]
    fn eval(&self, x: f64) -> f64 {
        let p = self.param;
        match self.kind {
            MapKind::Logistic => p * x * (1.0 - x),
            MapKind::Tent => {
                if x < 0.5 {
                    p * x
                } else {
                    p * (1.0 - x)
                }
            }
            MapKind::Sine => p * (std::f64::consts::PI * x).sin(),
        }
    }

    /// `|f'(x)|`; `None` at the Tent kink `x = 0.5`.
    #[inline]
    pub fn derivative_magnitude(&self, x: f64) -> Option<f64> {
        let p = self.param;
        match self.kind {
            MapKind::Logistic => Some((p * (1.0 - 2.0 * x)).abs()),
            MapKind::Tent => (x != 0.5).then_some(p),
            MapKind::Sine => {
                Some((p * std::f64::consts::PI * (std::f64::consts::PI * x).cos()).abs())
            }
        }
    }
}

impl Default for ChaoticMapSpec {
    fn default() -> Self {
        Self::with_default(MapKind::Sine)
    }
}

#[inline]
fn check_unit(spec: &ChaoticMapSpec, x: f64) -> Result<f64> {
    if (-ROUND_OFF..=1.0 + ROUND_OFF).contains(&x) {
        Ok(x.clamp(0.0, 1.0))
    } else {
        Err(Error::Domain {
            map: spec.kind.name(),
            value: x,
        })
    }
}

#[inline]
fn clamp_output(y: f64) -> f64 {
    debug_assert!(
        (-ROUND_OFF..=1.0 + ROUND_OFF).contains(&y),
        "map output {y} left [0, 1] by more than round-off"
    );
    y.clamp(0.0, 1.0)
}

/// One application of the map.
pub fn map_step(spec: &ChaoticMapSpec, x: f64) -> Result<f64> {
    let x = check_unit(spec, x)?;
    Ok(clamp_output(spec.eval(x)))
}

/// `k`-fold composition of [`map_step`]; `k = 0` returns `x0`.
pub fn iterate(spec: &ChaoticMapSpec, x0: f64, k: usize) -> Result<f64> {
    let mut x = check_unit(spec, x0)?;
    if k == 0 {
        return Ok(x0);
    }
    for _ in 0..k {
        x = clamp_output(spec.eval(x));
    }
    Ok(x)
}

/// Jittered orbit driver shared by the statistics below.
struct Orbit {
    spec: ChaoticMapSpec,
    x: f64,
    jitter_state: u64,
    jitter: bool,
}

impl Orbit {
    fn new(spec: &ChaoticMapSpec, x0: f64) -> Result<Self> {
        let x = check_unit(spec, x0)?;
        let fixed = clamp_output(spec.eval(x)) == x;
        Ok(Self {
            spec: *spec,
            x,
            jitter_state: mix(x.to_bits()),
            jitter: !fixed,
        })
    }

    fn starts_fixed(&self) -> bool {
        !self.jitter
    }

    #[inline]
    fn advance(&mut self) {
        let mut next = clamp_output(self.spec.eval(self.x));
        if self.jitter {
            self.jitter_state = self.jitter_state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let u = (mix(self.jitter_state) >> 11) as f64 / (1u64 << 53) as f64;
            next = (next + (2.0 * u - 1.0) * ORBIT_JITTER).clamp(0.0, 1.0);
        }
        self.x = next;
    }
}

/// Summary statistics of one orbit.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitStats {
    pub lyapunov: f64,
    pub density: Vec<f64>,
    pub n_samples: usize,
    pub burn_in: usize,
}

/// Orbit-average estimate of the Lyapunov exponent in nats per iteration:
/// the mean of `ln |f'(x_t)|` over `n_iter` post-burn-in samples.
///
/// Tent samples that fall exactly on the kink are skipped.
pub fn lyapunov_estimate(
    spec: &ChaoticMapSpec,
    x0: f64,
    n_iter: usize,
    burn_in: usize,
) -> Result<f64> {
    if n_iter < 10_000 {
        return Err(Error::InvalidParam(format!(
            "lyapunov estimate needs at least 10^4 iterations, got {n_iter}"
        )));
    }
    if !(x0 > 0.0 && x0 < 1.0) {
        return Err(Error::InvalidParam(format!(
            "initial condition {x0} must lie in (0, 1)"
        )));
    }
    let mut orbit = Orbit::new(spec, x0)?;
    if orbit.starts_fixed() {
        return Err(Error::DegenerateOrbit(format!(
            "{x0} is a fixed point of the {} map",
            spec.kind
        )));
    }
    for _ in 0..burn_in {
        orbit.advance();
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut zero_hits = 0usize;
    for _ in 0..n_iter {
        match spec.derivative_magnitude(orbit.x) {
            Some(d) if d > 0.0 => {
                sum += d.ln();
                used += 1;
            }
            Some(_) => zero_hits += 1,
            None => {}
        }
        orbit.advance();
    }
    // A handful of exact critical-point hits is possible; a stream of them
    // means the orbit sits on a superstable cycle.
    if zero_hits > n_iter / 100 || used == 0 {
        return Err(Error::DegenerateOrbit(format!(
            "{zero_hits} of {n_iter} samples hit a zero derivative"
        )));
    }
    Ok(sum / used as f64)
}

/// Normalised occupancy histogram of the post-burn-in orbit over `bins`
/// equal-width bins of `[0, 1]` (the value 1 falls in the last bin).
pub fn invariant_density(
    spec: &ChaoticMapSpec,
    x0: f64,
    n_iter: usize,
    bins: usize,
) -> Result<Vec<f64>> {
    invariant_density_with_burn_in(spec, x0, n_iter, bins, DEFAULT_BURN_IN)
}

pub fn invariant_density_with_burn_in(
    spec: &ChaoticMapSpec,
    x0: f64,
    n_iter: usize,
    bins: usize,
    burn_in: usize,
) -> Result<Vec<f64>> {
    if n_iter < 100_000 {
        return Err(Error::InvalidParam(format!(
            "invariant density needs at least 10^5 iterations, got {n_iter}"
        )));
    }
    if bins < 10 {
        return Err(Error::InvalidParam(format!(
            "invariant density needs at least 10 bins, got {bins}"
        )));
    }
    let mut orbit = Orbit::new(spec, x0)?;
    for _ in 0..burn_in {
        orbit.advance();
    }
    let mut counts = vec![0u64; bins];
    for _ in 0..n_iter {
        let b = ((orbit.x * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
        orbit.advance();
    }
    Ok(counts
        .into_iter()
        .map(|c| c as f64 / n_iter as f64)
        .collect())
}

/// Lyapunov exponent and invariant density from the same settings.
pub fn orbit_stats(
    spec: &ChaoticMapSpec,
    x0: f64,
    n_iter: usize,
    burn_in: usize,
    bins: usize,
) -> Result<OrbitStats> {
    let lyapunov = lyapunov_estimate(spec, x0, n_iter, burn_in)?;
    let density = invariant_density_with_burn_in(spec, x0, n_iter, bins, burn_in)?;
    Ok(OrbitStats {
        lyapunov,
        density,
        n_samples: n_iter,
        burn_in,
    })
}
