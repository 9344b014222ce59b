use crate::autograd::{grad_check, grad_check_params, Param, Tensor};
use crate::error::Result;
use crate::network::{Classifier, Encoder, EncoderConfig, Mode, Projector, SeFusion};
use crate::rng;

use super::loss::{cross_entropy, nt_xent};

fn randomise_biases(params: &mut [Param], seed: u64) {
    let mut r = rng::stream(seed, "gradcheck.bias", 0);
    for p in params.iter_mut().filter(|p| p.name.ends_with("bias")) {
        p.value = Tensor::uniform(p.value.shape().to_vec(), 0.2, &mut r);
    }
}

/// End-to-end gradient checks of the two composite graphs used in training:
/// encoder, projector and NT-Xent on a 4-image batch, and SE fusion plus
/// classifier under cross entropy. Each graph is checked with respect to
/// its input and to every parameter.
pub fn composite_suite(seed: u64, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut r = rng::stream(seed, "gradcheck.composite", 0);
    let mut encoder = Encoder::new("enc", EncoderConfig::chaos(1), &mut r)?;
    randomise_biases(encoder.params_mut(), seed);
    let projector = Projector::new("proj", 16, 16, 8, &mut r);
    let images = Tensor::uniform([4, 1, 8, 8], 0.5, &mut r);
    let images = Tensor::new(
        images.shape().to_vec(),
        images.data().iter().map(|v| v + 0.5).collect(),
    )?;
    let tau = 0.5;

    let contrastive = grad_check(
        |tape, x| {
            let f = encoder.forward(tape, x, Mode::Frozen)?;
            let z = projector.forward(tape, f, Mode::Frozen)?;
            nt_xent(tape, z, tau)
        },
        &images,
        eps,
    )?;
    let model = (encoder, projector);
    let contrastive_params = grad_check_params(
        &model,
        |m| {
            let mut v: Vec<&mut Param> = m.0.params_mut().iter_mut().collect();
            v.extend(m.1.params_mut());
            v
        },
        |m, tape| {
            let x = tape.constant(images.clone());
            let f = m.0.forward(tape, x, Mode::Train)?;
            let z = m.1.forward(tape, f, Mode::Train)?;
            nt_xent(tape, z, tau)
        },
        eps,
    )?;

    let se = SeFusion::new("se", 12, 4, &mut r)?;
    let mut classifier = Classifier::new("cls", 12, 3, &mut r);
    classifier.bias.value = Tensor::uniform([3], 0.5, &mut r);
    let u_sup = Tensor::uniform([5, 8], 1.0, &mut r);
    let u_chaos = Tensor::uniform([5, 4], 1.0, &mut r);
    let labels = [0, 2, 1, 1, 0];

    let fusion = grad_check(
        |tape, x| {
            let c = tape.constant(u_chaos.clone());
            let fused = se.forward(tape, x, c, Mode::Frozen)?;
            let logits = classifier.forward(tape, fused, Mode::Frozen)?;
            cross_entropy(tape, logits, &labels)
        },
        &u_sup,
        eps,
    )?;
    let head = (se, classifier);
    let fusion_params = grad_check_params(
        &head,
        |m| {
            let mut v: Vec<&mut Param> = m.0.params_mut().into_iter().collect();
            v.extend(m.1.params_mut());
            v
        },
        |m, tape| {
            let a = tape.constant(u_sup.clone());
            let b = tape.constant(u_chaos.clone());
            let fused = m.0.forward(tape, a, b, Mode::Train)?;
            let logits = m.1.forward(tape, fused, Mode::Train)?;
            cross_entropy(tape, logits, &labels)
        },
        eps,
    )?;

    Ok(vec![
        ("encoder_projector_nt_xent", contrastive),
        ("encoder_projector_nt_xent_params", contrastive_params),
        ("se_classifier", fusion),
        ("se_classifier_params", fusion_params),
    ])
}
