//! Finite-difference check of the full encoder + decoder log-likelihood.

use pdpha_core::decoder::{decode, Forced};
use pdpha_core::encoder::encode;
use pdpha_core::instances::{generate_many, GeneratorConfig, Instance};
use pdpha_core::model::{AttentionMode, EncoderConfig, ModelConfig, PolicyModel};
use pdpha_nn::{ParamId, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(mode: AttentionMode, share_kv: bool) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d_h: 8,
            heads: 2,
            layers: 1,
            ff_hidden: 16,
            attention_mode: mode,
            share_kv,
        },
        ..ModelConfig::default()
    }
}

/// `Σ_b w_b log p(route_b)` for fixed routes.
fn objective(tape: &mut Tape, model: &PolicyModel, insts: &[Instance], routes: &[Vec<usize>], w: &[f64]) -> pdpha_nn::Var {
    let enc = encode(tape, model, insts).unwrap();
    let out = decode(tape, model, insts, &enc, 1, &mut Forced::new(routes)).unwrap();
    for (r, route) in out.rollouts.iter().zip(routes) {
        assert_eq!(&r.perm, route);
    }
    tape.weighted_sum(out.log_probs.unwrap(), w.to_vec()).unwrap()
}

fn value(model: &PolicyModel, insts: &[Instance], routes: &[Vec<usize>], w: &[f64]) -> f64 {
    let mut tape = Tape::inference();
    let enc = encode(&mut tape, model, insts).unwrap();
    let out = decode(&mut tape, model, insts, &enc, 1, &mut Forced::new(routes)).unwrap();
    out.rollouts.iter().zip(w).map(|(r, w)| w * r.log_prob).sum()
}

fn check(mode: AttentionMode, share_kv: bool, seed: u64) -> f64 {
    let mut model = PolicyModel::new(tiny(mode, share_kv), seed).unwrap();
    let insts = generate_many(&GeneratorConfig::uniform(2, seed), 3).unwrap();
    let routes = vec![vec![1, 3, 2, 4], vec![2, 1, 4, 3], vec![2, 4, 1, 3]];
    let w = [0.7, -1.3, 0.4];

    let mut tape = Tape::new();
    let loss = objective(&mut tape, &model, &insts, &routes, &w);
    let grads = tape.backward(loss).unwrap();
    grads.accumulate_into(model.params_mut());

    let ids: Vec<(ParamId, usize)> = model
        .params()
        .iter()
        .flat_map(|(id, p)| (0..p.value().numel()).map(move |k| (id, k)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..150 {
        let (id, k) = ids[rng.random_range(0..ids.len())];
        let analytic = model.params().get(id).grad().data()[k];
        let original = model.params().get(id).value().data()[k];
        let mut at = |delta: f64| {
            model.params_mut().get_mut(id).value_mut().data_mut()[k] = original + delta;
            value(&model, &insts, &routes, &w)
        };
        // Five-point stencil.
        let numeric = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
        model.params_mut().get_mut(id).value_mut().data_mut()[k] = original;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5);
        if rel > 1e-5 {
            eprintln!("{} [{k}]: analytic {analytic:e} numeric {numeric:e}", model.params().get(id).name());
        }
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn seven_kinds_shared_maps() {
    let worst = check(AttentionMode::Seven, true, 1);
    assert!(worst < 1e-5, "max relative error {worst:e}");
}

#[test]
fn seven_kinds_separate_maps() {
    let worst = check(AttentionMode::Seven, false, 2);
    assert!(worst < 1e-5, "max relative error {worst:e}");
}

#[test]
fn four_kinds_separate_maps() {
    let worst = check(AttentionMode::Four, false, 3);
    assert!(worst < 1e-5, "max relative error {worst:e}");
}
