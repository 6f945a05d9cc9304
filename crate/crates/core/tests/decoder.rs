use pdpha_core::decoder::{
    decode, greedy_routes, rollout_greedy, rollout_sample, sampling_routes, solve_sampling, step_logits, step_probabilities,
    LaneSampler,
};
use pdpha_core::encoder::embeddings;
use pdpha_core::env::{validate_route, State};
use pdpha_core::instances::{generate_many, GeneratorConfig};
use pdpha_core::model::{EncoderConfig, ModelConfig, PolicyModel};
use pdpha_nn::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model(seed: u64) -> PolicyModel {
    let config = ModelConfig {
        encoder: EncoderConfig {
            d_h: 16,
            heads: 4,
            layers: 2,
            ff_hidden: 32,
            ..EncoderConfig::default()
        },
        ..ModelConfig::default()
    };
    PolicyModel::new(config, seed).unwrap()
}

#[test]
fn step_distribution_respects_mask_and_clip() {
    let model = small_model(1);
    let inst = generate_many(&GeneratorConfig::uniform(4, 3), 1).unwrap().remove(0);
    let emb = embeddings(&model, &inst).unwrap();
    let mut state = State::initial(&inst);
    while !state.is_complete() {
        let probs = step_probabilities(&model, &emb, &state).unwrap();
        let logits = step_logits(&model, &emb, &state).unwrap();
        let mask = state.mask().unwrap();
        assert!(logits.iter().all(|l| l.abs() <= 10.0));
        let total: f64 = probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        for (j, p) in probs.iter().enumerate() {
            if mask.is_allowed(j) {
                assert!(*p > 0.0);
            } else {
                assert!(*p < 1e-300);
            }
        }
        // Softmax over the allowed clipped logits, recomputed by hand.
        let allowed: Vec<usize> = mask.indices().collect();
        let z: f64 = allowed.iter().map(|&j| logits[j].exp()).sum();
        for &j in &allowed {
            assert!((probs[j] - logits[j].exp() / z).abs() < 1e-12);
        }
        let next = allowed[allowed.len() / 2];
        state.advance(next).unwrap();
    }
    assert!(step_probabilities(&model, &emb, &state).is_err());
}

#[test]
fn rollouts_are_feasible_and_consistent() {
    let model = small_model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for inst in generate_many(&GeneratorConfig::uniform(5, 9), 20).unwrap() {
        let emb = embeddings(&model, &inst).unwrap();
        for r in [rollout_greedy(&model, &inst, &emb).unwrap(), rollout_sample(&model, &inst, &emb, &mut rng).unwrap()] {
            let eval = validate_route(&inst, &r.perm);
            assert!(eval.feasible);
            assert!((eval.total_time - r.objective).abs() < 1e-12);
            assert_eq!(r.step_log_probs.len(), 10);
            assert!((r.step_log_probs.iter().sum::<f64>() - r.log_prob).abs() < 1e-12);
            assert!(r.step_log_probs.iter().all(|&lp| lp <= 1e-12));
        }
    }
}

#[test]
fn first_action_frequencies_match_probabilities() {
    let model = small_model(3);
    let inst = generate_many(&GeneratorConfig::uniform(3, 1), 1).unwrap().remove(0);
    let emb = embeddings(&model, &inst).unwrap();
    let probs = step_probabilities(&model, &emb, &State::initial(&inst)).unwrap();
    let draws = 100_000;
    let mut tape = Tape::inference();
    let enc = emb.to_batch(&mut tape).unwrap();
    let mut sampler = LaneSampler::new(11, 0, draws);
    let out = decode(&mut tape, &model, std::slice::from_ref(&inst), &enc, draws, &mut sampler).unwrap();
    let mut counts = [0usize; 7];
    for r in &out.rollouts {
        counts[r.perm[0]] += 1;
    }
    for (j, &p) in probs.iter().enumerate() {
        let freq = counts[j] as f64 / draws as f64;
        let tol = 3.0 * (p * (1.0 - p) / draws as f64).sqrt();
        assert!((freq - p).abs() <= tol, "node {j}: freq {freq} vs p {p}");
    }
}

#[test]
fn scaling_final_scores_keeps_greedy_routes() {
    let model = small_model(9);
    let mut scaled = model.clone();
    let id = scaled.param_id("dec.w_q").unwrap();
    scaled.params_mut().get_mut(id).value_mut().data_mut().iter_mut().for_each(|w| *w *= 3.0);
    let insts = generate_many(&GeneratorConfig::uniform(5, 12), 16).unwrap();
    let a = greedy_routes(&model, &insts, 16).unwrap();
    let b = greedy_routes(&scaled, &insts, 16).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.perm, y.perm);
    }
}

#[test]
fn greedy_is_deterministic_and_speed_invariant() {
    let model = small_model(4);
    let insts = generate_many(&GeneratorConfig::uniform(4, 2), 8).unwrap();
    let fast: Vec<_> = insts.iter().map(|i| i.clone().with_speed(4.0).unwrap()).collect();
    let a = greedy_routes(&model, &insts, 8).unwrap();
    let b = greedy_routes(&model, &insts, 8).unwrap();
    let c = greedy_routes(&model, &fast, 8).unwrap();
    assert_eq!(a, b);
    for (x, y) in a.iter().zip(&c) {
        assert_eq!(x.perm, y.perm);
        assert!((x.objective - 4.0 * y.objective).abs() < 1e-12);
    }
}

#[test]
fn greedy_batch_of_one_matches_single_rollout() {
    let model = small_model(5);
    let inst = generate_many(&GeneratorConfig::uniform(5, 6), 1).unwrap().remove(0);
    let emb = embeddings(&model, &inst).unwrap();
    let single = rollout_greedy(&model, &inst, &emb).unwrap();
    let batched = greedy_routes(&model, std::slice::from_ref(&inst), 1).unwrap().remove(0);
    assert_eq!(single.perm, batched.perm);
    assert!((single.log_prob - batched.log_prob).abs() < 1e-12);
}

#[test]
fn one_sample_equals_a_sampled_rollout() {
    let model = small_model(6);
    for (k, inst) in generate_many(&GeneratorConfig::uniform(4, 7), 5).unwrap().iter().enumerate() {
        let seed = 100 + k as u64;
        let best = solve_sampling(&model, inst, 1, seed).unwrap();
        let emb = embeddings(&model, inst).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let one = rollout_sample(&model, inst, &emb, &mut rng).unwrap();
        assert_eq!(best, one);
    }
}

#[test]
fn more_samples_never_hurt() {
    let model = small_model(7);
    let insts = generate_many(&GeneratorConfig::uniform(5, 8), 6).unwrap();
    let seeds: Vec<u64> = (0..6).collect();
    let few = sampling_routes(&model, &insts, 6, 8, &seeds).unwrap();
    let many = sampling_routes(&model, &insts, 6, 64, &seeds).unwrap();
    for ((a, b), inst) in few.iter().zip(&many).zip(&insts) {
        assert!(b.objective <= a.objective);
        assert!(validate_route(inst, &b.perm).feasible);
    }
}

#[test]
fn single_pair_has_one_route() {
    let model = small_model(8);
    let insts = generate_many(&GeneratorConfig::uniform(1, 8), 4).unwrap();
    for r in greedy_routes(&model, &insts, 4).unwrap() {
        assert_eq!(r.perm, vec![1, 2]);
        assert!(r.log_prob.abs() < 1e-12);
    }
}
