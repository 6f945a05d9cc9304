use pdpha_core::encoder::{embed_inputs, embeddings, encode, multi_head, attention_layer};
use pdpha_core::instances::{generate_many, GeneratorConfig, Instance};
use pdpha_core::model::{AttentionKind, AttentionMode, EncoderConfig, ModelConfig, PolicyModel};
use pdpha_nn::{Tape, Tensor};

fn config(mode: AttentionMode, share_kv: bool, layers: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d_h: 16,
            heads: 4,
            layers,
            ff_hidden: 32,
            attention_mode: mode,
            share_kv,
        },
        ..ModelConfig::default()
    }
}

/// Relabels pairs: pair `i` of the result is pair `sigma[i]` of `inst`.
fn permute_pairs(inst: &Instance, sigma: &[usize]) -> Instance {
    Instance::new(
        inst.depot(),
        sigma.iter().map(|&s| inst.pickups()[s]).collect(),
        sigma.iter().map(|&s| inst.deliveries()[s]).collect(),
        inst.speed(),
    )
    .unwrap()
}

#[test]
fn embeddings_are_pair_permutation_equivariant() {
    for (mode, share) in [(AttentionMode::Seven, true), (AttentionMode::Four, false)] {
        let model = PolicyModel::new(config(mode, share, 2), 4).unwrap();
        let insts = generate_many(&GeneratorConfig::uniform(4, 8), 3).unwrap();
        let sigma = [2, 0, 3, 1];
        let permuted: Vec<Instance> = insts.iter().map(|i| permute_pairs(i, &sigma)).collect();
        let mut tape = Tape::inference();
        let a = encode(&mut tape, &model, &insts).unwrap();
        let b = encode(&mut tape, &model, &permuted).unwrap();
        let (ta, tb) = (tape.value(a.nodes), tape.value(b.nodes));
        let n = 4;
        let d = 16;
        for inst in 0..3 {
            let row = |t: &Tensor, r: usize| t.data()[(inst * (2 * n + 1) + r) * d..][..d].to_vec();
            let mut map = vec![0; 2 * n + 1];
            for (i, &s) in sigma.iter().enumerate() {
                map[1 + i] = 1 + s;
                map[1 + n + i] = 1 + n + s;
            }
            for (r, &src) in map.iter().enumerate() {
                for (x, y) in row(tb, r).iter().zip(row(ta, src)) {
                    assert!((x - y).abs() < 1e-12, "{mode:?}: row {r}");
                }
            }
        }
        for (x, y) in tape.value(a.graph).data().iter().zip(tape.value(b.graph).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

fn zero_queries(model: &PolicyModel, pick: fn(AttentionKind) -> bool) -> PolicyModel {
    let mut out = model.clone();
    let mut zeroed = 0;
    for layer in 0..model.config().encoder.layers {
        for kind in AttentionKind::ALL.into_iter().filter(|k| pick(*k)) {
            if let Some(id) = out.param_id(&format!("enc.layer{layer}.w_q_{}", kind.tag())) {
                out.params_mut().get_mut(id).value_mut().data_mut().fill(0.0);
                zeroed += 1;
            }
        }
    }
    assert!(zeroed > 0);
    out
}

/// Checks that the rows outside `changed` of every layer's multi-head output
/// are bit-identical between the two models, and that some row inside differs.
fn rows_untouched(mode: AttentionMode, share: bool, pick: fn(AttentionKind) -> bool, changed: std::ops::Range<usize>) {
    let model = PolicyModel::new(config(mode, share, 3), 21).unwrap();
    let altered = zero_queries(&model, pick);
    let insts = generate_many(&GeneratorConfig::uniform(3, 2), 2).unwrap();
    let n = 3;
    let rows = 2 * n + 1;
    let d = 16;
    let mut tape = Tape::inference();
    let mut h = embed_inputs(&mut tape, &model, &insts).unwrap();
    for layer in 0..3 {
        let a = multi_head(&mut tape, &model, layer, h, n).unwrap();
        let b = multi_head(&mut tape, &altered, layer, h, n).unwrap();
        let (ta, tb) = (tape.value(a).data(), tape.value(b).data());
        let mut differs = false;
        for inst in 0..2 {
            for r in 0..rows {
                let span = (inst * rows + r) * d..(inst * rows + r + 1) * d;
                if changed.contains(&r) {
                    differs |= ta[span.clone()] != tb[span];
                } else {
                    assert_eq!(ta[span.clone()], tb[span], "{mode:?} layer {layer} row {r}");
                }
            }
        }
        assert!(differs, "{mode:?} layer {layer}: zeroing had no effect");
        h = attention_layer(&mut tape, &model, layer, h, n).unwrap();
    }
}

#[test]
fn pickup_queries_only_reach_pickup_rows() {
    rows_untouched(AttentionMode::Seven, true, AttentionKind::is_pickup_role, 1..4);
    rows_untouched(AttentionMode::Seven, false, AttentionKind::is_pickup_role, 1..4);
    rows_untouched(AttentionMode::Four, false, AttentionKind::is_pickup_role, 1..4);
}

#[test]
fn delivery_queries_only_reach_delivery_rows() {
    rows_untouched(AttentionMode::Seven, true, AttentionKind::is_delivery_role, 4..7);
    rows_untouched(AttentionMode::Seven, false, AttentionKind::is_delivery_role, 4..7);
}

#[test]
fn graph_embedding_is_mean_of_nodes() {
    let model = PolicyModel::new(config(AttentionMode::Seven, true, 2), 0).unwrap();
    let inst = generate_many(&GeneratorConfig::uniform(5, 3), 1).unwrap().remove(0);
    let emb = embeddings(&model, &inst).unwrap();
    assert_eq!(emb.nodes.shape(), &[11, 16]);
    for c in 0..16 {
        let mean = (0..11).map(|r| emb.nodes.row(r)[c]).sum::<f64>() / 11.0;
        assert!((mean - emb.graph.data()[c]).abs() < 1e-12);
    }
}

#[test]
fn normalized_features_are_standardized_over_the_batch() {
    // With unit gain and zero shift, every feature of the encoder output has
    // zero mean and unit (biased) variance across all node rows of the batch.
    let model = PolicyModel::new(config(AttentionMode::Seven, true, 1), 6).unwrap();
    let insts = generate_many(&GeneratorConfig::uniform(3, 4), 5).unwrap();
    let mut tape = Tape::inference();
    let enc = encode(&mut tape, &model, &insts).unwrap();
    let t = tape.value(enc.nodes);
    let rows = t.rows();
    assert_eq!(rows, 5 * 7);
    for c in 0..16 {
        let col: Vec<f64> = (0..rows).map(|r| t.row(r)[c]).collect();
        let mean = col.iter().sum::<f64>() / rows as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / rows as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3, "feature {c}: variance {var}");
    }
}

#[test]
fn mixed_sizes_in_one_batch_are_rejected() {
    let model = PolicyModel::new(config(AttentionMode::Seven, true, 1), 0).unwrap();
    let mut insts = generate_many(&GeneratorConfig::uniform(3, 4), 2).unwrap();
    insts.extend(generate_many(&GeneratorConfig::uniform(2, 4), 1).unwrap());
    let mut tape = Tape::inference();
    assert!(encode(&mut tape, &model, &insts).is_err());
    assert!(encode(&mut tape, &model, &[]).is_err());
}

#[test]
fn pickup_embedding_sees_its_delivery() {
    let model = PolicyModel::new(config(AttentionMode::Seven, true, 1), 2).unwrap();
    let a = generate_many(&GeneratorConfig::uniform(2, 1), 1).unwrap().remove(0);
    let mut deliveries = a.deliveries().to_vec();
    deliveries[0] = pdpha_core::instances::Point::new(0.9, 0.1);
    let b = Instance::new(a.depot(), a.pickups().to_vec(), deliveries, 1.0).unwrap();
    let mut tape = Tape::inference();
    let ha = embed_inputs(&mut tape, &model, &[a]).unwrap();
    let hb = embed_inputs(&mut tape, &model, &[b]).unwrap();
    let (ta, tb) = (tape.value(ha), tape.value(hb));
    assert_eq!(ta.shape(), &[1, 5, 16]);
    assert_ne!(ta.row(1), tb.row(1));
    assert_eq!(ta.row(2), tb.row(2));
    assert_ne!(ta.row(3), tb.row(3));
    assert_eq!(ta.row(0), tb.row(0));
}

#[test]
fn zero_input_weights_give_bias_rows() {
    let mut model = PolicyModel::new(config(AttentionMode::Seven, true, 1), 2).unwrap();
    for role in ["depot", "pickup", "delivery"] {
        let id = model.param_id(&format!("enc.embed.{role}.w")).unwrap();
        model.params_mut().get_mut(id).value_mut().data_mut().fill(0.0);
    }
    let inst = generate_many(&GeneratorConfig::uniform(1, 1), 1).unwrap().remove(0);
    let mut tape = Tape::inference();
    let h = embed_inputs(&mut tape, &model, &[inst]).unwrap();
    let t = tape.value(h);
    for (row, role) in ["depot", "pickup", "delivery"].iter().enumerate() {
        let bias = model.params().get(model.param_id(&format!("enc.embed.{role}.b")).unwrap()).value();
        assert_eq!(t.row(row), bias.data());
    }
}
