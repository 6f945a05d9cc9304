//! Policy network configuration, parameter layout and checkpoint I/O.

use std::path::Path;

use pdpha_nn::{Checkpoint, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{PdpError, Result};

/// Which attention types an encoder layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Original attention plus all six role-specific attentions.
    Seven,
    /// Original attention plus the three attentions issued by pickups.
    Four,
}

/// The seven attention types of an encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    /// Every node attends to every node.
    Original,
    /// Pickup to its paired delivery (feature-wise gate).
    PickupToPartner,
    /// Delivery to its paired pickup (feature-wise gate).
    DeliveryToPartner,
    /// Pickup to all pickups.
    PickupToPickups,
    /// Pickup to all deliveries.
    PickupToDeliveries,
    /// Delivery to all pickups.
    DeliveryToPickups,
    /// Delivery to all deliveries.
    DeliveryToDeliveries,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 7] = [
        AttentionKind::Original,
        AttentionKind::PickupToPartner,
        AttentionKind::DeliveryToPartner,
        AttentionKind::PickupToPickups,
        AttentionKind::PickupToDeliveries,
        AttentionKind::DeliveryToPickups,
        AttentionKind::DeliveryToDeliveries,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AttentionKind::Original => "orig",
            AttentionKind::PickupToPartner => "pd",
            AttentionKind::DeliveryToPartner => "dp",
            AttentionKind::PickupToPickups => "pP",
            AttentionKind::PickupToDeliveries => "pD",
            AttentionKind::DeliveryToPickups => "dP",
            AttentionKind::DeliveryToDeliveries => "dD",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    /// Attention kinds whose queries come from pickup nodes.
    pub fn is_pickup_role(self) -> bool {
        matches!(
            self,
            AttentionKind::PickupToPartner | AttentionKind::PickupToPickups | AttentionKind::PickupToDeliveries
        )
    }

    pub fn is_delivery_role(self) -> bool {
        matches!(
            self,
            AttentionKind::DeliveryToPartner | AttentionKind::DeliveryToPickups | AttentionKind::DeliveryToDeliveries
        )
    }
}

impl AttentionMode {
    pub fn kinds(self) -> &'static [AttentionKind] {
        match self {
            AttentionMode::Seven => &AttentionKind::ALL,
            AttentionMode::Four => &[
                AttentionKind::Original,
                AttentionKind::PickupToPartner,
                AttentionKind::PickupToPickups,
                AttentionKind::PickupToDeliveries,
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Embedding width.
    pub d_h: usize,
    /// Attention heads.
    pub heads: usize,
    /// Attention layers.
    pub layers: usize,
    /// Hidden width of the feed-forward sublayer.
    pub ff_hidden: usize,
    pub attention_mode: AttentionMode,
    /// Share key/value maps across attention kinds.
    pub share_kv: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_h: 128,
            heads: 8,
            layers: 3,
            ff_hidden: 512,
            attention_mode: AttentionMode::Seven,
            share_kv: true,
        }
    }
}

impl EncoderConfig {
    /// Per-head query/key/value width.
    pub fn d_k(&self) -> usize {
        self.d_h / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Logit clipping constant.
    pub clip: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { clip: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let bad = |m: String| Err(PdpError::InvalidConfig(m));
        if e.d_h == 0 || e.heads == 0 || e.layers == 0 || e.ff_hidden == 0 {
            return bad(format!("encoder sizes must be positive: {e:?}"));
        }
        if !e.d_h.is_multiple_of(e.heads) {
            return bad(format!("d_h = {} is not divisible by {} heads", e.d_h, e.heads));
        }
        if !(self.decoder.clip > 0.0 && self.decoder.clip.is_finite()) {
            return bad(format!("clip must be positive, got {}", self.decoder.clip));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct EmbedParams {
    pub depot: (ParamId, ParamId),
    pub pickup: (ParamId, ParamId),
    pub delivery: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub(crate) struct LayerParams {
    queries: [Option<ParamId>; 7],
    keys: [Option<ParamId>; 7],
    values: [Option<ParamId>; 7],
    pub w_o: ParamId,
    pub ff1: (ParamId, ParamId),
    pub ff2: (ParamId, ParamId),
    pub bn1: (ParamId, ParamId),
    pub bn2: (ParamId, ParamId),
}

impl LayerParams {
    pub fn query(&self, kind: AttentionKind) -> Option<ParamId> {
        self.queries[kind.index()]
    }

    pub fn key(&self, kind: AttentionKind) -> Option<ParamId> {
        self.keys[kind.index()]
    }

    pub fn value(&self, kind: AttentionKind) -> Option<ParamId> {
        self.values[kind.index()]
    }
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderParams {
    pub placeholder: ParamId,
    pub glimpse_q: ParamId,
    pub glimpse_k: ParamId,
    pub glimpse_v: ParamId,
    pub glimpse_o: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
}

/// Encoder and decoder parameters with their configuration.
#[derive(Clone, Debug)]
pub struct PolicyModel {
    config: ModelConfig,
    params: ParamStore,
    pub(crate) embed: EmbedParams,
    pub(crate) layers: Vec<LayerParams>,
    pub(crate) decoder: DecoderParams,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    /// Matrix with entries uniform in `±1/sqrt(rows)`.
    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> Result<ParamId> {
        let bound = 1.0 / (rows as f64).sqrt();
        self.uniform(name, vec![rows, cols], bound)
    }

    fn uniform(&mut self, name: String, shape: Vec<usize>, bound: f64) -> Result<ParamId> {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Ok(self.store.add(name, Tensor::new(shape, data)?)?)
    }

    fn constant(&mut self, name: String, len: usize, value: f64) -> Result<ParamId> {
        Ok(self.store.add(name, Tensor::full(&[len], value))?)
    }

    fn linear(&mut self, prefix: &str, rows: usize, cols: usize) -> Result<(ParamId, ParamId)> {
        let w = self.matrix(format!("{prefix}.w"), rows, cols)?;
        let b = self.uniform(format!("{prefix}.b"), vec![cols], 1.0 / (rows as f64).sqrt())?;
        Ok((w, b))
    }

    fn batch_norm(&mut self, prefix: &str, width: usize) -> Result<(ParamId, ParamId)> {
        Ok((
            self.constant(format!("{prefix}.gamma"), width, 1.0)?,
            self.constant(format!("{prefix}.beta"), width, 0.0)?,
        ))
    }
}

impl PolicyModel {
    /// Builds a freshly initialized model; initialization is a pure function
    /// of `config` and `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let e = config.encoder;
        let d = e.d_h;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let embed = EmbedParams {
            depot: init.linear("enc.embed.depot", 2, d)?,
            pickup: init.linear("enc.embed.pickup", 4, d)?,
            delivery: init.linear("enc.embed.delivery", 2, d)?,
        };
        let kinds = e.attention_mode.kinds();
        let mut layers = Vec::with_capacity(e.layers);
        for l in 0..e.layers {
            let p = format!("enc.layer{l}");
            let mut queries = [None; 7];
            let mut keys = [None; 7];
            let mut values = [None; 7];
            // Per-head blocks of width d_k are stored side by side, so every
            // map is d_h × d_h.
            for &kind in kinds {
                queries[kind.index()] = Some(init.matrix(format!("{p}.w_q_{}", kind.tag()), d, d)?);
            }
            if e.share_kv {
                let k = init.matrix(format!("{p}.w_k"), d, d)?;
                let v = init.matrix(format!("{p}.w_v"), d, d)?;
                for &kind in kinds {
                    keys[kind.index()] = Some(k);
                    values[kind.index()] = Some(v);
                }
            } else {
                for &kind in kinds {
                    keys[kind.index()] = Some(init.matrix(format!("{p}.w_k_{}", kind.tag()), d, d)?);
                    values[kind.index()] = Some(init.matrix(format!("{p}.w_v_{}", kind.tag()), d, d)?);
                }
            }
            layers.push(LayerParams {
                queries,
                keys,
                values,
                w_o: init.matrix(format!("{p}.w_o"), d, d)?,
                ff1: init.linear(&format!("{p}.ff1"), d, e.ff_hidden)?,
                ff2: init.linear(&format!("{p}.ff2"), e.ff_hidden, d)?,
                bn1: init.batch_norm(&format!("{p}.bn1"), d)?,
                bn2: init.batch_norm(&format!("{p}.bn2"), d)?,
            });
        }
        let decoder = DecoderParams {
            placeholder: init.uniform("dec.placeholder".into(), vec![d], 1.0 / (d as f64).sqrt())?,
            glimpse_q: init.matrix("dec.glimpse.w_q".into(), 2 * d, d)?,
            glimpse_k: init.matrix("dec.glimpse.w_k".into(), d, d)?,
            glimpse_v: init.matrix("dec.glimpse.w_v".into(), d, d)?,
            glimpse_o: init.matrix("dec.glimpse.w_o".into(), d, d)?,
            w_q: init.matrix("dec.w_q".into(), d, d)?,
            w_k: init.matrix("dec.w_k".into(), d, d)?,
        };
        Ok(Self {
            config,
            params: store,
            embed,
            layers,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Overwrites this model's weights with `other`'s (same layout).
    pub fn copy_weights_from(&mut self, other: &PolicyModel) -> Result<()> {
        if self.config != other.config {
            return Err(PdpError::InvalidConfig("cannot copy weights between different architectures".into()));
        }
        Ok(self.params.copy_values_from(&other.params)?)
    }

    /// Parameter id by name, e.g. `enc.layer0.w_q_pd`.
    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.id(name)
    }

    pub fn to_checkpoint(&self, train_n: Option<usize>) -> Checkpoint {
        Checkpoint::from_store(json!({ "model": self.config, "train_n": train_n }), &self.params)
    }

    pub fn save(&self, path: impl AsRef<Path>, train_n: Option<usize>) -> Result<()> {
        Ok(self.to_checkpoint(train_n).save(path)?)
    }

    /// Rebuilds a model from checkpoint contents, checking every tensor.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<usize>)> {
        let config: ModelConfig = serde_json::from_value(ck.meta.get("model").cloned().unwrap_or_default())
            .map_err(|e| PdpError::InvalidConfig(format!("checkpoint model header: {e}")))?;
        let train_n = ck.meta.get("train_n").and_then(|v| v.as_u64()).map(|v| v as usize);
        let mut model = Self::new(config, 0)?;
        ck.restore_into(&mut model.params)?;
        Ok((model, train_n))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Option<usize>)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: AttentionMode, share_kv: bool) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d_h: 8,
                heads: 2,
                layers: 2,
                ff_hidden: 16,
                attention_mode: mode,
                share_kv,
            },
            decoder: DecoderConfig::default(),
        }
    }

    #[test]
    fn four_mode_uses_pickup_kinds_only() {
        let kinds = AttentionMode::Four.kinds();
        assert_eq!(kinds.len(), 4);
        assert_eq!(kinds[0], AttentionKind::Original);
        assert!(kinds[1..].iter().all(|k| k.is_pickup_role()));
    }

    #[test]
    fn sharing_formula_holds() {
        for (mode, kinds) in [(AttentionMode::Seven, 7usize), (AttentionMode::Four, 4)] {
            let cfg = tiny(mode, true);
            let shared = PolicyModel::new(cfg, 1).unwrap().num_parameters();
            let unshared = PolicyModel::new(tiny(mode, false), 1).unwrap().num_parameters();
            let e = cfg.encoder;
            let per_layer = (kinds - 1) * e.heads * (e.d_h * e.d_k() + e.d_h * e.d_k());
            assert_eq!(unshared - shared, e.layers * per_layer, "{mode:?}");
        }
    }

    #[test]
    fn initialization_is_seeded() {
        let a = PolicyModel::new(tiny(AttentionMode::Seven, true), 3).unwrap();
        let b = PolicyModel::new(tiny(AttentionMode::Seven, true), 3).unwrap();
        let c = PolicyModel::new(tiny(AttentionMode::Seven, true), 4).unwrap();
        let vals = |m: &PolicyModel| m.params().iter().map(|(_, p)| p.value().clone()).collect::<Vec<_>>();
        assert_eq!(vals(&a), vals(&b));
        assert_ne!(vals(&a), vals(&c));
    }

    #[test]
    fn invalid_head_split_rejected() {
        let mut cfg = tiny(AttentionMode::Seven, true);
        cfg.encoder.heads = 3;
        assert!(PolicyModel::new(cfg, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = PolicyModel::new(tiny(AttentionMode::Four, false), 9).unwrap();
        let ck = model.to_checkpoint(Some(5));
        let bytes = ck.to_bytes().unwrap();
        let (back, train_n) = PolicyModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(train_n, Some(5));
        assert_eq!(back.config(), model.config());
        for ((_, a), (_, b)) in model.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.value(), b.value());
        }
    }
}
