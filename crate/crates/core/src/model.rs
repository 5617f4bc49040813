//! The assembled network: embeddings, encoder and heads over one parameter
//! store, with per-example loss/gradient and inference entry points.

use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::embedding::{BehaviorIds, EmbeddedBehavior, Embedder, EmbeddingConfig, FeatureKind, ItemIds};
use crate::encoder::{Encoder, EncoderConfig, EncoderInputs, EncoderTape};
use crate::error::{Error, Result};
use crate::heads::{logit_bce, ppp_nll, ppp_probs, Dropout, Heads, HeadsConfig, TaskKind};
use crate::numeric::ops::{sigmoid_scalar, softplus};
use crate::numeric::{GradBuffer, ParamId, ParameterStore, RngState};

/// Architecture: everything that determines the parameter layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub embedding: EmbeddingConfig,
    pub encoder: EncoderConfig,
    pub heads: HeadsConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        self.encoder.validate()?;
        self.heads.validate()
    }

    /// Canonical `key=value` lines of the architecture, in a fixed order.
    pub fn canonical(&self) -> String {
        let e = &self.embedding;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        for f in e.item_features.iter().chain([&e.query, &self.heads.icon, &self.heads.shop]) {
            let kind = if f.kind == FeatureKind::MultiHot { "multi" } else { "one" };
            put(&format!("feature.{}", f.name), format!("{kind},{},{}", f.bucket_count, f.embed_dim));
        }
        put("property.btype.dim", e.btype_dim.to_string());
        put("property.scenario.dim", e.scenario_dim.to_string());
        put("property.time.dim", e.time_dim.to_string());
        put("profile.fields", e.profile_fields.join(","));
        put("profile.buckets", e.profile_buckets.to_string());
        put("profile.dim", e.profile_dim.to_string());
        put("encoder.d_h", self.encoder.d_h.to_string());
        put("encoder.d_att", self.encoder.d_att.to_string());
        put("encoder.max_len", self.encoder.max_len.to_string());
        put("heads.width", self.heads.width.to_string());
        put("heads.price_classes", self.heads.price_classes.to_string());
        put("heads.ranking_features", self.heads.ranking_features.join(","));
        s
    }

    /// First eight bytes of SHA-256 over [`ModelConfig::canonical`].
    pub fn fingerprint(&self) -> u64 {
        let digest = Sha256::digest(self.canonical().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// Task payload of a prepared example.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Ctr { item: ItemIds, label: f64 },
    L2r { features: Vec<f64>, label: f64, weight: f64 },
    /// 0-based price class.
    Ppp { class: usize },
    Fifp { icon: u32, label: f64 },
    Spp { shop: u32, label: f64 },
}

impl Target {
    pub fn task(&self) -> TaskKind {
        match self {
            Target::Ctr { .. } => TaskKind::Ctr,
            Target::L2r { .. } => TaskKind::L2r,
            Target::Ppp { .. } => TaskKind::Ppp,
            Target::Fifp { .. } => TaskKind::Fifp,
            Target::Spp { .. } => TaskKind::Spp,
        }
    }

    /// Weight of this example in its batch loss (L2R sample weight, else 1).
    pub fn weight(&self) -> f64 {
        match self {
            Target::L2r { weight, .. } => *weight,
            _ => 1.0,
        }
    }

    /// Binary label as 0/1 (L2R's -1 maps to 0); `None` for PPP.
    pub fn binary_label(&self) -> Option<bool> {
        match self {
            Target::Ctr { label, .. } | Target::Fifp { label, .. } | Target::Spp { label, .. } => Some(*label > 0.5),
            Target::L2r { label, .. } => Some(*label > 0.0),
            Target::Ppp { .. } => None,
        }
    }
}

/// A hashed, model-ready training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub seq: Arc<[BehaviorIds]>,
    pub query: Vec<u32>,
    pub profile: Vec<u32>,
    pub target: Target,
}

impl Example {
    pub fn task(&self) -> TaskKind {
        self.target.task()
    }
}

/// Inference output for one example.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    /// Click/follow/shop probability, or the L2R ranking score.
    Score(f64),
    /// PPP class distribution.
    Classes(Vec<f64>),
}

impl Prediction {
    pub fn score(&self) -> f64 {
        match self {
            Prediction::Score(s) => *s,
            Prediction::Classes(p) => p.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn argmax(&self) -> usize {
        match self {
            Prediction::Score(s) => usize::from(*s > 0.5),
            Prediction::Classes(p) => argmax(p),
        }
    }
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// How far the gradient of a head loss propagates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backprop {
    /// Head, encoder and embeddings.
    Full,
    /// Head parameters only; the representation is treated as a constant.
    HeadOnly,
}

#[derive(Clone, Debug)]
pub struct Dupn {
    cfg: ModelConfig,
    pub embedder: Embedder,
    pub encoder: Encoder,
    pub heads: Heads,
}

/// Forward record of the trunk for one example.
pub struct TrunkTape {
    pub seq: Vec<EmbeddedBehavior>,
    pub encoder: EncoderTape,
}

impl Dupn {
    fn inputs(cfg: &ModelConfig) -> EncoderInputs {
        EncoderInputs {
            d_e: cfg.embedding.item_dim(),
            d_p: cfg.embedding.property_dim(),
            d_q: cfg.embedding.query_dim(),
            d_u: cfg.embedding.profile_dim_total(),
        }
    }

    /// Registers every parameter in `store`.
    pub fn register(store: &mut ParameterStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let embedder = Embedder::register(store, &cfg.embedding)?;
        let encoder = Encoder::register(store, &cfg.encoder, Self::inputs(cfg))?;
        let heads = Heads::register(store, &cfg.heads, encoder.rep_dim(), cfg.embedding.item_dim())?;
        Ok(Dupn {
            cfg: cfg.clone(),
            embedder,
            encoder,
            heads,
        })
    }

    pub fn bind(store: &ParameterStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let embedder = Embedder::bind(store, &cfg.embedding)?;
        let encoder = Encoder::bind(store, &cfg.encoder, Self::inputs(cfg))?;
        let heads = Heads::bind(store, &cfg.heads, encoder.rep_dim(), cfg.embedding.item_dim())?;
        Ok(Dupn {
            cfg: cfg.clone(),
            embedder,
            encoder,
            heads,
        })
    }

    /// Fresh store with initialised parameters.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(ParameterStore, Self)> {
        let mut store = ParameterStore::new();
        let model = Self::register(&mut store, cfg)?;
        store.init(&mut RngState::new(seed));
        Ok((store, model))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn fingerprint(&self) -> u64 {
        self.cfg.fingerprint()
    }

    pub fn rep_dim(&self) -> usize {
        self.encoder.rep_dim()
    }

    /// Embedding tables plus encoder: the shared representation network.
    pub fn trunk_param_ids(&self) -> Vec<ParamId> {
        let mut v = self.embedder.param_ids();
        v.extend(self.encoder.param_ids());
        v
    }

    /// Keeps the most recent `max_len` behaviors. Returns whether it cut.
    pub fn truncate<'a, T>(&self, seq: &'a [T]) -> (&'a [T], bool) {
        let max = self.cfg.encoder.max_len;
        if seq.len() > max {
            (&seq[seq.len() - max..], true)
        } else {
            (seq, false)
        }
    }

    pub fn embed_sequence(&self, store: &ParameterStore, seq: &[BehaviorIds]) -> Vec<EmbeddedBehavior> {
        seq.iter().map(|b| self.embedder.embed_ids(b, store)).collect()
    }

    /// Embeds and encodes the user side of an example.
    pub fn trunk_forward(&self, store: &ParameterStore, seq: &[BehaviorIds], query: &[u32], profile: &[u32]) -> Result<TrunkTape> {
        let (seq, _) = self.truncate(seq);
        let emb = self.embed_sequence(store, seq);
        let mut q = vec![0.0; self.cfg.embedding.query_dim()];
        self.embedder.query_into(query, store, &mut q);
        let mut u = vec![0.0; self.cfg.embedding.profile_dim_total()];
        self.embedder.profile_into(profile, store, &mut u);
        let encoder = self.encoder.forward(store, &emb, &q, &u)?;
        Ok(TrunkTape { seq: emb, encoder })
    }

    fn trunk_backward(&self, store: &ParameterStore, ex: &Example, tape: &TrunkTape, drep: &[f64], grads: &mut GradBuffer) {
        let (seq, _) = self.truncate(&ex.seq);
        let g = self.encoder.backward(store, &tape.seq, &tape.encoder, drep, grads);
        for ((b, de), dp) in seq.iter().zip(&g.de).zip(&g.dp) {
            self.embedder.item_backward(&b.item, de, grads);
            self.embedder.property_backward(b, dp, grads);
        }
        self.embedder.query_backward(&ex.query, &g.dq, grads);
        self.embedder.profile_backward(&ex.profile, &g.du, grads);
    }

    /// Loss of one example times `scale`; when `grads` is given, accumulates
    /// the gradient of that scaled loss.
    ///
    /// The unscaled loss is the per-example term of the task's batch loss
    /// (for L2R it already includes the sample weight `n_i`).
    pub fn loss(
        &self,
        store: &ParameterStore,
        ex: &Example,
        scale: f64,
        dropout: Dropout,
        rng: &mut RngState,
        grads: Option<&mut GradBuffer>,
        backprop: Backprop,
    ) -> Result<f64> {
        let tape = self.trunk_forward(store, &ex.seq, &ex.query, &ex.profile)?;
        let rep = &tape.encoder.rep;
        let heads = &self.heads;
        let rd = rep.len();
        let (loss, drep) = match &ex.target {
            Target::Ctr { item, label } => {
                let mut e = vec![0.0; heads.item_dim()];
                self.embedder.item_into(item, store, &mut e);
                let c = heads.ctr_forward(store, rep, &e, dropout, rng);
                let z = c.out[0];
                let loss = logit_bce(z, *label);
                let drep = grads.map(|g| {
                    let dz = scale * (sigmoid_scalar(z) - label);
                    let dx = heads.ctr.backward(store, &c, &[dz], g);
                    if backprop == Backprop::Full {
                        self.embedder.item_backward(item, &dx[rd..], g);
                    }
                    (dx[..rd].to_vec(), g)
                });
                (loss, drep)
            }
            Target::Fifp { icon, label } | Target::Spp { shop: icon, label } => {
                let spp = ex.task() == TaskKind::Spp;
                let (mlp, table) = if spp { (&heads.spp, heads.shop_table) } else { (&heads.fifp, heads.icon_table) };
                let c = if spp {
                    heads.spp_forward(store, rep, *icon, dropout, rng)
                } else {
                    heads.fifp_forward(store, rep, *icon, dropout, rng)
                };
                let z = c.out[0];
                let loss = logit_bce(z, *label);
                let drep = grads.map(|g| {
                    let dz = scale * (sigmoid_scalar(z) - label);
                    let dx = mlp.backward(store, &c, &[dz], g);
                    for (a, b) in g.row(table, *icon as usize).iter_mut().zip(&dx[rd..]) {
                        *a += b;
                    }
                    (dx[..rd].to_vec(), g)
                });
                (loss, drep)
            }
            Target::L2r { features, label, weight } => {
                let c = heads.l2r_forward(store, rep, dropout, rng);
                let w: Vec<f64> = c.out.iter().map(|&a| softplus(a)).collect();
                let margin = label * w.iter().zip(features).map(|(a, b)| a * b).sum::<f64>();
                let loss = weight * softplus(-margin);
                let drep = grads.map(|g| {
                    // d/d score of n * softplus(-y * score)
                    let ds = -scale * weight * label * sigmoid_scalar(-margin);
                    let dout: Vec<f64> = c.out.iter().zip(features).map(|(&a, r)| ds * r * sigmoid_scalar(a)).collect();
                    (heads.l2r.backward(store, &c, &dout, g), g)
                });
                (loss, drep)
            }
            Target::Ppp { class } => {
                let z = heads.ppp.forward(store, rep);
                let loss = ppp_nll(&z, *class);
                let drep = grads.map(|g| {
                    let mut dz = ppp_probs(&z);
                    dz[*class] -= 1.0;
                    dz.iter_mut().for_each(|d| *d *= scale);
                    (heads.ppp.backward(store, rep, &dz, g), g)
                });
                (loss, drep)
            }
        };
        if !loss.is_finite() {
            return Err(Error::non_finite(format!("{} loss", ex.task())));
        }
        if let (Some((drep, g)), Backprop::Full) = (drep, backprop) {
            self.trunk_backward(store, ex, &tape, &drep, g);
        }
        Ok(loss * scale)
    }

    /// Inference on one example (no dropout).
    pub fn predict(&self, store: &ParameterStore, ex: &Example) -> Result<Prediction> {
        let tape = self.trunk_forward(store, &ex.seq, &ex.query, &ex.profile)?;
        Ok(self.predict_from_rep(store, &tape.encoder.rep, &ex.target))
    }

    pub fn predict_from_rep(&self, store: &ParameterStore, rep: &[f64], target: &Target) -> Prediction {
        let heads = &self.heads;
        let mut rng = RngState::new(0);
        match target {
            Target::Ctr { item, .. } => {
                let mut e = vec![0.0; heads.item_dim()];
                self.embedder.item_into(item, store, &mut e);
                Prediction::Score(sigmoid_scalar(heads.ctr_forward(store, rep, &e, Dropout::OFF, &mut rng).out[0]))
            }
            Target::Fifp { icon, .. } => Prediction::Score(sigmoid_scalar(heads.fifp_forward(store, rep, *icon, Dropout::OFF, &mut rng).out[0])),
            Target::Spp { shop, .. } => Prediction::Score(sigmoid_scalar(heads.spp_forward(store, rep, *shop, Dropout::OFF, &mut rng).out[0])),
            Target::L2r { features, .. } => {
                let c = heads.l2r_forward(store, rep, Dropout::OFF, &mut rng);
                Prediction::Score(c.out.iter().zip(features).map(|(&a, r)| softplus(a) * r).sum())
            }
            Target::Ppp { .. } => Prediction::Classes(ppp_probs(&heads.ppp.forward(store, rep))),
        }
    }

    /// User representation `rep = [rep_s, u]` and attention weights.
    pub fn represent(&self, store: &ParameterStore, seq: &[BehaviorIds], query: &[u32], profile: &[u32]) -> Result<(Vec<f64>, Vec<f64>)> {
        let tape = self.trunk_forward(store, seq, query, profile)?;
        Ok((tape.encoder.rep, tape.encoder.weights))
    }
}
