//! Task networks on top of the shared user representation.
//!
//! CTR, FIFP and SPP are one-hidden-layer ReLU nets over `[rep; x]` with a
//! sigmoid output (x = candidate item, fashion icon, shop). L2R maps `rep`
//! to positive ranking-feature weights through softplus. PPP is a linear
//! softmax classifier over `rep` alone.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::FeatureSpec;
use crate::error::{Error, Result};
use crate::numeric::ops::{gemv_acc, gemv_t_acc, ger_acc, log_sum_exp, sigmoid_scalar, softmax_into, softplus};
use crate::numeric::{GradBuffer, ParamId, ParamKind, ParameterStore, RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Ctr,
    L2r,
    Ppp,
    Fifp,
    Spp,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [Self::Ctr, Self::L2r, Self::Ppp, Self::Fifp, Self::Spp];
    /// Tasks trained jointly; SPP is reserved for transfer.
    pub const JOINT: [TaskKind; 4] = [Self::Ctr, Self::L2r, Self::Ppp, Self::Fifp];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ctr => "ctr",
            Self::L2r => "l2r",
            Self::Ppp => "ppp",
            Self::Fifp => "fifp",
            Self::Spp => "spp",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Binary tasks are evaluated by AUC, PPP by precision.
    pub fn is_binary(self) -> bool {
        self != Self::Ppp
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Data(format!("unknown task tag {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadsConfig {
    pub width: usize,
    pub price_classes: usize,
    /// Names of the ranking features, in the order they appear in `r`.
    pub ranking_features: Vec<String>,
    pub icon: FeatureSpec,
    pub shop: FeatureSpec,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig {
            width: 64,
            price_classes: 7,
            ranking_features: [
                "sales_volume",
                "rating",
                "ctr_pred",
                "price_pref",
                "repurchase",
                "freshness",
                "shop_score",
                "relevance",
            ]
            .map(String::from)
            .to_vec(),
            icon: FeatureSpec::one_hot("icon", 1024, 8),
            shop: FeatureSpec::one_hot("spp_shop", 1024, 8),
        }
    }
}

impl HeadsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::config("head width must be positive"));
        }
        if self.price_classes < 2 {
            return Err(Error::config("price_classes must be >= 2"));
        }
        if self.ranking_features.is_empty() {
            return Err(Error::config("at least one ranking feature is required"));
        }
        self.icon.validate()?;
        self.shop.validate()
    }

    pub fn m(&self) -> usize {
        self.ranking_features.len()
    }
}

/// `W2 dropout(relu(W1 x + b1)) + b2`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub input: usize,
    pub width: usize,
    pub output: usize,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    x: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    scale: Vec<f64>,
    pub out: Vec<f64>,
}

/// Dropout applied to hidden activations of the heads.
#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    pub keep_prob: f64,
    pub training: bool,
}

impl Dropout {
    pub const OFF: Dropout = Dropout {
        keep_prob: 1.0,
        training: false,
    };
}

impl Mlp {
    fn register(store: &mut ParameterStore, prefix: &str, input: usize, width: usize, output: usize) -> Result<Self> {
        Ok(Mlp {
            w1: store.add(&format!("{prefix}.w1"), &[width, input], ParamKind::Dense)?,
            b1: store.add(&format!("{prefix}.b1"), &[width], ParamKind::Bias)?,
            w2: store.add(&format!("{prefix}.w2"), &[output, width], ParamKind::Dense)?,
            b2: store.add(&format!("{prefix}.b2"), &[output], ParamKind::Bias)?,
            input,
            width,
            output,
        })
    }

    fn bind(store: &ParameterStore, prefix: &str, input: usize, width: usize, output: usize) -> Result<Self> {
        let mlp = Mlp {
            w1: store.require(&format!("{prefix}.w1"))?,
            b1: store.require(&format!("{prefix}.b1"))?,
            w2: store.require(&format!("{prefix}.w2"))?,
            b2: store.require(&format!("{prefix}.b2"))?,
            input,
            width,
            output,
        };
        if store.value(mlp.w1).shape() != [width, input] || store.value(mlp.w2).shape() != [output, width] {
            return Err(Error::config(format!("{prefix} head has unexpected shape")));
        }
        Ok(mlp)
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Hidden pre-activation `W1 x + b1`.
    pub fn hidden_pre(&self, store: &ParameterStore, x: &[f64]) -> Vec<f64> {
        let mut pre = store.value(self.b1).data().to_vec();
        gemv_acc(store.value(self.w1).data(), self.width, self.input, x, &mut pre);
        pre
    }

    /// Output layer on a post-ReLU hidden vector.
    pub fn output_from_hidden(&self, store: &ParameterStore, hidden: &[f64]) -> Vec<f64> {
        let mut out = store.value(self.b2).data().to_vec();
        gemv_acc(store.value(self.w2).data(), self.output, self.width, hidden, &mut out);
        out
    }

    pub fn forward(&self, store: &ParameterStore, x: Vec<f64>, dropout: Dropout, rng: &mut RngState) -> MlpCache {
        debug_assert_eq!(x.len(), self.input);
        let pre = self.hidden_pre(store, &x);
        let mut hidden: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let mask = crate::numeric::ops::dropout_in_place(&mut hidden, dropout.keep_prob, rng, dropout.training);
        let inv = if dropout.training { 1.0 / dropout.keep_prob } else { 1.0 };
        let scale = mask.iter().map(|&k| if k { inv } else { 0.0 }).collect();
        let out = self.output_from_hidden(store, &hidden);
        MlpCache {
            x,
            pre,
            hidden,
            scale,
            out,
        }
    }

    /// Accumulates parameter gradients; returns `d loss / d x`.
    pub fn backward(&self, store: &ParameterStore, cache: &MlpCache, dout: &[f64], grads: &mut GradBuffer) -> Vec<f64> {
        ger_acc(dout, &cache.hidden, grads.slot(self.w2));
        for (g, d) in grads.slot(self.b2).iter_mut().zip(dout) {
            *g += d;
        }
        let mut dh = vec![0.0; self.width];
        gemv_t_acc(store.value(self.w2).data(), self.output, self.width, dout, &mut dh);
        for k in 0..self.width {
            dh[k] = if cache.pre[k] > 0.0 { dh[k] * cache.scale[k] } else { 0.0 };
        }
        ger_acc(&dh, &cache.x, grads.slot(self.w1));
        for (g, d) in grads.slot(self.b1).iter_mut().zip(&dh) {
            *g += d;
        }
        let mut dx = vec![0.0; self.input];
        gemv_t_acc(store.value(self.w1).data(), self.width, self.input, &dh, &mut dx);
        dx
    }
}

/// Linear classifier `z = W rep + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn forward(&self, store: &ParameterStore, x: &[f64]) -> Vec<f64> {
        let mut z = store.value(self.b).data().to_vec();
        gemv_acc(store.value(self.w).data(), self.output, self.input, x, &mut z);
        z
    }

    pub fn backward(&self, store: &ParameterStore, x: &[f64], dz: &[f64], grads: &mut GradBuffer) -> Vec<f64> {
        ger_acc(dz, x, grads.slot(self.w));
        for (g, d) in grads.slot(self.b).iter_mut().zip(dz) {
            *g += d;
        }
        let mut dx = vec![0.0; self.input];
        gemv_t_acc(store.value(self.w).data(), self.output, self.input, dz, &mut dx);
        dx
    }
}

/// One L2R instance: label in {-1, +1}, positive sample weight, features `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct L2rInstance {
    pub label: f64,
    pub weight: f64,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Heads {
    cfg: HeadsConfig,
    rep_dim: usize,
    item_dim: usize,
    pub ctr: Mlp,
    pub l2r: Mlp,
    pub ppp: Linear,
    pub fifp: Mlp,
    pub icon_table: ParamId,
    pub spp: Mlp,
    pub shop_table: ParamId,
}

impl Heads {
    pub fn register(store: &mut ParameterStore, cfg: &HeadsConfig, rep_dim: usize, item_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let ctr = Mlp::register(store, "ctr", rep_dim + item_dim, w, 1)?;
        let l2r = Mlp::register(store, "l2r", rep_dim, w, cfg.m())?;
        let ppp = Linear {
            w: store.add("ppp.w", &[cfg.price_classes, rep_dim], ParamKind::Dense)?,
            b: store.add("ppp.b", &[cfg.price_classes], ParamKind::Bias)?,
            input: rep_dim,
            output: cfg.price_classes,
        };
        let icon_table = store.add("fifp.icon", &[cfg.icon.bucket_count, cfg.icon.embed_dim], ParamKind::Embedding)?;
        let fifp = Mlp::register(store, "fifp", rep_dim + cfg.icon.embed_dim, w, 1)?;
        let shop_table = store.add("spp.shop", &[cfg.shop.bucket_count, cfg.shop.embed_dim], ParamKind::Embedding)?;
        let spp = Mlp::register(store, "spp", rep_dim + cfg.shop.embed_dim, w, 1)?;
        Ok(Heads {
            cfg: cfg.clone(),
            rep_dim,
            item_dim,
            ctr,
            l2r,
            ppp,
            fifp,
            icon_table,
            spp,
            shop_table,
        })
    }

    pub fn bind(store: &ParameterStore, cfg: &HeadsConfig, rep_dim: usize, item_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        Ok(Heads {
            cfg: cfg.clone(),
            rep_dim,
            item_dim,
            ctr: Mlp::bind(store, "ctr", rep_dim + item_dim, w, 1)?,
            l2r: Mlp::bind(store, "l2r", rep_dim, w, cfg.m())?,
            ppp: Linear {
                w: store.require("ppp.w")?,
                b: store.require("ppp.b")?,
                input: rep_dim,
                output: cfg.price_classes,
            },
            fifp: Mlp::bind(store, "fifp", rep_dim + cfg.icon.embed_dim, w, 1)?,
            icon_table: store.require("fifp.icon")?,
            spp: Mlp::bind(store, "spp", rep_dim + cfg.shop.embed_dim, w, 1)?,
            shop_table: store.require("spp.shop")?,
        })
    }

    pub fn config(&self) -> &HeadsConfig {
        &self.cfg
    }

    pub fn rep_dim(&self) -> usize {
        self.rep_dim
    }

    pub fn item_dim(&self) -> usize {
        self.item_dim
    }

    pub fn task_param_ids(&self, task: TaskKind) -> Vec<ParamId> {
        match task {
            TaskKind::Ctr => self.ctr.ids().to_vec(),
            TaskKind::L2r => self.l2r.ids().to_vec(),
            TaskKind::Ppp => vec![self.ppp.w, self.ppp.b],
            TaskKind::Fifp => {
                let mut v = self.fifp.ids().to_vec();
                v.push(self.icon_table);
                v
            }
            TaskKind::Spp => {
                let mut v = self.spp.ids().to_vec();
                v.push(self.shop_table);
                v
            }
        }
    }

    pub fn icon_row(&self, token: &str) -> u32 {
        crate::embedding::hash_bucket(token, &self.cfg.icon) as u32
    }

    pub fn shop_row(&self, token: &str) -> u32 {
        crate::embedding::hash_bucket(token, &self.cfg.shop) as u32
    }

    fn concat(rep: &[f64], x: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(rep.len() + x.len());
        v.extend_from_slice(rep);
        v.extend_from_slice(x);
        v
    }

    /// CTR logit and its cache.
    pub fn ctr_forward(&self, store: &ParameterStore, rep: &[f64], e_item: &[f64], dropout: Dropout, rng: &mut RngState) -> MlpCache {
        self.ctr.forward(store, Self::concat(rep, e_item), dropout, rng)
    }

    pub fn ctr_score(&self, store: &ParameterStore, rep: &Tensor, e_item: &Tensor) -> f64 {
        let c = self.ctr_forward(store, rep.data(), e_item.data(), Dropout::OFF, &mut RngState::new(0));
        sigmoid_scalar(c.out[0])
    }

    pub fn fifp_forward(&self, store: &ParameterStore, rep: &[f64], icon_row: u32, dropout: Dropout, rng: &mut RngState) -> MlpCache {
        let f = store.value(self.icon_table).row(icon_row as usize);
        self.fifp.forward(store, Self::concat(rep, f), dropout, rng)
    }

    pub fn fifp_score(&self, store: &ParameterStore, rep: &Tensor, f_icon: &Tensor) -> f64 {
        let c = self.fifp.forward(store, Self::concat(rep.data(), f_icon.data()), Dropout::OFF, &mut RngState::new(0));
        sigmoid_scalar(c.out[0])
    }

    pub fn spp_forward(&self, store: &ParameterStore, rep: &[f64], shop_row: u32, dropout: Dropout, rng: &mut RngState) -> MlpCache {
        let f = store.value(self.shop_table).row(shop_row as usize);
        self.spp.forward(store, Self::concat(rep, f), dropout, rng)
    }

    pub fn spp_score(&self, store: &ParameterStore, rep: &Tensor, shop_features: &Tensor) -> f64 {
        let c = self.spp.forward(store, Self::concat(rep.data(), shop_features.data()), Dropout::OFF, &mut RngState::new(0));
        sigmoid_scalar(c.out[0])
    }

    /// L2R forward: cache of the weight net; the weights are
    /// `softplus(cache.out)`.
    pub fn l2r_forward(&self, store: &ParameterStore, rep: &[f64], dropout: Dropout, rng: &mut RngState) -> MlpCache {
        self.l2r.forward(store, rep.to_vec(), dropout, rng)
    }

    pub fn l2r_weights(&self, store: &ParameterStore, rep: &Tensor) -> Tensor {
        let c = self.l2r_forward(store, rep.data(), Dropout::OFF, &mut RngState::new(0));
        let w = c.out.iter().map(|&a| softplus(a)).collect();
        Tensor::from_parts(vec![self.cfg.m()], w)
    }

    pub fn ppp_logits(&self, store: &ParameterStore, rep: &Tensor) -> Tensor {
        Tensor::from_parts(vec![self.cfg.price_classes], self.ppp.forward(store, rep.data()))
    }

    /// `-log softmax_y(z)` for a 1-based class label.
    pub fn ppp_loss(&self, store: &ParameterStore, rep: &Tensor, label: usize) -> Result<f64> {
        check_price_label(label, self.cfg.price_classes)?;
        Ok(ppp_nll(self.ppp_logits(store, rep).data(), label - 1))
    }
}

pub(crate) fn check_price_label(label: usize, k: usize) -> Result<()> {
    if label == 0 || label > k {
        return Err(Error::Data(format!("price label {label} outside 1..={k}")));
    }
    Ok(())
}

/// Binary log-loss from a logit: `softplus(z) - y z`.
#[inline]
pub fn logit_bce(z: f64, y: f64) -> f64 {
    softplus(z) - y * z
}

/// Negative log-likelihood of a 0-based class under softmax logits.
pub fn ppp_nll(z: &[f64], class: usize) -> f64 {
    log_sum_exp(z) - z[class]
}

pub fn ppp_probs(z: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; z.len()];
    softmax_into(z, &mut p);
    p
}

/// Mean negative log-likelihood of binary labels given probabilities.
/// Probabilities are clamped to `[1e-12, 1 - 1e-12]`.
pub fn ctr_loss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Data("scores and labels must be non-empty and of equal length".into()));
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let s = s.clamp(1e-12, 1.0 - 1e-12);
            -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// Weighted logistic ranking loss normalised by the total weight:
/// `sum_i n_i log(1 + exp(-y_i w_i . r_i)) / sum_i n_i`.
pub fn l2r_loss(batch: &[L2rInstance], weights: &[Tensor]) -> Result<f64> {
    if batch.len() != weights.len() || batch.is_empty() {
        return Err(Error::Data("one weight vector per instance is required".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (inst, w) in batch.iter().zip(weights) {
        if !(inst.weight > 0.0) {
            return Err(Error::Data(format!("sample weight must be positive, got {}", inst.weight)));
        }
        if inst.label != 1.0 && inst.label != -1.0 {
            return Err(Error::Data(format!("L2R label must be -1 or +1, got {}", inst.label)));
        }
        if w.len() != inst.features.len() {
            return Err(Error::shape("l2r_loss", "weights and features differ in length"));
        }
        let score: f64 = w.data().iter().zip(&inst.features).map(|(a, b)| a * b).sum();
        num += inst.weight * softplus(-inst.label * score);
        den += inst.weight;
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ParameterStore, Heads) {
        let mut store = ParameterStore::new();
        let heads = Heads::register(&mut store, &HeadsConfig::default(), 10, 6).unwrap();
        store.init(&mut RngState::new(8));
        (store, heads)
    }

    fn zero_all(store: &mut ParameterStore) {
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).fill(0.0);
        }
    }

    #[test]
    fn zeroed_heads_predict_chance() {
        let (mut store, heads) = setup();
        zero_all(&mut store);
        let rep = Tensor::vector((0..10).map(|i| i as f64 - 4.5).collect()).unwrap();
        assert_eq!(heads.ctr_score(&store, &rep, &Tensor::vector(vec![0.3; 6]).unwrap()), 0.5);
        assert_eq!(heads.fifp_score(&store, &rep, &Tensor::vector(vec![1.0; 8]).unwrap()), 0.5);
        assert_eq!(heads.spp_score(&store, &rep, &Tensor::vector(vec![-1.0; 8]).unwrap()), 0.5);
        for y in 1..=7 {
            let l = heads.ppp_loss(&store, &rep, y).unwrap();
            assert!((l - 7f64.ln()).abs() < 1e-12);
        }
        assert!(heads.ppp_loss(&store, &rep, 0).is_err());
        assert!(heads.ppp_loss(&store, &rep, 8).is_err());
    }

    #[test]
    fn ctr_loss_anchors() {
        let l = ctr_loss(&[0.5, 0.5, 0.5], &[1.0, 0.0, 1.0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = ctr_loss(&[1.0 - 1e-12, 1e-12], &[1.0, 0.0]).unwrap();
        assert!(l < 1e-11);
        assert!((logit_bce(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ppp_saturation() {
        let mut z = vec![0.0; 7];
        z[0] = 10.0;
        assert!(ppp_nll(&z, 0) < 1e-3);
    }

    #[test]
    fn l2r_loss_anchors_and_errors() {
        let zero = vec![Tensor::vector(vec![0.0; 3]).unwrap(); 2];
        let batch = vec![
            L2rInstance {
                label: 1.0,
                weight: 1.0,
                features: vec![1.0, 2.0, 3.0],
            },
            L2rInstance {
                label: -1.0,
                weight: 5.0,
                features: vec![0.5, 0.0, -2.0],
            },
        ];
        assert!((l2r_loss(&batch, &zero).unwrap() - 2f64.ln()).abs() < 1e-15);

        let big = vec![Tensor::vector(vec![100.0; 3]).unwrap()];
        let pos = vec![L2rInstance {
            label: 1.0,
            weight: 2.0,
            features: vec![1.0, 1.0, 1.0],
        }];
        assert!(l2r_loss(&pos, &big).unwrap() < 1e-100);

        let mut bad = batch.clone();
        bad[1].weight = 0.0;
        assert!(matches!(l2r_loss(&bad, &zero), Err(Error::Data(_))));
    }

    #[test]
    fn l2r_three_instance_hand_value() {
        let w = Tensor::vector(vec![0.5, 1.5]).unwrap();
        let batch = vec![
            L2rInstance {
                label: 1.0,
                weight: 1.0,
                features: vec![1.0, 0.0],
            },
            L2rInstance {
                label: -1.0,
                weight: 2.0,
                features: vec![0.0, 1.0],
            },
            L2rInstance {
                label: 1.0,
                weight: 5.0,
                features: vec![-1.0, 1.0],
            },
        ];
        // margins: +0.5, -1.5, +1.0
        let want = (1.0 * (1.0 + (-0.5f64).exp()).ln()
            + 2.0 * (1.0 + 1.5f64.exp()).ln()
            + 5.0 * (1.0 + (-1.0f64).exp()).ln())
            / 8.0;
        let got = l2r_loss(&batch, &vec![w; 3]).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn l2r_weights_are_positive() {
        let (store, heads) = setup();
        let rep = Tensor::vector(vec![0.7; 10]).unwrap();
        let w = heads.l2r_weights(&store, &rep);
        assert_eq!(w.len(), 8);
        assert!(w.data().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn task_tags_parse() {
        assert_eq!("CTR".parse::<TaskKind>().unwrap(), TaskKind::Ctr);
        assert!("cvr".parse::<TaskKind>().is_err());
    }
}
