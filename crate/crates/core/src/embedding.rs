//! Behavior, item, query and profile embeddings over hashed vocabularies.
//!
//! A behavior embeds to `res = [e, p]`: `e` concatenates the item-feature rows
//! (item id, brand, shop, category, mean of tag rows) and `p` the property rows
//! (behavior type, scenario, time bucket). Candidate items go through the same
//! item tables, so sequence items and candidates share storage.

use crate::error::{Error, Result};
use crate::numeric::rng::mix64;
use crate::numeric::{GradBuffer, ParamId, ParamKind, ParameterStore, Tensor};
use crate::record::{BehaviorRecord, BehaviorType, ItemFeatures, QueryContext, Scenario, TimeBucket, UserProfile};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    OneHot,
    MultiHot,
}

/// One embedded categorical feature.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    pub bucket_count: usize,
    pub embed_dim: usize,
}

impl FeatureSpec {
    pub fn one_hot(name: &str, bucket_count: usize, embed_dim: usize) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::OneHot,
            bucket_count,
            embed_dim,
        }
    }

    pub fn multi_hot(name: &str, bucket_count: usize, embed_dim: usize) -> Self {
        FeatureSpec {
            kind: FeatureKind::MultiHot,
            ..Self::one_hot(name, bucket_count, embed_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bucket_count < 2 || self.embed_dim < 1 || self.name.is_empty() {
            return Err(Error::config(format!(
                "feature {:?} needs bucket_count >= 2 and embed_dim >= 1 (got {}, {})",
                self.name, self.bucket_count, self.embed_dim
            )));
        }
        Ok(())
    }
}

/// Stable bucket for `token` under `spec`: 64-bit FNV-1a over the feature name
/// and the token, run through a SplitMix finaliser, modulo the bucket count.
pub fn hash_bucket(token: &str, spec: &FeatureSpec) -> usize {
    hash_token(&spec.name, token, spec.bucket_count)
}

pub(crate) fn hash_token(namespace: &str, token: &str, buckets: usize) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in namespace.bytes().chain([0x1f]).chain(token.bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (mix64(h) % buckets as u64) as usize
}

/// Dimensions of every embedded input.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingConfig {
    /// Item id, brand, shop, category (one-hot) and tags (multi-hot), in order.
    pub item_features: Vec<FeatureSpec>,
    pub btype_dim: usize,
    pub scenario_dim: usize,
    pub time_dim: usize,
    pub query: FeatureSpec,
    pub profile_fields: Vec<String>,
    pub profile_buckets: usize,
    pub profile_dim: usize,
}

pub const ITEM_FEATURES: [&str; 5] = ["item", "brand", "shop", "category", "tags"];

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            item_features: vec![
                FeatureSpec::one_hot("item", 4096, 8),
                FeatureSpec::one_hot("brand", 512, 6),
                FeatureSpec::one_hot("shop", 1024, 6),
                FeatureSpec::one_hot("category", 64, 4),
                FeatureSpec::multi_hot("tags", 256, 7),
            ],
            btype_dim: 4,
            scenario_dim: 4,
            time_dim: 4,
            query: FeatureSpec::multi_hot("query", 1024, 8),
            profile_fields: vec!["age".into(), "gender".into(), "power".into()],
            profile_buckets: 64,
            profile_dim: 4,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.item_features.len() != ITEM_FEATURES.len() {
            return Err(Error::config("exactly five item features are required"));
        }
        for (spec, want) in self.item_features.iter().zip(ITEM_FEATURES) {
            spec.validate()?;
            if spec.name != want {
                return Err(Error::config(format!("item feature {:?} out of order, expected {want}", spec.name)));
            }
            let want_kind = if want == "tags" { FeatureKind::MultiHot } else { FeatureKind::OneHot };
            if spec.kind != want_kind {
                return Err(Error::config(format!("feature {want} has the wrong kind")));
            }
        }
        self.query.validate()?;
        if self.btype_dim == 0 || self.scenario_dim == 0 || self.time_dim == 0 || self.profile_dim == 0 {
            return Err(Error::config("embedding dims must be positive"));
        }
        if self.profile_buckets < 2 {
            return Err(Error::config("profile buckets must be >= 2"));
        }
        Ok(())
    }

    pub fn item_dim(&self) -> usize {
        self.item_features.iter().map(|f| f.embed_dim).sum()
    }

    pub fn property_dim(&self) -> usize {
        self.btype_dim + self.scenario_dim + self.time_dim
    }

    pub fn behavior_dim(&self) -> usize {
        self.item_dim() + self.property_dim()
    }

    pub fn query_dim(&self) -> usize {
        self.query.embed_dim
    }

    pub fn profile_dim_total(&self) -> usize {
        self.profile_dim * self.profile_fields.len()
    }
}

/// Hashed row indices of one item.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ItemIds {
    /// Rows in the item, brand, shop and category tables.
    pub rows: [u32; 4],
    pub tags: Vec<u32>,
}

/// Hashed behavior: item rows plus property ordinals.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BehaviorIds {
    pub item: ItemIds,
    pub btype: u8,
    pub scen: u8,
    pub time: u8,
}

impl BehaviorIds {
    pub fn btype(&self) -> BehaviorType {
        BehaviorType::ALL[self.btype as usize]
    }

    pub fn time_bucket(&self) -> TimeBucket {
        TimeBucket::from_index(self.time as usize).expect("time ordinal in range")
    }
}

/// `res = [e, p]` for one behavior.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedBehavior {
    res: Vec<f64>,
    item_dim: usize,
}

impl EmbeddedBehavior {
    pub fn from_parts(e: &[f64], p: &[f64]) -> Self {
        let mut res = e.to_vec();
        res.extend_from_slice(p);
        EmbeddedBehavior { res, item_dim: e.len() }
    }

    pub fn e(&self) -> &[f64] {
        &self.res[..self.item_dim]
    }

    pub fn p(&self) -> &[f64] {
        &self.res[self.item_dim..]
    }

    pub fn res(&self) -> &[f64] {
        &self.res
    }
}

/// Embedding tables bound to a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct Embedder {
    cfg: EmbeddingConfig,
    item_tables: [ParamId; 4],
    tags: ParamId,
    btype: ParamId,
    scenario: ParamId,
    time: ParamId,
    query: ParamId,
    no_query: ParamId,
    profile: Vec<ParamId>,
}

impl Embedder {
    /// Creates every table in `store`.
    pub fn register(store: &mut ParameterStore, cfg: &EmbeddingConfig) -> Result<Self> {
        cfg.validate()?;
        let f = &cfg.item_features;
        let mut table = |name: &str, rows: usize, dim: usize| store.add(&format!("emb.{name}"), &[rows, dim], ParamKind::Embedding);
        let item_tables = [
            table("item", f[0].bucket_count, f[0].embed_dim)?,
            table("brand", f[1].bucket_count, f[1].embed_dim)?,
            table("shop", f[2].bucket_count, f[2].embed_dim)?,
            table("category", f[3].bucket_count, f[3].embed_dim)?,
        ];
        let tags = table("tags", f[4].bucket_count, f[4].embed_dim)?;
        let btype = table("btype", BehaviorType::ALL.len(), cfg.btype_dim)?;
        let scenario = table("scenario", Scenario::ALL.len(), cfg.scenario_dim)?;
        let time = table("time", TimeBucket::COUNT, cfg.time_dim)?;
        let query = table("query", cfg.query.bucket_count, cfg.query.embed_dim)?;
        let no_query = table("no_query", 1, cfg.query.embed_dim)?;
        let profile = cfg
            .profile_fields
            .iter()
            .map(|field| table(&format!("profile.{field}"), cfg.profile_buckets, cfg.profile_dim))
            .collect::<Result<_>>()?;
        Ok(Embedder {
            cfg: cfg.clone(),
            item_tables,
            tags,
            btype,
            scenario,
            time,
            query,
            no_query,
            profile,
        })
    }

    /// Resolves existing tables; fails if any feature is unregistered.
    pub fn bind(store: &ParameterStore, cfg: &EmbeddingConfig) -> Result<Self> {
        cfg.validate()?;
        let t = |name: &str| store.require(&format!("emb.{name}"));
        Ok(Embedder {
            cfg: cfg.clone(),
            item_tables: [t("item")?, t("brand")?, t("shop")?, t("category")?],
            tags: t("tags")?,
            btype: t("btype")?,
            scenario: t("scenario")?,
            time: t("time")?,
            query: t("query")?,
            no_query: t("no_query")?,
            profile: cfg.profile_fields.iter().map(|f| t(&format!("profile.{f}"))).collect::<Result<_>>()?,
        })
    }

    pub fn config(&self) -> &EmbeddingConfig {
        &self.cfg
    }

    /// Every table this embedder reads.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.item_tables.to_vec();
        v.extend([self.tags, self.btype, self.scenario, self.time, self.query, self.no_query]);
        v.extend(&self.profile);
        v
    }

    pub fn item_table_ids(&self) -> [ParamId; 5] {
        let [a, b, c, d] = self.item_tables;
        [a, b, c, d, self.tags]
    }

    pub fn property_table_ids(&self) -> [ParamId; 3] {
        [self.btype, self.scenario, self.time]
    }

    pub fn query_table_ids(&self) -> [ParamId; 2] {
        [self.query, self.no_query]
    }

    pub fn profile_table_ids(&self) -> &[ParamId] {
        &self.profile
    }

    pub fn prepare_item(&self, item: &ItemFeatures) -> ItemIds {
        self.prepare_item_fields(&item.item, &item.brand, &item.shop, &item.cat, &item.tags)
    }

    fn prepare_item_fields(&self, item: &str, brand: &str, shop: &str, cat: &str, tags: &[String]) -> ItemIds {
        let f = &self.cfg.item_features;
        ItemIds {
            rows: [
                hash_bucket(item, &f[0]) as u32,
                hash_bucket(brand, &f[1]) as u32,
                hash_bucket(shop, &f[2]) as u32,
                hash_bucket(cat, &f[3]) as u32,
            ],
            tags: tags.iter().map(|t| hash_bucket(t, &f[4]) as u32).collect(),
        }
    }

    pub fn prepare_behavior(&self, rec: &BehaviorRecord) -> BehaviorIds {
        BehaviorIds {
            item: self.prepare_item_fields(&rec.item, &rec.brand, &rec.shop, &rec.cat, &rec.tags),
            btype: rec.btype.index() as u8,
            scen: rec.scen.index() as u8,
            time: rec.tbucket.index() as u8,
        }
    }

    pub fn prepare_query(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| hash_bucket(t, &self.cfg.query) as u32).collect()
    }

    pub fn prepare_profile(&self, profile: &UserProfile) -> Vec<u32> {
        self.cfg
            .profile_fields
            .iter()
            .map(|f| hash_token(&format!("profile.{f}"), profile.get(f), self.cfg.profile_buckets) as u32)
            .collect()
    }

    /// Writes the item part `e` into `out` (length `item_dim`).
    pub fn item_into(&self, ids: &ItemIds, store: &ParameterStore, out: &mut [f64]) {
        let mut off = 0;
        for (k, &table) in self.item_tables.iter().enumerate() {
            let row = store.value(table).row(ids.item_row(k));
            out[off..off + row.len()].copy_from_slice(row);
            off += row.len();
        }
        let tags = store.value(self.tags);
        let dim = tags.cols();
        let dst = &mut out[off..off + dim];
        dst.fill(0.0);
        if !ids.tags.is_empty() {
            for &t in &ids.tags {
                for (d, v) in dst.iter_mut().zip(tags.row(t as usize)) {
                    *d += v;
                }
            }
            let k = ids.tags.len() as f64;
            dst.iter_mut().for_each(|d| *d /= k);
        }
    }

    pub fn property_into(&self, ids: &BehaviorIds, store: &ParameterStore, out: &mut [f64]) {
        let mut off = 0;
        for (table, row) in [(self.btype, ids.btype), (self.scenario, ids.scen), (self.time, ids.time)] {
            let r = store.value(table).row(row as usize);
            out[off..off + r.len()].copy_from_slice(r);
            off += r.len();
        }
    }

    pub fn embed_ids(&self, ids: &BehaviorIds, store: &ParameterStore) -> EmbeddedBehavior {
        let de = self.cfg.item_dim();
        let mut res = vec![0.0; self.cfg.behavior_dim()];
        self.item_into(&ids.item, store, &mut res[..de]);
        self.property_into(ids, store, &mut res[de..]);
        EmbeddedBehavior { res, item_dim: de }
    }

    pub fn embed_behavior(&self, rec: &BehaviorRecord, store: &ParameterStore) -> EmbeddedBehavior {
        self.embed_ids(&self.prepare_behavior(rec), store)
    }

    pub fn embed_item(&self, item: &ItemFeatures, store: &ParameterStore) -> Tensor {
        let mut out = vec![0.0; self.cfg.item_dim()];
        self.item_into(&self.prepare_item(item), store, &mut out);
        Tensor::from_parts(vec![out.len()], out)
    }

    /// Mean of token rows, or the learned no-query vector when empty.
    pub fn query_into(&self, tokens: &[u32], store: &ParameterStore, out: &mut [f64]) {
        if tokens.is_empty() {
            out.copy_from_slice(store.value(self.no_query).row(0));
            return;
        }
        out.fill(0.0);
        let table = store.value(self.query);
        for &t in tokens {
            for (o, v) in out.iter_mut().zip(table.row(t as usize)) {
                *o += v;
            }
        }
        let k = tokens.len() as f64;
        out.iter_mut().for_each(|o| *o /= k);
    }

    pub fn embed_query(&self, q: &QueryContext, store: &ParameterStore) -> Tensor {
        let mut out = vec![0.0; self.cfg.query_dim()];
        self.query_into(&self.prepare_query(&q.query_tokens), store, &mut out);
        Tensor::from_parts(vec![out.len()], out)
    }

    pub fn profile_into(&self, ids: &[u32], store: &ParameterStore, out: &mut [f64]) {
        let d = self.cfg.profile_dim;
        for (k, (&table, &row)) in self.profile.iter().zip(ids).enumerate() {
            out[k * d..(k + 1) * d].copy_from_slice(store.value(table).row(row as usize));
        }
    }

    pub fn embed_profile(&self, profile: &UserProfile, store: &ParameterStore) -> Tensor {
        let mut out = vec![0.0; self.cfg.profile_dim_total()];
        self.profile_into(&self.prepare_profile(profile), store, &mut out);
        Tensor::from_parts(vec![out.len()], out)
    }

    // ---- backward: scatter gradients into the referenced rows ----

    pub fn item_backward(&self, ids: &ItemIds, de: &[f64], grads: &mut GradBuffer) {
        let mut off = 0;
        for (k, &table) in self.item_tables.iter().enumerate() {
            let dim = self.cfg.item_features[k].embed_dim;
            let g = grads.row(table, ids.item_row(k));
            for (a, b) in g.iter_mut().zip(&de[off..off + dim]) {
                *a += b;
            }
            off += dim;
        }
        if !ids.tags.is_empty() {
            let dim = self.cfg.item_features[4].embed_dim;
            let k = ids.tags.len() as f64;
            for &t in &ids.tags {
                let g = grads.row(self.tags, t as usize);
                for (a, b) in g.iter_mut().zip(&de[off..off + dim]) {
                    *a += b / k;
                }
            }
        }
    }

    pub fn property_backward(&self, ids: &BehaviorIds, dp: &[f64], grads: &mut GradBuffer) {
        let mut off = 0;
        for (table, row, dim) in [
            (self.btype, ids.btype, self.cfg.btype_dim),
            (self.scenario, ids.scen, self.cfg.scenario_dim),
            (self.time, ids.time, self.cfg.time_dim),
        ] {
            let g = grads.row(table, row as usize);
            for (a, b) in g.iter_mut().zip(&dp[off..off + dim]) {
                *a += b;
            }
            off += dim;
        }
    }

    pub fn query_backward(&self, tokens: &[u32], dq: &[f64], grads: &mut GradBuffer) {
        if tokens.is_empty() {
            let g = grads.row(self.no_query, 0);
            for (a, b) in g.iter_mut().zip(dq) {
                *a += b;
            }
            return;
        }
        let k = tokens.len() as f64;
        for &t in tokens {
            let g = grads.row(self.query, t as usize);
            for (a, b) in g.iter_mut().zip(dq) {
                *a += b / k;
            }
        }
    }

    pub fn profile_backward(&self, ids: &[u32], du: &[f64], grads: &mut GradBuffer) {
        let d = self.cfg.profile_dim;
        for (k, (&table, &row)) in self.profile.iter().zip(ids).enumerate() {
            let g = grads.row(table, row as usize);
            for (a, b) in g.iter_mut().zip(&du[k * d..(k + 1) * d]) {
                *a += b;
            }
        }
    }
}

impl ItemIds {
    fn item_row(&self, k: usize) -> usize {
        self.rows[k] as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngState;
    use crate::record::Gap;
    use rand::Rng;

    fn item(id: &str, tags: &[&str]) -> ItemFeatures {
        ItemFeatures {
            item: id.into(),
            shop: "shop7".into(),
            brand: "brand3".into(),
            cat: "cat2".into(),
            tags: tags.iter().map(|t| t.to_string()).collect(),
        }
    }

    fn behavior(it: &ItemFeatures) -> BehaviorRecord {
        let tb = TimeBucket {
            gap: Gap::Day1,
            weekend: false,
            evening: true,
        };
        BehaviorRecord::new(it, BehaviorType::Purchase, Scenario::Recommend, tb)
    }

    fn setup() -> (ParameterStore, Embedder) {
        let mut store = ParameterStore::new();
        let emb = Embedder::register(&mut store, &EmbeddingConfig::default()).unwrap();
        store.init(&mut RngState::new(3));
        (store, emb)
    }

    #[test]
    fn hashing_is_deterministic_and_namespaced() {
        let a = FeatureSpec::one_hot("brand", 1 << 20, 4);
        let b = FeatureSpec::one_hot("shop", 1 << 20, 4);
        assert_eq!(hash_bucket("nike", &a), hash_bucket("nike", &a));
        assert_ne!(hash_bucket("nike", &a), hash_bucket("nike", &b));
        assert!(hash_bucket("x", &FeatureSpec::one_hot("x", 7, 1)) < 7);
    }

    #[test]
    fn hashing_fills_buckets_evenly() {
        let spec = FeatureSpec::one_hot("item", 1024, 1);
        let mut rng = RngState::new(17);
        let mut load = vec![0usize; 1024];
        for _ in 0..100_000 {
            let len = rng.random_range(4..16);
            let token: String = (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
            load[hash_bucket(&token, &spec)] += 1;
        }
        let (lo, hi) = (*load.iter().min().unwrap(), *load.iter().max().unwrap());
        assert!(lo > 0 && (hi as f64) / (lo as f64) < 2.0, "min {lo} max {hi}");
    }

    #[test]
    fn default_dims() {
        let cfg = EmbeddingConfig::default();
        assert_eq!(cfg.item_dim(), 31);
        assert_eq!(cfg.property_dim(), 12);
        assert_eq!(cfg.behavior_dim(), 43);
        assert_eq!(cfg.profile_dim_total(), 12);
        let (store, emb) = setup();
        let res = emb.embed_behavior(&behavior(&item("i1", &["a"])), &store);
        assert_eq!(res.res().len(), 43);
        assert_eq!(res.e().len(), 31);
        assert_eq!(res.p().len(), 12);
    }

    #[test]
    fn zero_tables_give_zero_vector() {
        let (mut store, emb) = setup();
        for id in emb.param_ids() {
            store.value_mut(id).fill(0.0);
        }
        let res = emb.embed_behavior(&behavior(&item("i1", &["a", "b"])), &store);
        assert!(res.res().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn duplicated_tag_keeps_mean() {
        let (store, emb) = setup();
        let one = emb.embed_item(&item("i", &["red"]), &store);
        let two = emb.embed_item(&item("i", &["red", "red"]), &store);
        assert_eq!(one, two);
    }

    #[test]
    fn candidate_shares_sequence_tables() {
        let (store, emb) = setup();
        let it = item("i42", &["t1", "t2"]);
        let seq = emb.embed_behavior(&behavior(&it), &store);
        let cand = emb.embed_item(&it, &store);
        assert_eq!(seq.e(), cand.data());
        assert_eq!(emb.prepare_item(&it), emb.prepare_behavior(&behavior(&it)).item);
    }

    #[test]
    fn empty_query_uses_sentinel() {
        let (store, emb) = setup();
        let q = emb.embed_query(&QueryContext::default(), &store);
        assert!(q.data().iter().any(|v| *v != 0.0));
        assert_eq!(q.data(), store.value(emb.query_table_ids()[1]).row(0));
    }

    #[test]
    fn unregistered_feature_is_config_error() {
        let store = ParameterStore::new();
        assert!(matches!(Embedder::bind(&store, &EmbeddingConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn item_gradient_matches_finite_differences() {
        // loss = c . e(item); check d loss / d rows of every referenced table.
        let (mut store, emb) = setup();
        let it = item("i9", &["a", "b", "c"]);
        let ids = emb.prepare_item(&it);
        let mut rng = RngState::new(5);
        let c: Vec<f64> = (0..31).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |s: &ParameterStore| {
            let mut e = vec![0.0; 31];
            emb.item_into(&ids, s, &mut e);
            e.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut grads = GradBuffer::for_store(&store);
        emb.item_backward(&ids, &c, &mut grads);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for table in emb.item_table_ids() {
            for i in 0..store.value(table).len() {
                let g = grads.get(table)[i];
                let orig = store.value(table).data()[i];
                store.value_mut(table).data_mut()[i] = orig + h;
                let lp = loss(&store);
                store.value_mut(table).data_mut()[i] = orig - h;
                let lm = loss(&store);
                store.value_mut(table).data_mut()[i] = orig;
                let num = (lp - lm) / (2.0 * h);
                if g != 0.0 || num != 0.0 {
                    worst = worst.max((g - num).abs() / g.abs().max(num.abs()));
                }
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }
}
