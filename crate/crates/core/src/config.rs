//! Run configuration: one flat `section.key = value` text file.
//!
//! Lines starting with `#` and blank lines are ignored. Every key has a
//! default; unknown keys are an error. Command-line overrides use the same
//! key names.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use crate::data::{TaskCounts, WorldConfig};
use crate::embedding::{FeatureKind, FeatureSpec};
use crate::error::{Error, Result};
use crate::experiments::{desk_model, desk_train, TransferMode};
use crate::model::ModelConfig;
use crate::serving::CacheConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct PathsConfig {
    /// Where `gen-data` writes and the other commands read the dataset.
    pub data_dir: PathBuf,
    /// Checkpoints, reports and exports.
    pub out_dir: PathBuf,
    /// Checkpoint `train` continues from; empty trains from scratch.
    pub init_checkpoint: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub world: WorldConfig,
    pub counts: TaskCounts,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServeConfig {
    pub cache: CacheConfig,
    /// `host:port` for the socket mode; empty serves standard input.
    pub addr: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferConfig {
    pub modes: Vec<TransferMode>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub probes: usize,
    /// Sequences written to the per-query weight dump.
    pub cases: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub candidates: usize,
    pub requests: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    /// Records per task the check runs over.
    pub records: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub serve: ServeConfig,
    pub transfer: TransferConfig,
    pub attention: AttentionConfig,
    pub bench: BenchConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: PathsConfig {
                data_dir: "run/data".into(),
                out_dir: "run/out".into(),
                init_checkpoint: String::new(),
            },
            data: DataConfig {
                world: WorldConfig::default(),
                counts: TaskCounts::uniform(20_000),
                seed: 1,
            },
            model: desk_model(),
            train: desk_train(1),
            serve: ServeConfig {
                cache: CacheConfig::default(),
                addr: String::new(),
            },
            transfer: TransferConfig {
                modes: TransferMode::ALL.to_vec(),
            },
            attention: AttentionConfig { probes: 1000, cases: 20 },
            bench: BenchConfig {
                candidates: 1000,
                requests: 20,
            },
            gradcheck: GradcheckConfig { records: 2, seed: 7 },
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| Error::config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_feature(key: &str, name: &str, v: &str) -> Result<FeatureSpec> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    let [kind, buckets, dim] = parts[..] else {
        return Err(Error::config(format!("{key}: expected kind,buckets,dim")));
    };
    let kind = match kind {
        "one" => FeatureKind::OneHot,
        "multi" => FeatureKind::MultiHot,
        _ => return Err(Error::config(format!("{key}: kind must be one or multi"))),
    };
    Ok(FeatureSpec {
        name: name.to_string(),
        kind,
        bucket_count: parse(key, buckets)?,
        embed_dim: parse(key, dim)?,
    })
}

fn show_feature(f: &FeatureSpec) -> String {
    let kind = if f.kind == FeatureKind::MultiHot { "multi" } else { "one" };
    format!("{kind},{},{}", f.bucket_count, f.embed_dim)
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let w = &mut self.data.world;
        let e = &mut self.model.embedding;
        let t = &mut self.train;
        match key {
            "paths.data_dir" => self.paths.data_dir = v.into(),
            "paths.out_dir" => self.paths.out_dir = v.into(),
            "paths.init_checkpoint" => self.paths.init_checkpoint = v.to_string(),
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.ctr" => self.data.counts.ctr = parse(key, v)?,
            "data.l2r" => self.data.counts.l2r = parse(key, v)?,
            "data.ppp" => self.data.counts.ppp = parse(key, v)?,
            "data.fifp" => self.data.counts.fifp = parse(key, v)?,
            "data.spp" => self.data.counts.spp = parse(key, v)?,
            "data.users" => w.users = parse(key, v)?,
            "data.eval_users" => w.eval_users = parse(key, v)?,
            "data.items" => w.items = parse(key, v)?,
            "data.categories" => w.categories = parse(key, v)?,
            "data.brands_per_category" => w.brands_per_category = parse(key, v)?,
            "data.shops" => w.shops = parse(key, v)?,
            "data.icons" => w.icons = parse(key, v)?,
            "data.latent_dim" => w.latent_dim = parse(key, v)?,
            "data.min_len" => w.min_len = parse(key, v)?,
            "data.max_len" => w.max_len = parse(key, v)?,
            "data.kappa" => w.kappa = parse(key, v)?,
            "data.taste_sd" => w.taste_sd = parse(key, v)?,
            "data.latent_sd" => w.latent_sd = parse(key, v)?,
            "data.category_sd" => w.category_sd = parse(key, v)?,
            "data.future_purchases" => w.future_purchases = parse(key, v)?,
            "data.price_classes" => w.price_classes = parse(key, v)?,
            "data.ranking_features" => w.ranking_features = parse(key, v)?,
            "data.eval_ratio" => w.eval_ratio = parse(key, v)?,
            "data.shuffle_task_latents" => w.shuffle_task_latents = parse(key, v)?,
            "property.btype.dim" => e.btype_dim = parse(key, v)?,
            "property.scenario.dim" => e.scenario_dim = parse(key, v)?,
            "property.time.dim" => e.time_dim = parse(key, v)?,
            "profile.fields" => e.profile_fields = parse_list(key, v)?,
            "profile.buckets" => e.profile_buckets = parse(key, v)?,
            "profile.dim" => e.profile_dim = parse(key, v)?,
            "encoder.d_h" => self.model.encoder.d_h = parse(key, v)?,
            "encoder.d_att" => self.model.encoder.d_att = parse(key, v)?,
            "encoder.max_len" => self.model.encoder.max_len = parse(key, v)?,
            "heads.width" => self.model.heads.width = parse(key, v)?,
            "heads.price_classes" => self.model.heads.price_classes = parse(key, v)?,
            "heads.ranking_features" => self.model.heads.ranking_features = parse_list(key, v)?,
            "train.learning_rate" => t.learning_rate = parse(key, v)?,
            "train.l2" => t.l2 = parse(key, v)?,
            "train.keep_prob" => t.keep_prob = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.tasks" => t.tasks = parse_list(key, v)?,
            "train.weights" => t.weights = parse_list(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "train.shuffle_window" => t.shuffle_window = parse(key, v)?,
            "train.workers" => t.workers = parse(key, v)?,
            "train.eval_every" => t.eval_every = parse(key, v)?,
            "serve.cache_capacity" => self.serve.cache.capacity = parse(key, v)?,
            "serve.cache_ttl_secs" => self.serve.cache.ttl = Duration::from_secs_f64(parse(key, v)?),
            "serve.addr" => self.serve.addr = v.to_string(),
            "transfer.modes" => self.transfer.modes = parse_list(key, v)?,
            "attention.probes" => self.attention.probes = parse(key, v)?,
            "attention.cases" => self.attention.cases = parse(key, v)?,
            "bench.candidates" => self.bench.candidates = parse(key, v)?,
            "bench.requests" => self.bench.requests = parse(key, v)?,
            "gradcheck.records" => self.gradcheck.records = parse(key, v)?,
            "gradcheck.seed" => self.gradcheck.seed = parse(key, v)?,
            _ => return self.set_feature(key, v),
        }
        Ok(())
    }

    fn set_feature(&mut self, key: &str, v: &str) -> Result<()> {
        let unknown = || Error::config(format!("unknown key {key:?}"));
        let name = key.strip_prefix("feature.").ok_or_else(unknown)?;
        let m = &mut self.model;
        let slot = m
            .embedding
            .item_features
            .iter_mut()
            .chain([&mut m.embedding.query, &mut m.heads.icon, &mut m.heads.shop])
            .find(|f| f.name == name)
            .ok_or_else(unknown)?;
        *slot = parse_feature(key, name, v)?;
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        let (w, c, e, t) = (&self.data.world, &self.data.counts, &self.model.embedding, &self.train);
        put("paths.data_dir", self.paths.data_dir.display().to_string());
        put("paths.out_dir", self.paths.out_dir.display().to_string());
        put("paths.init_checkpoint", self.paths.init_checkpoint.clone());
        put("data.seed", self.data.seed.to_string());
        put("data.ctr", c.ctr.to_string());
        put("data.l2r", c.l2r.to_string());
        put("data.ppp", c.ppp.to_string());
        put("data.fifp", c.fifp.to_string());
        put("data.spp", c.spp.to_string());
        put("data.users", w.users.to_string());
        put("data.eval_users", w.eval_users.to_string());
        put("data.items", w.items.to_string());
        put("data.categories", w.categories.to_string());
        put("data.brands_per_category", w.brands_per_category.to_string());
        put("data.shops", w.shops.to_string());
        put("data.icons", w.icons.to_string());
        put("data.latent_dim", w.latent_dim.to_string());
        put("data.min_len", w.min_len.to_string());
        put("data.max_len", w.max_len.to_string());
        put("data.kappa", w.kappa.to_string());
        put("data.taste_sd", w.taste_sd.to_string());
        put("data.latent_sd", w.latent_sd.to_string());
        put("data.category_sd", w.category_sd.to_string());
        put("data.future_purchases", w.future_purchases.to_string());
        put("data.price_classes", w.price_classes.to_string());
        put("data.ranking_features", w.ranking_features.to_string());
        put("data.eval_ratio", w.eval_ratio.to_string());
        put("data.shuffle_task_latents", w.shuffle_task_latents.to_string());
        for f in e.item_features.iter().chain([&e.query, &self.model.heads.icon, &self.model.heads.shop]) {
            put(&format!("feature.{}", f.name), show_feature(f));
        }
        put("property.btype.dim", e.btype_dim.to_string());
        put("property.scenario.dim", e.scenario_dim.to_string());
        put("property.time.dim", e.time_dim.to_string());
        put("profile.fields", e.profile_fields.join(","));
        put("profile.buckets", e.profile_buckets.to_string());
        put("profile.dim", e.profile_dim.to_string());
        put("encoder.d_h", self.model.encoder.d_h.to_string());
        put("encoder.d_att", self.model.encoder.d_att.to_string());
        put("encoder.max_len", self.model.encoder.max_len.to_string());
        put("heads.width", self.model.heads.width.to_string());
        put("heads.price_classes", self.model.heads.price_classes.to_string());
        put("heads.ranking_features", self.model.heads.ranking_features.join(","));
        put("train.learning_rate", t.learning_rate.to_string());
        put("train.l2", t.l2.to_string());
        put("train.keep_prob", t.keep_prob.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.tasks", join(&t.tasks));
        put("train.weights", join(&t.weights));
        put("train.epochs", t.epochs.to_string());
        put("train.seed", t.seed.to_string());
        put("train.clip_norm", t.clip_norm.to_string());
        put("train.shuffle_window", t.shuffle_window.to_string());
        put("train.workers", t.workers.to_string());
        put("train.eval_every", t.eval_every.to_string());
        put("serve.cache_capacity", self.serve.cache.capacity.to_string());
        put("serve.cache_ttl_secs", self.serve.cache.ttl.as_secs_f64().to_string());
        put("serve.addr", self.serve.addr.clone());
        put("transfer.modes", join(&self.transfer.modes));
        put("attention.probes", self.attention.probes.to_string());
        put("attention.cases", self.attention.cases.to_string());
        put("bench.candidates", self.bench.candidates.to_string());
        put("bench.requests", self.bench.requests.to_string());
        put("gradcheck.records", self.gradcheck.records.to_string());
        put("gradcheck.seed", self.gradcheck.seed.to_string());
        out
    }

    /// Config file text that parses back to `self`.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses config text over the defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v).map_err(|e| Error::config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.data.world.ranking_features != self.model.heads.m() {
            return Err(Error::config("data.ranking_features must match heads.ranking_features"));
        }
        if self.data.world.price_classes != self.model.heads.price_classes {
            return Err(Error::config("data.price_classes must match heads.price_classes"));
        }
        Ok(())
    }

    /// Architecture fingerprint stored in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        self.model.fingerprint()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("encoder.d_h", "8").unwrap();
        cfg.set("feature.tags", "multi,128,5").unwrap();
        cfg.set("train.tasks", "ctr,ppp").unwrap();
        cfg.set("train.weights", "1,2").unwrap();
        let back = RunConfig::parse_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse_text("train.lr = 0.1").is_err());
        assert!(RunConfig::parse_text("feature.color = one,8,2").is_err());
        assert!(RunConfig::parse_text("encoder.d_h 8").is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_overrides(&["nope=1"]).is_err());
    }

    #[test]
    fn comments_and_overrides() {
        let mut cfg = RunConfig::parse_text("# comment\n\nencoder.d_h = 12\n").unwrap();
        assert_eq!(cfg.model.encoder.d_h, 12);
        cfg.apply_overrides(&["encoder.d_h=20", "serve.cache_ttl_secs=1.5"]).unwrap();
        assert_eq!(cfg.model.encoder.d_h, 20);
        assert_eq!(cfg.serve.cache.ttl, Duration::from_millis(1500));
    }

    #[test]
    fn fingerprint_ignores_non_architecture_keys() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.set("train.learning_rate", "0.5").unwrap();
        b.set("paths.out_dir", "/elsewhere").unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.set("heads.width", "7").unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let mut c = RunConfig::default();
        c.set("data.ranking_features", "3").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = RunConfig::parse_text("train.epochs = many").unwrap_err().to_string();
        assert!(err.contains("train.epochs"), "{err}");
    }
}
