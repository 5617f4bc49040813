//! Synthetic behavior logs with planted user/item latents.
//!
//! Every task's label is driven by the same user latent `z_u` (plus a
//! per-category taste for CTR), and the behavior sequence is sampled from
//! that latent, so the sequence is the only window onto what the tasks share.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::io::{write_records, write_truth};
use super::{DatasetRecord, Payload};
use crate::error::{Error, Result};
use crate::heads::TaskKind;
use crate::numeric::ops::{sigmoid_scalar, softplus};
use crate::numeric::RngState;
use crate::record::{BehaviorRecord, BehaviorType, Gap, ItemFeatures, Scenario, TimeBucket, UserProfile};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorldConfig {
    /// Users whose records form the training split.
    pub users: usize,
    /// Held-out users for the evaluation split.
    pub eval_users: usize,
    pub items: usize,
    pub categories: usize,
    pub brands_per_category: usize,
    pub shops: usize,
    pub icons: usize,
    pub latent_dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Sharpness of item choice within a category.
    pub kappa: f64,
    /// Spread of the per-category taste.
    pub taste_sd: f64,
    /// Spread of the user latent shared across categories.
    pub latent_sd: f64,
    /// Spread of each user's per-category deviation from their latent.
    pub category_sd: f64,
    pub future_purchases: usize,
    pub price_classes: usize,
    pub ranking_features: usize,
    /// Evaluation records per task, as a fraction of the training count.
    pub eval_ratio: f64,
    /// Labels of each task use the latents of a different, randomly
    /// permuted user, so tasks share nothing with each other or with the
    /// observed sequence.
    pub shuffle_task_latents: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            users: 20_000,
            eval_users: 2_000,
            items: 3_000,
            categories: 8,
            brands_per_category: 8,
            shops: 240,
            icons: 200,
            latent_dim: 4,
            min_len: 5,
            max_len: 20,
            kappa: 2.0,
            taste_sd: 1.0,
            latent_sd: 0.5,
            category_sd: 1.0,
            future_purchases: 5,
            price_classes: 7,
            ranking_features: 8,
            eval_ratio: 0.1,
            shuffle_task_latents: false,
        }
    }
}

impl WorldConfig {
    /// A few hundred users; for tests.
    pub fn small() -> Self {
        WorldConfig {
            users: 300,
            eval_users: 100,
            items: 400,
            shops: 40,
            icons: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.items,
            self.categories,
            self.brands_per_category,
            self.shops,
            self.icons,
            self.latent_dim,
            self.min_len,
            self.future_purchases,
            self.price_classes,
            self.ranking_features,
        ];
        if pos.contains(&0) {
            return Err(Error::config("world sizes must be positive"));
        }
        if self.max_len < self.min_len {
            return Err(Error::config("world max_len < min_len"));
        }
        if self.items < self.categories || self.shops < self.categories {
            return Err(Error::config("need at least one item and shop per category"));
        }
        if !(self.taste_sd >= 0.0 && self.latent_sd >= 0.0 && self.category_sd >= 0.0) {
            return Err(Error::config("world spreads must be >= 0"));
        }
        if !(self.eval_ratio >= 0.0) {
            return Err(Error::config("eval_ratio must be >= 0"));
        }
        Ok(())
    }
}

/// Records to generate per task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TaskCounts {
    pub ctr: usize,
    pub l2r: usize,
    pub ppp: usize,
    pub fifp: usize,
    pub spp: usize,
}

impl TaskCounts {
    pub fn uniform(n: usize) -> Self {
        TaskCounts {
            ctr: n,
            l2r: n,
            ppp: n,
            fifp: n,
            spp: n,
        }
    }

    /// The four jointly trained tasks only.
    pub fn joint(n: usize) -> Self {
        TaskCounts { spp: 0, ..Self::uniform(n) }
    }

    pub fn get(&self, t: TaskKind) -> usize {
        match t {
            TaskKind::Ctr => self.ctr,
            TaskKind::L2r => self.l2r,
            TaskKind::Ppp => self.ppp,
            TaskKind::Fifp => self.fifp,
            TaskKind::Spp => self.spp,
        }
    }

    pub fn scaled(&self, r: f64) -> Self {
        let s = |n: usize| (n as f64 * r).round() as usize;
        TaskCounts {
            ctr: s(self.ctr),
            l2r: s(self.l2r),
            ppp: s(self.ppp),
            fifp: s(self.fifp),
            spp: s(self.spp),
        }
    }
}

/// Records plus the generator's planted value for each: the true
/// probability of a positive label for binary tasks, the most likely band
/// for PPP.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub truth: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn of_task(&self, t: TaskKind) -> Dataset {
        let (records, truth) = self
            .records
            .iter()
            .zip(&self.truth)
            .filter(|(r, _)| r.task == t)
            .map(|(r, &p)| (r.clone(), p))
            .unzip();
        Dataset { records, truth }
    }
}

#[derive(Clone, Debug)]
struct User {
    seq: Arc<Vec<BehaviorRecord>>,
    profile: UserProfile,
    cats: Vec<usize>,
}

/// Planted latents of every entity, regenerated exactly from the seed.
#[derive(Clone, Debug, Serialize)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub seed: u64,
    pub category_mu: Vec<Vec<f64>>,
    pub item_z: Vec<Vec<f64>>,
    pub item_cat: Vec<usize>,
    pub item_brand: Vec<usize>,
    pub item_shop: Vec<usize>,
    pub item_band: Vec<usize>,
    pub shop_z: Vec<Vec<f64>>,
    /// Icon loadings; nonzero only on the trait coordinates.
    pub icon_z: Vec<Vec<f64>>,
    pub icon_bias: Vec<f64>,
    /// Icon loadings on the category taste.
    pub icon_taste: Vec<f64>,
    /// `latent_dim x ranking_features` map from `z_u` to ranking weights.
    pub ranking_map: Vec<Vec<f64>>,
    /// Map from the category taste to ranking weights.
    pub ranking_taste: Vec<f64>,
    pub user_z: Vec<Vec<f64>>,
    pub user_taste: Vec<Vec<f64>>,
    /// Per user, `categories x latent_dim` deviations, row-major.
    pub user_dev: Vec<Vec<f64>>,
    /// Per task, the user whose latents drive each user's labels.
    pub label_user: Vec<Vec<usize>>,
    #[serde(skip)]
    items_by_cat: Vec<Vec<usize>>,
    #[serde(skip)]
    users: Vec<User>,
}

fn normal_vec(rng: &mut RngState, n: usize, sd: f64) -> Vec<f64> {
    let d = Normal::new(0.0, sd).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// General click propensity: the mean of the trait coordinates, scaled to
/// the spread of a single coordinate.
fn propensity(z: &[f64]) -> f64 {
    let t = TRAITS.min(z.len());
    z[..t].iter().sum::<f64>() / (t as f64).sqrt()
}

fn sample_weighted(rng: &mut RngState, w: &[f64]) -> usize {
    let total: f64 = w.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, v) in w.iter().enumerate() {
        x -= v;
        if x < 0.0 {
            return i;
        }
    }
    w.len() - 1
}

const CTR_TASTE: f64 = 1.5;
const CTR_KAPPA: f64 = 0.75;
const FIFP_KAPPA: f64 = 2.5;
const SPP_KAPPA: f64 = 1.5;
const L2R_LAMBDA: f64 = 1.5;
const CTR_PROPENSITY: f64 = 2.0;
const FIFP_PROPENSITY: f64 = 1.5;
const SPP_PROPENSITY: f64 = 1.5;
/// Weight of the category taste next to the latent traits in FIFP and L2R.
const TASTE_SCALE: f64 = 0.7;
const TASTE_PRICE: f64 = 1.0;
/// Spread of a user's purchases around their price level, in band units
/// scaled to [-1, 1].
const PPP_WIDTH: f64 = 0.35;
const TAGS: usize = 2;
/// Leading latent coordinates that drive FIFP and L2R.
const TRAITS: usize = 3;

impl SyntheticWorld {
    pub fn new(config: &WorldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let root = RngState::new(seed);
        let mut rng = root.fork(1);
        let d = cfg.latent_dim;
        let category_mu: Vec<Vec<f64>> = (0..cfg.categories).map(|_| normal_vec(&mut rng, d, 0.9)).collect();
        let shop_cat: Vec<usize> = (0..cfg.shops).map(|s| s % cfg.categories).collect();
        let shop_z = shop_cat
            .iter()
            .map(|&c| category_mu[c].iter().zip(normal_vec(&mut rng, d, 0.5)).map(|(m, e)| m + e).collect())
            .collect();
        let shops_by_cat: Vec<Vec<usize>> = (0..cfg.categories).map(|c| (0..cfg.shops).filter(|&s| shop_cat[s] == c).collect()).collect();
        let mut item_cat = Vec::with_capacity(cfg.items);
        let mut item_z = Vec::with_capacity(cfg.items);
        let mut item_brand = Vec::with_capacity(cfg.items);
        let mut item_shop = Vec::with_capacity(cfg.items);
        for v in 0..cfg.items {
            let c = v % cfg.categories;
            item_cat.push(c);
            item_z.push(category_mu[c].iter().zip(normal_vec(&mut rng, d, 0.5)).map(|(m, e)| m + e).collect::<Vec<_>>());
            item_brand.push(c * cfg.brands_per_category + rng.random_range(0..cfg.brands_per_category));
            item_shop.push(*shops_by_cat[c].choose(&mut rng).unwrap());
        }
        // Price band: quantile of the first latent coordinate within the
        // item's category, so no category is pricier than another.
        let mut item_band = vec![0; cfg.items];
        for c in 0..cfg.categories {
            let mut order: Vec<usize> = (c..cfg.items).step_by(cfg.categories).collect();
            order.sort_by(|&a, &b| item_z[a][0].total_cmp(&item_z[b][0]));
            for (rank, &v) in order.iter().enumerate() {
                item_band[v] = 1 + rank * cfg.price_classes / order.len();
            }
        }
        let t = TRAITS.min(d);
        let icon_z = (0..cfg.icons)
            .map(|_| {
                let mut f = normal_vec(&mut rng, t, 1.0);
                f.resize(d, 0.0);
                f
            })
            .collect();
        let icon_bias = normal_vec(&mut rng, cfg.icons, 0.5);
        let ranking_map = (0..d)
            .map(|i| if i < t { normal_vec(&mut rng, cfg.ranking_features, 1.0 / (t as f64).sqrt()) } else { vec![0.0; cfg.ranking_features] })
            .collect();
        let icon_taste = normal_vec(&mut rng, cfg.icons, 1.0);
        let ranking_taste = normal_vec(&mut rng, cfg.ranking_features, 1.0 / (t as f64).sqrt());
        let n_users = cfg.users + cfg.eval_users;
        let mut urng = root.fork(2);
        let user_z: Vec<Vec<f64>> = (0..n_users).map(|_| normal_vec(&mut urng, d, cfg.latent_sd)).collect();
        let user_taste: Vec<Vec<f64>> = (0..n_users).map(|_| normal_vec(&mut urng, cfg.categories, cfg.taste_sd)).collect();
        let user_dev: Vec<Vec<f64>> = (0..n_users).map(|_| normal_vec(&mut urng, cfg.categories * d, cfg.category_sd)).collect();
        let mut prng = root.fork(3);
        let label_user = TaskKind::ALL
            .iter()
            .map(|_| {
                let mut p: Vec<usize> = (0..n_users).collect();
                if cfg.shuffle_task_latents {
                    // Permute within each split so eval labels stay eval-only.
                    p[..cfg.users].shuffle(&mut prng);
                    p[cfg.users..].shuffle(&mut prng);
                }
                p
            })
            .collect();
        let items_by_cat = (0..cfg.categories).map(|c| (0..cfg.items).filter(|&v| item_cat[v] == c).collect()).collect();
        let mut world = SyntheticWorld {
            config: cfg,
            seed,
            category_mu,
            item_z,
            item_cat,
            item_brand,
            item_shop,
            item_band,
            shop_z,
            icon_z,
            icon_bias,
            icon_taste,
            ranking_map,
            ranking_taste,
            user_z,
            user_taste,
            user_dev,
            label_user,
            items_by_cat,
            users: Vec::new(),
        };
        world.users = (0..n_users).map(|u| world.make_user(u, &mut root.fork(1_000 + u as u64))).collect();
        Ok(world)
    }

    pub fn user_id(u: usize) -> String {
        format!("u{u}")
    }

    pub fn item_features(&self, v: usize) -> ItemFeatures {
        let z = &self.item_z[v];
        let mut coords: Vec<usize> = (0..z.len()).collect();
        coords.sort_by(|&a, &b| z[b].abs().total_cmp(&z[a].abs()));
        ItemFeatures {
            item: format!("i{v}"),
            shop: format!("s{}", self.item_shop[v]),
            brand: format!("b{}", self.item_brand[v]),
            cat: format!("c{}", self.item_cat[v]),
            tags: coords[..TAGS].iter().map(|&k| format!("t{k}{}", if z[k] > 0.0 { 'p' } else { 'n' })).collect(),
        }
    }

    pub fn category_query(c: usize) -> Vec<String> {
        vec![format!("c{c}")]
    }

    /// Observed behavior sequence of user `u`.
    pub fn sequence(&self, u: usize) -> &Arc<Vec<BehaviorRecord>> {
        &self.users[u].seq
    }

    /// Category of each position of user `u`'s sequence.
    pub fn sequence_categories(&self, u: usize) -> &[usize] {
        &self.users[u].cats
    }

    pub fn profile(&self, u: usize) -> &UserProfile {
        &self.users[u].profile
    }

    pub fn eval_user_range(&self) -> std::ops::Range<usize> {
        self.config.users..self.config.users + self.config.eval_users
    }

    fn category_weights(&self, u: usize) -> Vec<f64> {
        let z = &self.user_z[u];
        self.category_mu
            .iter()
            .zip(&self.user_taste[u])
            .map(|(mu, t)| (dot(z, mu) + t).exp())
            .collect()
    }

    /// Latent of user `u` while shopping in category `c`.
    pub fn user_latent(&self, u: usize, c: usize) -> Vec<f64> {
        let d = self.config.latent_dim;
        self.user_z[u].iter().zip(&self.user_dev[u][c * d..(c + 1) * d]).map(|(a, b)| a + b).collect()
    }

    /// Choice weights of user `u` over the items of category `c`: latent
    /// affinity, plus a pull toward pricier items the more the user likes
    /// the category.
    fn item_weights(&self, u: usize, c: usize) -> Vec<f64> {
        let z = &self.user_latent(u, c);
        let kappa = self.config.kappa;
        let half = (self.config.price_classes as f64 - 1.0) / 2.0;
        let pull = TASTE_PRICE * self.user_taste[u][c];
        self.items_by_cat[c]
            .iter()
            .map(|&v| (kappa * dot(z, &self.item_z[v]) + pull * (self.item_band[v] as f64 - 1.0 - half) / half.max(1.0)).exp())
            .collect()
    }

    /// Draws one behavior target of user `u`: (category, item).
    fn draw_item(&self, u: usize, cat_w: &[f64], item_w: &mut [Option<Vec<f64>>], rng: &mut RngState) -> (usize, usize) {
        let c = sample_weighted(rng, cat_w);
        let w = item_w[c].get_or_insert_with(|| self.item_weights(u, c));
        (c, self.items_by_cat[c][sample_weighted(rng, w)])
    }

    fn make_user(&self, u: usize, rng: &mut RngState) -> User {
        let cfg = &self.config;
        let cat_w = self.category_weights(u);
        let mut item_w = vec![None; cfg.categories];
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let z = &self.user_z[u];
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut seq = Vec::with_capacity(len);
        let mut cats = Vec::with_capacity(len);
        for j in 0..len {
            let (c, v) = self.draw_item(u, &cat_w, &mut item_w, rng);
            let s = self.user_taste[u][c] + 0.5 * dot(&self.user_latent(u, c), &self.item_z[v]);
            let btype_logits = [1.0, -0.5 + 0.5 * s, -0.5 + s, -1.5 + 1.5 * s];
            let btype = BehaviorType::ALL[sample_weighted(rng, &btype_logits.map(f64::exp))];
            let scen = Scenario::ALL[sample_weighted(rng, &[0.5, 0.35, 0.15])];
            let age = (len - 1 - j) as f64 * Gap::ALL.len() as f64 / len as f64 + noise.sample(rng);
            let gap = Gap::ALL[age.clamp(0.0, (Gap::ALL.len() - 1) as f64) as usize];
            let tb = TimeBucket {
                gap,
                weekend: rng.random_bool(2.0 / 7.0),
                evening: rng.random_bool(0.5),
            };
            seq.push(BehaviorRecord::new(&self.item_features(v), btype, scen, tb));
            cats.push(c);
        }
        let mut profile = UserProfile::default();
        let age = ["18-24", "25-29", "30-39", "40-49", "50+"][((z[1] / 0.5 + 2.5).clamp(0.0, 4.0)) as usize];
        let gender = if (z[2] > 0.0) != rng.random_bool(0.1) { "f" } else { "m" };
        let p = z[0] + noise.sample(rng);
        let power = if p < -0.2 {
            "low"
        } else if p < 0.2 {
            "mid"
        } else {
            "high"
        };
        for (field, value) in [("age", age), ("gender", gender), ("power", power)] {
            if !rng.random_bool(0.05) {
                profile = profile.with(field, value);
            }
        }
        User {
            seq: Arc::new(seq),
            profile,
            cats,
        }
    }

    /// Planted CTR probability for user `u`, query category `c`, item `v`.
    pub fn ctr_prob(&self, u: usize, c: usize, v: usize) -> f64 {
        let lu = self.label_user[TaskKind::Ctr.index()][u];
        let z = &self.user_latent(lu, c);
        sigmoid_scalar(CTR_TASTE * self.user_taste[lu][c] + CTR_KAPPA * dot(z, &self.item_z[v]) + CTR_PROPENSITY * propensity(z))
    }

    pub fn fifp_prob(&self, u: usize, c: usize, icon: usize) -> f64 {
        let lu = self.label_user[TaskKind::Fifp.index()][u];
        let taste = TASTE_SCALE * self.user_taste[lu][c] * self.icon_taste[icon];
        let z = &self.user_latent(lu, c);
        sigmoid_scalar(self.icon_bias[icon] + FIFP_KAPPA * (dot(z, &self.icon_z[icon]) + taste) + FIFP_PROPENSITY * propensity(z))
    }

    pub fn spp_prob(&self, u: usize, c: usize, shop: usize) -> f64 {
        let lu = self.label_user[TaskKind::Spp.index()][u];
        let z = &self.user_latent(lu, c);
        sigmoid_scalar(SPP_KAPPA * dot(z, &self.shop_z[shop]) + SPP_PROPENSITY * propensity(z))
    }

    /// Planted ranking weights `softplus(3 B^T z - 0.5)` under query
    /// category `c`.
    pub fn ranking_weights(&self, u: usize, c: usize) -> Vec<f64> {
        let lu = self.label_user[TaskKind::L2r.index()][u];
        let z = &self.user_latent(lu, c);
        (0..self.config.ranking_features)
            .map(|k| {
                let taste = TASTE_SCALE * self.user_taste[lu][c] * self.ranking_taste[k];
                softplus(3.0 * ((0..z.len()).map(|i| self.ranking_map[i][k] * z[i]).sum::<f64>() + taste) - 0.5)
            })
            .collect()
    }

    /// Per-purchase band distribution, within category `c`, of the user
    /// driving PPP labels: centred on the user's spending level, which
    /// rises with their general propensity and their taste for `c`.
    pub fn band_distribution(&self, u: usize, c: usize) -> Vec<f64> {
        let lu = self.label_user[TaskKind::Ppp.index()][u];
        let level = (propensity(&self.user_latent(lu, c)) + TASTE_SCALE * self.user_taste[lu][c]).tanh();
        let k = self.config.price_classes;
        let half = (k as f64 - 1.0) / 2.0;
        let w: Vec<f64> = (0..k)
            .map(|b| {
                let x = (b as f64 - half) / half.max(1.0);
                (-(x - level).powi(2) / (2.0 * PPP_WIDTH * PPP_WIDTH)).exp()
            })
            .collect();
        let total: f64 = w.iter().sum();
        w.iter().map(|v| v / total).collect()
    }

    /// Modal band of the user's next purchases in category `c`.
    fn future_band(&self, u: usize, c: usize, rng: &mut RngState) -> usize {
        let dist = self.band_distribution(u, c);
        let mut counts = vec![0usize; self.config.price_classes];
        for _ in 0..self.config.future_purchases {
            counts[sample_weighted(rng, &dist)] += 1;
        }
        // Ties go to the lowest band.
        let best = counts.iter().copied().max().unwrap();
        1 + counts.iter().position(|&c| c == best).unwrap()
    }

    fn record(&self, u: usize, task: TaskKind, rng: &mut RngState) -> (DatasetRecord, f64) {
        let cfg = &self.config;
        let user = &self.users[u];
        // Every record comes from a search session: mostly a category the
        // user has browsed before.
        let c = if rng.random_bool(0.8) {
            user.cats[rng.random_range(0..user.cats.len())]
        } else {
            rng.random_range(0..cfg.categories)
        };
        let query = Self::category_query(c);
        let mut weight = 1.0;
        let (payload, label, truth) = match task {
            TaskKind::Ctr => {
                let items = &self.items_by_cat[c];
                let v = items[rng.random_range(0..items.len())];
                let p = self.ctr_prob(u, c, v);
                (Payload::Item { item: self.item_features(v) }, f64::from(u8::from(rng.random_bool(p))), p)
            }
            TaskKind::L2r => {
                let w = self.ranking_weights(u, c);
                let r = normal_vec(rng, cfg.ranking_features, 1.0);
                let p = sigmoid_scalar(L2R_LAMBDA * dot(&w, &r));
                let y = if rng.random_bool(p) { 1.0 } else { -1.0 };
                weight = [1.0, 2.0, 5.0][sample_weighted(rng, &[0.7, 0.2, 0.1])];
                (Payload::Features { features: r }, y, p)
            }
            TaskKind::Ppp => {
                let dist = self.band_distribution(u, c);
                let best = 1 + crate::model::argmax(&dist);
                (Payload::Empty {}, self.future_band(u, c, rng) as f64, best as f64)
            }
            TaskKind::Fifp => {
                let i = rng.random_range(0..cfg.icons);
                let p = self.fifp_prob(u, c, i);
                (Payload::Icon { icon: format!("f{i}") }, f64::from(u8::from(rng.random_bool(p))), p)
            }
            TaskKind::Spp => {
                // A shop of the searched category; shop `s` sells category
                // `s % categories`.
                let s = c + cfg.categories * rng.random_range(0..(cfg.shops - c).div_ceil(cfg.categories));
                let p = self.spp_prob(u, c, s);
                (Payload::Shop { shop: format!("s{s}") }, f64::from(u8::from(rng.random_bool(p))), p)
            }
        };
        let rec = DatasetRecord {
            user: Self::user_id(u),
            profile: user.profile.clone(),
            seq: user.seq.clone(),
            query,
            task,
            payload,
            label,
            weight,
        };
        (rec, truth)
    }

    /// Records for users drawn uniformly from `users`, task by task in
    /// canonical order. `stream` separates independent draws (e.g. days).
    pub fn sample(&self, users: std::ops::Range<usize>, counts: TaskCounts, stream: u64) -> Dataset {
        let mut out = Dataset::default();
        if users.is_empty() {
            return out;
        }
        for task in TaskKind::ALL {
            let mut rng = RngState::new(self.seed).fork(stream.wrapping_mul(16) + task.index() as u64 + 10);
            for _ in 0..counts.get(task) {
                let u = rng.random_range(users.clone());
                let (r, t) = self.record(u, task, &mut rng);
                out.records.push(r);
                out.truth.push(t);
            }
        }
        out
    }
}

/// World plus its train and eval splits. Eval users never appear in train.
pub struct Generated {
    pub world: SyntheticWorld,
    pub train: Dataset,
    pub eval: Dataset,
}

/// Builds the world for `seed` and samples `counts` training records per
/// task (and `eval_ratio` times as many evaluation records).
pub fn generate(cfg: &WorldConfig, counts: TaskCounts, seed: u64) -> Generated {
    let world = SyntheticWorld::new(cfg, seed).expect("invalid world config");
    let train = world.sample(0..cfg.users, counts, 0);
    let eval = world.sample(world.eval_user_range(), counts.scaled(cfg.eval_ratio), 1);
    Generated { world, train, eval }
}

/// Writes `train.jsonl`, `eval.jsonl`, their truth tables and `world.json`.
pub fn write_dataset(dir: impl AsRef<Path>, g: &Generated) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_records(dir.join("train.jsonl"), &g.train.records)?;
    write_records(dir.join("eval.jsonl"), &g.eval.records)?;
    write_truth(dir.join("train.truth.tsv"), &g.train.truth)?;
    write_truth(dir.join("eval.truth.tsv"), &g.eval.truth)?;
    let world = serde_json::to_string(&g.world).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(dir.join("world.json"), world)?;
    Ok(())
}
