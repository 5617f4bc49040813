//! Split inference: the user representation is computed once per request
//! (or taken from a cache) and the candidates are scored through the heads
//! only.
//!
//! The CTR head's first layer `W1 [rep; e] + b1` is evaluated in two parts:
//! the `rep` columns once per request, the item columns per candidate,
//! continuing the same running sum. This reproduces the monolithic forward
//! bit for bit.

use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticWorld;
use crate::embedding::BehaviorIds;
use crate::error::{Error, Result};
use crate::heads::{ppp_probs, Dropout};
use crate::model::{Dupn, ModelConfig, Prediction, Target};
use crate::numeric::ops::{sigmoid_scalar, softplus};
use crate::numeric::{Checkpoint, ParameterStore, RngState};
use crate::record::{BehaviorRecord, ItemFeatures, UserProfile};
use crate::trainer::load_model;

/// One item to score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub item: ItemFeatures,
    /// Ranking features, one per configured name.
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub user: String,
    #[serde(default)]
    pub profile: UserProfile,
    #[serde(default)]
    pub query: Vec<String>,
    pub seq: Vec<BehaviorRecord>,
    pub candidates: Vec<Candidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub user: String,
    /// Click probability per candidate, in request order.
    pub ctr: Vec<f64>,
    /// Ranking score `weight(rep)^T r` per candidate.
    pub l2r: Vec<f64>,
    /// Price-band distribution of the user.
    pub ppp: Vec<f64>,
    /// The sequence was longer than the encoder window and was cut.
    pub truncated: bool,
    pub cache_hit: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CacheConfig {
    pub capacity: usize,
    pub ttl: Duration,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            capacity: 10_000,
            ttl: Duration::from_secs(60),
        }
    }
}

/// Counter snapshot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Stats {
    pub requests: u64,
    pub score_calls: u64,
    pub encode_calls: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub hit_rate: f64,
    pub mean_latency_us: f64,
}

#[derive(Default)]
struct Counters {
    requests: AtomicU64,
    score_calls: AtomicU64,
    encode_calls: AtomicU64,
    cache_hits: AtomicU64,
    cache_misses: AtomicU64,
    latency_ns: AtomicU64,
}

impl Counters {
    fn reset(&self) {
        for c in [
            &self.requests,
            &self.score_calls,
            &self.encode_calls,
            &self.cache_hits,
            &self.cache_misses,
            &self.latency_ns,
        ] {
            c.store(0, Ordering::SeqCst);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct CacheKey {
    user: String,
    query: u64,
    profile: u64,
    seq: u64,
}

fn hash_of<T: Hash + ?Sized>(v: &T) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    v.hash(&mut h);
    h.finish()
}

/// Everything a request needs from the representation.
#[derive(Debug)]
struct UserState {
    /// CTR hidden pre-activations over the `rep` columns, without bias.
    ctr_partial: Vec<f64>,
    l2r_weights: Vec<f64>,
    ppp: Vec<f64>,
    truncated: bool,
}

struct Slot {
    state: Arc<UserState>,
    created: Instant,
    tick: u64,
}

/// LRU map with a time-to-live.
struct Cache {
    cfg: CacheConfig,
    generation: u64,
    tick: u64,
    map: HashMap<CacheKey, Slot>,
    order: BTreeMap<u64, CacheKey>,
}

impl Cache {
    fn new(cfg: CacheConfig) -> Self {
        Cache {
            cfg,
            generation: 0,
            tick: 0,
            map: HashMap::new(),
            order: BTreeMap::new(),
        }
    }

    fn clear(&mut self) {
        self.map.clear();
        self.order.clear();
    }

    fn get(&mut self, key: &CacheKey, now: Instant) -> Option<Arc<UserState>> {
        let slot = self.map.get_mut(key)?;
        if now.duration_since(slot.created) >= self.cfg.ttl {
            let tick = slot.tick;
            self.map.remove(key);
            self.order.remove(&tick);
            return None;
        }
        self.tick += 1;
        self.order.remove(&slot.tick);
        slot.tick = self.tick;
        self.order.insert(self.tick, key.clone());
        Some(slot.state.clone())
    }

    fn insert(&mut self, key: CacheKey, state: Arc<UserState>, now: Instant) {
        if self.cfg.capacity == 0 {
            return;
        }
        if let Some(old) = self.map.remove(&key) {
            self.order.remove(&old.tick);
        }
        while self.map.len() >= self.cfg.capacity {
            let Some((_, oldest)) = self.order.pop_first() else { break };
            self.map.remove(&oldest);
        }
        self.tick += 1;
        self.order.insert(self.tick, key.clone());
        self.map.insert(
            key,
            Slot {
                state,
                created: now,
                tick: self.tick,
            },
        );
    }
}

struct Snapshot {
    store: ParameterStore,
    model: Dupn,
    generation: u64,
}

/// Thread-safe scorer over a frozen parameter snapshot.
pub struct ServingEngine {
    model_cfg: ModelConfig,
    snapshot: RwLock<Arc<Snapshot>>,
    cache: Mutex<Cache>,
    counters: Counters,
}

impl ServingEngine {
    /// Binds `ckpt`; refuses a checkpoint of another architecture.
    pub fn new(model_cfg: &ModelConfig, ckpt: &Checkpoint, cache: CacheConfig) -> Result<Self> {
        let (store, model) = load_model(model_cfg, ckpt)?;
        Ok(ServingEngine {
            model_cfg: model_cfg.clone(),
            snapshot: RwLock::new(Arc::new(Snapshot {
                store,
                model,
                generation: 0,
            })),
            cache: Mutex::new(Cache::new(cache)),
            counters: Counters::default(),
        })
    }

    pub fn load(model_cfg: &ModelConfig, path: impl AsRef<Path>, cache: CacheConfig) -> Result<Self> {
        Self::new(model_cfg, &Checkpoint::load(path)?, cache)
    }

    /// Swaps in a new checkpoint, flushing the cache and the counters. On
    /// error the current snapshot stays in place.
    pub fn reload(&self, ckpt: &Checkpoint) -> Result<()> {
        let (store, model) = load_model(&self.model_cfg, ckpt)?;
        let mut snap = self.snapshot.write().expect("snapshot lock");
        let mut cache = self.cache.lock().expect("cache lock");
        cache.generation = snap.generation + 1;
        cache.clear();
        *snap = Arc::new(Snapshot {
            store,
            model,
            generation: cache.generation,
        });
        self.counters.reset();
        Ok(())
    }

    pub fn reload_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.reload(&Checkpoint::load(path)?)
    }

    fn current(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn stats(&self) -> Stats {
        let c = &self.counters;
        let get = |a: &AtomicU64| a.load(Ordering::SeqCst);
        let (hits, misses, requests) = (get(&c.cache_hits), get(&c.cache_misses), get(&c.requests));
        let lookups = hits + misses;
        Stats {
            requests,
            score_calls: get(&c.score_calls),
            encode_calls: get(&c.encode_calls),
            cache_hits: hits,
            cache_misses: misses,
            hit_rate: if lookups == 0 { 0.0 } else { hits as f64 / lookups as f64 },
            mean_latency_us: if requests == 0 {
                0.0
            } else {
                get(&c.latency_ns) as f64 / requests as f64 / 1e3
            },
        }
    }

    fn check(snap: &Snapshot, req: &ScoreRequest) -> Result<()> {
        if req.candidates.is_empty() {
            return Err(Error::Data("request has no candidates".into()));
        }
        let m = snap.model.heads.config().m();
        for (i, c) in req.candidates.iter().enumerate() {
            if c.features.len() != m {
                return Err(Error::Data(format!("candidate {i} has {} ranking features, expected {m}", c.features.len())));
            }
        }
        Ok(())
    }

    fn prepare_user(model: &Dupn, req: &ScoreRequest) -> (Vec<BehaviorIds>, bool, Vec<u32>, Vec<u32>) {
        let (seq, truncated) = model.truncate(&req.seq);
        let ids = seq.iter().map(|b| model.embedder.prepare_behavior(b)).collect();
        (
            ids,
            truncated,
            model.embedder.prepare_query(&req.query),
            model.embedder.prepare_profile(&req.profile),
        )
    }

    fn encode(&self, snap: &Snapshot, req: &ScoreRequest) -> Result<UserState> {
        self.counters.encode_calls.fetch_add(1, Ordering::Relaxed);
        let (model, store) = (&snap.model, &snap.store);
        let (seq, truncated, query, profile) = Self::prepare_user(model, req);
        let (rep, _) = model.represent(store, &seq, &query, &profile)?;
        let heads = &model.heads;
        let ctr = &heads.ctr;
        let w1 = store.value(ctr.w1).data();
        let rd = rep.len();
        let ctr_partial = w1
            .chunks_exact(ctr.input)
            .map(|row| {
                let mut acc = 0.0;
                for (a, b) in row[..rd].iter().zip(&rep) {
                    acc += a * b;
                }
                acc
            })
            .collect();
        let mut rng = RngState::new(0);
        let l2r = heads.l2r_forward(store, &rep, Dropout::OFF, &mut rng);
        Ok(UserState {
            ctr_partial,
            l2r_weights: l2r.out.iter().map(|&a| softplus(a)).collect(),
            ppp: ppp_probs(&heads.ppp.forward(store, &rep)),
            truncated,
        })
    }

    /// Split scoring with the representation cache.
    pub fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse> {
        let start = Instant::now();
        let snap = self.current();
        Self::check(&snap, req)?;
        let key = CacheKey {
            user: req.user.clone(),
            query: hash_of(&req.query),
            profile: hash_of(&req.profile),
            seq: hash_of(&req.seq[..]),
        };
        let cached = {
            let mut cache = self.cache.lock().expect("cache lock");
            if cache.generation == snap.generation {
                cache.get(&key, start)
            } else {
                None
            }
        };
        let cache_hit = cached.is_some();
        let state = match cached {
            Some(s) => {
                self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
                s
            }
            None => {
                self.counters.cache_misses.fetch_add(1, Ordering::Relaxed);
                let s = Arc::new(self.encode(&snap, req)?);
                let mut cache = self.cache.lock().expect("cache lock");
                if cache.generation == snap.generation {
                    cache.insert(key, s.clone(), Instant::now());
                }
                s
            }
        };
        let resp = Self::score_items(&snap, req, &state, cache_hit)?;
        self.counters.requests.fetch_add(1, Ordering::Relaxed);
        self.counters.score_calls.fetch_add(req.candidates.len() as u64, Ordering::Relaxed);
        self.counters.latency_ns.fetch_add(start.elapsed().as_nanos() as u64, Ordering::Relaxed);
        Ok(resp)
    }

    /// Head pass over all candidates: one item-embedding matrix times the
    /// item block of `W1`, then the output layer.
    fn score_items(snap: &Snapshot, req: &ScoreRequest, state: &UserState, cache_hit: bool) -> Result<ScoreResponse> {
        let (model, store) = (&snap.model, &snap.store);
        let ctr = &model.heads.ctr;
        let d = model.heads.item_dim();
        let rd = ctr.input - d;
        let n = req.candidates.len();
        let mut items = vec![0.0; n * d];
        for (c, row) in req.candidates.iter().zip(items.chunks_exact_mut(d)) {
            model.embedder.item_into(&model.embedder.prepare_item(&c.item), store, row);
        }
        let w1 = store.value(ctr.w1).data();
        let b1 = store.value(ctr.b1).data();
        let mut hidden = vec![0.0; n * ctr.width];
        for (e, h) in items.chunks_exact(d).zip(hidden.chunks_exact_mut(ctr.width)) {
            for (k, (hk, row)) in h.iter_mut().zip(w1.chunks_exact(ctr.input)).enumerate() {
                let mut acc = state.ctr_partial[k];
                for (a, b) in row[rd..].iter().zip(e) {
                    acc += a * b;
                }
                *hk = (b1[k] + acc).max(0.0);
            }
        }
        let mut ctr_scores = Vec::with_capacity(n);
        for h in hidden.chunks_exact(ctr.width) {
            ctr_scores.push(sigmoid_scalar(ctr.output_from_hidden(store, h)[0]));
        }
        let l2r = req
            .candidates
            .iter()
            .map(|c| state.l2r_weights.iter().zip(&c.features).map(|(a, b)| a * b).sum())
            .collect::<Vec<f64>>();
        let resp = ScoreResponse {
            user: req.user.clone(),
            ctr: ctr_scores,
            l2r,
            ppp: state.ppp.clone(),
            truncated: state.truncated,
            cache_hit,
        };
        if !resp.ctr.iter().chain(&resp.l2r).chain(&resp.ppp).all(|v| v.is_finite()) {
            return Err(Error::non_finite("serving scores"));
        }
        Ok(resp)
    }

    /// Reference path: the whole network runs once per candidate, with no
    /// cache and no counters.
    pub fn score_monolithic(&self, req: &ScoreRequest) -> Result<ScoreResponse> {
        let snap = self.current();
        Self::check(&snap, req)?;
        let (model, store) = (&snap.model, &snap.store);
        let (seq, truncated, query, profile) = Self::prepare_user(model, req);
        let mut ctr = Vec::new();
        let mut l2r = Vec::new();
        let mut ppp = Vec::new();
        for c in &req.candidates {
            let rep = model.trunk_forward(store, &seq, &query, &profile)?.encoder.rep;
            let item = model.embedder.prepare_item(&c.item);
            ctr.push(model.predict_from_rep(store, &rep, &Target::Ctr { item, label: 0.0 }).score());
            let t = Target::L2r {
                features: c.features.clone(),
                label: 1.0,
                weight: 1.0,
            };
            l2r.push(model.predict_from_rep(store, &rep, &t).score());
            if let Prediction::Classes(p) = model.predict_from_rep(store, &rep, &Target::Ppp { class: 0 }) {
                ppp = p;
            }
        }
        Ok(ScoreResponse {
            user: req.user.clone(),
            ctr,
            l2r,
            ppp,
            truncated,
            cache_hit: false,
        })
    }
}

/// `requests` requests for distinct evaluation users of `world`, each with
/// `candidates` random items and ranking features in `[0, 1)`.
pub fn synthetic_requests(world: &SyntheticWorld, requests: usize, candidates: usize, seed: u64) -> Vec<ScoreRequest> {
    let mut rng = RngState::new(seed);
    let users = world.eval_user_range();
    let m = world.config.ranking_features;
    (0..requests)
        .map(|i| {
            let u = users.start + i % users.len().max(1);
            let cats = world.sequence_categories(u);
            ScoreRequest {
                user: SyntheticWorld::user_id(u),
                profile: world.profile(u).clone(),
                query: SyntheticWorld::category_query(cats[rng.random_range(0..cats.len())]),
                seq: world.sequence(u).to_vec(),
                candidates: (0..candidates)
                    .map(|_| Candidate {
                        item: world.item_features(rng.random_range(0..world.config.items)),
                        features: (0..m).map(|_| rng.random::<f64>()).collect(),
                    })
                    .collect(),
            }
        })
        .collect()
}

/// Split against monolithic scoring over the same requests.
#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub requests: usize,
    pub items: usize,
    pub split_items_per_sec: f64,
    pub monolithic_items_per_sec: f64,
    pub speedup: f64,
    /// Largest difference between the two paths over every output.
    pub max_abs_diff: f64,
}

/// Times both paths; the split path starts from an empty cache, so each
/// distinct request pays one encode.
pub fn bench(engine: &ServingEngine, requests: &[ScoreRequest]) -> Result<BenchReport> {
    let items: usize = requests.iter().map(|r| r.candidates.len()).sum();
    let start = Instant::now();
    let split = requests.iter().map(|r| engine.score(r)).collect::<Result<Vec<_>>>()?;
    let split_secs = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let mono = requests.iter().map(|r| engine.score_monolithic(r)).collect::<Result<Vec<_>>>()?;
    let mono_secs = start.elapsed().as_secs_f64();
    let mut max_abs_diff = 0.0f64;
    for (a, b) in split.iter().zip(&mono) {
        for (x, y) in a.ctr.iter().chain(&a.l2r).chain(&a.ppp).zip(b.ctr.iter().chain(&b.l2r).chain(&b.ppp)) {
            max_abs_diff = max_abs_diff.max((x - y).abs());
        }
    }
    let split_rate = items as f64 / split_secs;
    let mono_rate = items as f64 / mono_secs;
    Ok(BenchReport {
        requests: requests.len(),
        items,
        split_items_per_sec: split_rate,
        monolithic_items_per_sec: mono_rate,
        speedup: split_rate / mono_rate,
        max_abs_diff,
    })
}

#[derive(Serialize)]
struct ErrorLine {
    error: String,
}

/// Answers one JSON request per input line with one JSON line; malformed
/// or failing requests get an `{"error": ...}` line. Returns the number of
/// requests answered.
pub fn serve_lines(engine: &ServingEngine, input: impl BufRead, mut output: impl Write) -> Result<usize> {
    let mut n = 0;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let result = serde_json::from_str::<ScoreRequest>(&line)
            .map_err(|e| Error::Data(format!("bad request: {e}")))
            .and_then(|req| engine.score(&req));
        let text = match result {
            Ok(resp) => serde_json::to_string(&resp),
            Err(e) => serde_json::to_string(&ErrorLine { error: e.to_string() }),
        }
        .map_err(|e| Error::Data(e.to_string()))?;
        output.write_all(text.as_bytes())?;
        output.write_all(b"\n")?;
        output.flush()?;
        n += 1;
    }
    Ok(n)
}

fn serve_connection(engine: &ServingEngine, stream: TcpStream) -> Result<usize> {
    let reader = BufReader::new(stream.try_clone()?);
    serve_lines(engine, reader, BufWriter::new(stream))
}

/// Serves the line protocol on `listener`, one thread per connection.
/// Stops after `max_connections` connections when given.
pub fn serve_tcp(engine: Arc<ServingEngine>, listener: TcpListener, max_connections: Option<usize>) -> Result<()> {
    let mut handles = Vec::new();
    for (i, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let engine = engine.clone();
        handles.push(std::thread::spawn(move || {
            if let Err(e) = serve_connection(&engine, stream) {
                log::warn!("connection closed: {e}");
            }
        }));
        if max_connections.is_some_and(|m| i + 1 >= m) {
            break;
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}
