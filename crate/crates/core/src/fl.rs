//! Synchronous federated rounds: broadcast, uniform client selection, local
//! training from the broadcast model and example-weighted FedAvg.

use std::any::Any;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Dataset;
use crate::defense::{self, DefenseError, DetectionRecord, Jammer, Submission};
use crate::nn::{self, NetSpec, NnError, ParamVector, TrainConfig};

pub type ClientId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClientKind {
    Honest,
    Sender,
    Receiver,
}

impl ClientKind {
    pub fn name(&self) -> &'static str {
        match self {
            ClientKind::Honest => "honest",
            ClientKind::Sender => "sender",
            ClientKind::Receiver => "receiver",
        }
    }
}

#[derive(Debug, Error)]
pub enum FlError {
    #[error("nothing to aggregate")]
    EmptyAggregation,
    #[error("all aggregation weights are zero")]
    ZeroWeights,
    #[error("model length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("p_c must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("floor(p_c * pool) is zero (p_c = {p_c}, pool = {pool})")]
    NoSelection { p_c: f64, pool: usize },
    #[error("client id {0} already in the pool")]
    DuplicateId(ClientId),
    #[error("selected client {0} returned no model")]
    MissingUpdate(ClientId),
    #[error("pretraining requires an honest-only pool")]
    NotHonestOnly,
    #[error("client {id}: {source}")]
    Agent {
        id: ClientId,
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
}

/// What every client sees at the start of a round.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub round: usize,
    /// The broadcast copy of the global model (jammed if jamming is on).
    pub model: &'a ParamVector,
    pub spec: &'a NetSpec,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub model: ParamVector,
    pub example_count: usize,
}

/// A participant. `step` runs for every pool member every round, selected
/// or not, and must return an update exactly when selected.
pub trait FlClient {
    fn id(&self) -> ClientId;
    fn kind(&self) -> ClientKind;
    fn step(&mut self, ctx: &RoundContext<'_>) -> Result<Option<LocalUpdate>, FlError>;
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

/// SplitMix64 finalizer folded over `parts`; derives independent seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Trains on its shard from the broadcast model whenever selected.
#[derive(Debug, Clone)]
pub struct HonestClient {
    id: ClientId,
    train: Dataset,
    test: Dataset,
    cfg: TrainConfig,
    seed: u64,
}

impl HonestClient {
    pub fn new(id: ClientId, train: Dataset, test: Dataset, cfg: TrainConfig, seed: u64) -> Self {
        Self {
            id,
            train,
            test,
            cfg,
            seed,
        }
    }

    pub fn train_shard(&self) -> &Dataset {
        &self.train
    }

    pub fn test_shard(&self) -> &Dataset {
        &self.test
    }
}

impl FlClient for HonestClient {
    fn id(&self) -> ClientId {
        self.id
    }

    fn kind(&self) -> ClientKind {
        ClientKind::Honest
    }

    fn step(&mut self, ctx: &RoundContext<'_>) -> Result<Option<LocalUpdate>, FlError> {
        if !ctx.selected {
            return Ok(None);
        }
        let cfg = self.cfg.with_seed(mix_seed(&[self.seed, self.id as u64, ctx.round as u64]));
        let model = nn::train_local(ctx.model, ctx.spec, &self.train, &cfg)?;
        Ok(Some(LocalUpdate {
            model,
            example_count: self.train.len(),
        }))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// Example-weighted mean, computed as `x0 + Σ λ_i (x_i − x0)` so that
/// identical inputs come back bit-for-bit.
pub fn aggregate_fedavg(models: &[(&ParamVector, usize)]) -> Result<ParamVector, FlError> {
    let (first, _) = models.first().ok_or(FlError::EmptyAggregation)?;
    let total: usize = models.iter().map(|m| m.1).sum();
    if total == 0 {
        return Err(FlError::ZeroWeights);
    }
    let base = first.as_slice();
    let mut out = base.to_vec();
    for (m, count) in models {
        if m.len() != base.len() {
            return Err(FlError::LengthMismatch(base.len(), m.len()));
        }
        if *count == 0 {
            continue;
        }
        let w = *count as f64 / total as f64;
        for ((o, x), b) in out.iter_mut().zip(m.as_slice()).zip(base) {
            *o += w * (x - b);
        }
    }
    Ok(ParamVector::from_vec_unchecked(out))
}

/// FNV-1a over the bit patterns of every parameter.
pub fn snapshot_id(m: &ParamVector) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in m.as_slice() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[derive(Debug, Clone)]
pub struct RoundLog {
    pub round: usize,
    pub selected_ids: Vec<ClientId>,
    pub detection: Option<DetectionRecord>,
    /// Content hash of the global model produced by this round.
    pub snapshot_id: u64,
    pub wall_time: Duration,
}

pub struct FlSystem {
    global: ParamVector,
    spec: NetSpec,
    pool: Vec<Box<dyn FlClient>>,
    p_c: f64,
    round: usize,
    rng: ChaCha8Rng,
    jammer: Option<Jammer>,
    track_distances: bool,
}

impl FlSystem {
    pub fn new(spec: NetSpec, global: ParamVector, p_c: f64, selection_seed: u64) -> Result<Self, FlError> {
        if !(p_c > 0.0 && p_c <= 1.0) {
            return Err(FlError::BadFraction(p_c));
        }
        if global.len() != spec.param_count() {
            return Err(FlError::LengthMismatch(spec.param_count(), global.len()));
        }
        Ok(Self {
            global,
            spec,
            pool: Vec::new(),
            p_c,
            round: 0,
            rng: ChaCha8Rng::seed_from_u64(selection_seed),
            jammer: None,
            track_distances: false,
        })
    }

    /// Adds a client to the pool; it takes part from the next round on.
    pub fn join(&mut self, client: Box<dyn FlClient>) -> Result<(), FlError> {
        if self.pool.iter().any(|c| c.id() == client.id()) {
            return Err(FlError::DuplicateId(client.id()));
        }
        self.pool.push(client);
        self.pool.sort_by_key(|c| c.id());
        Ok(())
    }

    pub fn client_as_mut<T: 'static>(&mut self, id: ClientId) -> Option<&mut T> {
        self.pool
            .iter_mut()
            .find(|c| c.id() == id)
            .and_then(|c| c.as_any_mut().downcast_mut::<T>())
    }

    /// Continues the round numbering of an earlier system.
    pub fn set_round(&mut self, round: usize) {
        self.round = round;
    }

    pub fn reseed_selection(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn set_jammer(&mut self, jammer: Option<Jammer>) {
        self.jammer = jammer;
    }

    pub fn set_track_distances(&mut self, on: bool) {
        self.track_distances = on;
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    pub fn p_c(&self) -> f64 {
        self.p_c
    }

    pub fn clients(&self) -> impl Iterator<Item = &dyn FlClient> {
        self.pool.iter().map(|c| c.as_ref())
    }

    pub fn client(&self, id: ClientId) -> Option<&dyn FlClient> {
        self.clients().find(|c| c.id() == id)
    }

    /// Typed view of a pool member.
    pub fn client_as<T: 'static>(&self, id: ClientId) -> Option<&T> {
        self.client(id).and_then(|c| c.as_any().downcast_ref::<T>())
    }

    /// `⌊p_c · pool⌋`. The tiny slack absorbs products such as 0.7 · 10
    /// that land just below an integer.
    pub fn selection_count(&self) -> usize {
        ((self.p_c * self.pool.len() as f64) + 1e-9).floor() as usize
    }

    /// Draws `⌊p_c · pool⌋` distinct ids uniformly, returned in ascending order.
    pub fn select_clients(&mut self) -> Result<Vec<ClientId>, FlError> {
        let count = self.selection_count();
        if count == 0 {
            return Err(FlError::NoSelection {
                p_c: self.p_c,
                pool: self.pool.len(),
            });
        }
        let picked = rand::seq::index::sample(&mut self.rng, self.pool.len(), count);
        let mut ids: Vec<ClientId> = picked.iter().map(|i| self.pool[i].id()).collect();
        ids.sort_unstable();
        Ok(ids)
    }

    pub fn run_round(&mut self) -> Result<RoundLog, FlError> {
        let start = Instant::now();
        let broadcast = match self.jammer.as_mut() {
            Some(j) => j.apply(&self.global),
            None => self.global.clone(),
        };
        let selected = self.select_clients()?;
        let mut updates: Vec<(ClientId, ClientKind, LocalUpdate)> = Vec::with_capacity(selected.len());
        for client in self.pool.iter_mut() {
            let is_selected = selected.binary_search(&client.id()).is_ok();
            let ctx = RoundContext {
                round: self.round,
                model: &broadcast,
                spec: &self.spec,
                selected: is_selected,
            };
            let out = client.step(&ctx)?;
            match (is_selected, out) {
                (true, Some(u)) => {
                    if u.model.len() != broadcast.len() {
                        return Err(FlError::LengthMismatch(broadcast.len(), u.model.len()));
                    }
                    updates.push((client.id(), client.kind(), u));
                }
                (true, None) => return Err(FlError::MissingUpdate(client.id())),
                (false, _) => {}
            }
        }
        let detection = if self.track_distances && updates.len() >= 2 {
            let subs: Vec<Submission<'_>> = updates
                .iter()
                .map(|(id, kind, u)| Submission {
                    id: *id,
                    kind: *kind,
                    model: &u.model,
                })
                .collect();
            Some(defense::detect_outlier(self.round, &subs, &broadcast)?)
        } else {
            None
        };
        let weighted: Vec<(&ParamVector, usize)> = updates.iter().map(|(_, _, u)| (&u.model, u.example_count)).collect();
        self.global = aggregate_fedavg(&weighted)?;
        let log = RoundLog {
            round: self.round,
            selected_ids: selected,
            detection,
            snapshot_id: snapshot_id(&self.global),
            wall_time: start.elapsed(),
        };
        self.round += 1;
        Ok(log)
    }
}

/// Runs `rounds` rounds on an honest-only pool.
pub fn pretrain(system: &mut FlSystem, rounds: usize) -> Result<Vec<RoundLog>, FlError> {
    if system.clients().any(|c| c.kind() != ClientKind::Honest) {
        return Err(FlError::NotHonestOnly);
    }
    (0..rounds).map(|_| system.run_round()).collect()
}
