//! Server-side countermeasures: trusted-client accuracy monitoring, L2
//! anomaly scoring of local models and Gaussian jamming of the broadcast.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::Dataset;
use crate::fl::{ClientId, ClientKind};
use crate::nn::{self, NetSpec, NnError, ParamVector};

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("anomaly detection needs at least two local models, got {0}")]
    TooFewModels(usize),
    #[error("trusted client {0} has an empty test shard")]
    EmptyShard(ClientId),
    #[error("no honest client to trust")]
    NoHonestClient,
    #[error("jamming sigma must be finite and non-negative, got {0}")]
    BadSigma(f64),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Outcome of scoring one round's local models against the global model.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub round: usize,
    /// `(client, d_c)` in ascending client order.
    pub distances: Vec<(ClientId, f64)>,
    pub outlier_id: ClientId,
    pub max_dc: f64,
    pub is_true_positive: bool,
}

/// One selected client's upload as seen by the detector.
#[derive(Debug, Clone, Copy)]
pub struct Submission<'a> {
    pub id: ClientId,
    pub kind: ClientKind,
    pub model: &'a ParamVector,
}

/// Tags the client whose model lies furthest from `global`; lowest id on ties.
pub fn detect_outlier(
    round: usize,
    submissions: &[Submission<'_>],
    global: &ParamVector,
) -> Result<DetectionRecord, DefenseError> {
    if submissions.len() < 2 {
        return Err(DefenseError::TooFewModels(submissions.len()));
    }
    let mut scored: Vec<(ClientId, ClientKind, f64)> = submissions
        .iter()
        .map(|s| Ok((s.id, s.kind, nn::param_distance(s.model, global)?)))
        .collect::<Result<_, NnError>>()?;
    scored.sort_by_key(|s| s.0);
    let mut best = 0;
    for (i, s) in scored.iter().enumerate().skip(1) {
        if s.2 > scored[best].2 {
            best = i;
        }
    }
    let (outlier_id, kind, max_dc) = scored[best];
    Ok(DetectionRecord {
        round,
        distances: scored.iter().map(|s| (s.0, s.2)).collect(),
        outlier_id,
        max_dc,
        is_true_positive: kind == ClientKind::Sender,
    })
}

/// True positives over all evaluated rounds; `None` when nothing was evaluated.
pub fn precision(records: &[DetectionRecord]) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    let tp = records.iter().filter(|r| r.is_true_positive).count();
    Some(tp as f64 / records.len() as f64)
}

/// `m` plus independent Gaussian(0, sigma) noise on every coordinate.
pub fn jam<R: Rng + ?Sized>(m: &ParamVector, sigma: f64, rng: &mut R) -> Result<ParamVector, DefenseError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(DefenseError::BadSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(m.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|_| DefenseError::BadSigma(sigma))?;
    let noisy = m.as_slice().iter().map(|v| v + normal.sample(rng)).collect();
    Ok(ParamVector::from_vec_unchecked(noisy))
}

/// Seeded jamming stream applied to each broadcast copy.
#[derive(Debug, Clone)]
pub struct Jammer {
    sigma: f64,
    rng: ChaCha8Rng,
}

impl Jammer {
    pub fn new(sigma: f64, seed: u64) -> Result<Self, DefenseError> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(DefenseError::BadSigma(sigma));
        }
        Ok(Self {
            sigma,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn apply(&mut self, m: &ParamVector) -> ParamVector {
        jam(m, self.sigma, &mut self.rng).expect("sigma validated at construction")
    }
}

/// Picks one of `honest` uniformly at random.
pub fn choose_trusted(honest: &[ClientId], seed: u64) -> Result<ClientId, DefenseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    honest.choose(&mut rng).copied().ok_or(DefenseError::NoHonestClient)
}

/// Accuracy of the global model on the trusted client's test shard, over time.
#[derive(Debug, Clone)]
pub struct AccuracyMonitor {
    trusted: ClientId,
    shard: Dataset,
    series: Vec<(usize, f64)>,
}

impl AccuracyMonitor {
    pub fn new(trusted: ClientId, shard: Dataset) -> Result<Self, DefenseError> {
        if shard.is_empty() {
            return Err(DefenseError::EmptyShard(trusted));
        }
        Ok(Self {
            trusted,
            shard,
            series: Vec::new(),
        })
    }

    pub fn trusted_id(&self) -> ClientId {
        self.trusted
    }

    pub fn measure(&self, model: &ParamVector, spec: &NetSpec) -> Result<f64, DefenseError> {
        Ok(nn::accuracy(model, spec, &self.shard)?)
    }

    /// Measures and appends `(round, accuracy)`.
    pub fn record(&mut self, round: usize, model: &ParamVector, spec: &NetSpec) -> Result<f64, DefenseError> {
        let acc = self.measure(model, spec)?;
        self.series.push((round, acc));
        Ok(acc)
    }

    pub fn series(&self) -> &[(usize, f64)] {
        &self.series
    }
}
