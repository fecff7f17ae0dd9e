//! End-to-end runs: data preparation, honest pretraining, Receiver join and
//! calibration, Sender join and transmission.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ConfigError, DataSource, ExperimentConfig, FrameSize};
use super::report::{channel_summary, ChannelReport, ExperimentReport, HarvestSummary, Phase, RoundRow};
use super::Error;
use crate::covert::{self, ChannelParams, ReceiverAgent, SenderAgent, SenderConfig};
use crate::data::{self, Dataset};
use crate::defense::{self, AccuracyMonitor, Jammer};
use crate::fl::{mix_seed, ClientId, FlSystem, HonestClient, RoundLog};
use crate::nn::{self, NetSpec, ParamVector, TrainConfig};

/// Rounds the Receiver may wait for its selections before giving up.
const FRAME_ESTIMATION_LIMIT: usize = 100_000;

/// Client shards and the Receiver's calibration pool.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: NetSpec,
    pub train_shards: Vec<Dataset>,
    pub test_shards: Vec<Dataset>,
    /// Held-out examples the Receiver draws edge-search pairs from.
    pub calibration: Dataset,
}

impl Prepared {
    pub fn average_shard(&self) -> usize {
        let total: usize = self.train_shards.iter().map(Dataset::len).sum();
        (total / self.train_shards.len()).max(1)
    }
}

/// Global model and accuracy history at the end of honest pretraining.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub global: ParamVector,
    pub round: usize,
    pub trusted: ClientId,
    pub rows: Vec<RoundRow>,
}

pub fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        shuffle_seed: 0,
    }
}

/// Loads or generates the data, draws the train/test split and deals both
/// halves to the honest clients.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared, Error> {
    cfg.validate()?;
    let (n_train, n_test) = cfg.split_sizes();
    let full = match cfg.source() {
        DataSource::Idx { images, labels } => data::load_idx(images, labels)?,
        DataSource::Synthetic => {
            let d = cfg.synthetic_side * cfg.synthetic_side;
            data::make_synthetic(d, cfg.synthetic_classes, n_train + n_test, cfg.seeds.data)?
        }
    };
    if full.len() < n_train + n_test {
        return Err(ConfigError::OutOfRange {
            key: "train_size",
            reason: format!(
                "train_size + test_size = {} exceeds the {} available examples",
                n_train + n_test,
                full.len()
            ),
        }
        .into());
    }
    let order = data::shuffled_indices(full.len(), mix_seed(&[cfg.seeds.data, 0]));
    let train = full.subset(&order[..n_train]);
    let test = full.subset(&order[n_train..n_train + n_test]);
    let mut hidden = cfg.hidden.clone();
    hidden.retain(|&h| h > 0);
    let spec = NetSpec::mlp(full.dim(), &hidden, full.num_classes())?;
    Ok(Prepared {
        spec,
        train_shards: data::partition(&train, cfg.n_c, mix_seed(&[cfg.seeds.data, 1]))?,
        test_shards: data::partition(&test, cfg.n_c, mix_seed(&[cfg.seeds.data, 2]))?,
        calibration: test,
    })
}

fn honest_system(cfg: &ExperimentConfig, prep: &Prepared, global: ParamVector, selection_seed: u64) -> Result<FlSystem, Error> {
    let mut system = FlSystem::new(prep.spec.clone(), global, cfg.p_c, selection_seed)?;
    let train = train_config(cfg);
    for (id, (tr, te)) in prep.train_shards.iter().zip(&prep.test_shards).enumerate() {
        system.join(Box::new(HonestClient::new(id, tr.clone(), te.clone(), train, cfg.seeds.data)))?;
    }
    Ok(system)
}

fn monitor_for(prep: &Prepared, trusted: ClientId) -> Result<AccuracyMonitor, Error> {
    Ok(AccuracyMonitor::new(trusted, prep.test_shards[trusted].clone())?)
}

fn play_round(system: &mut FlSystem, monitor: &mut AccuracyMonitor, phase: Phase) -> Result<(RoundRow, RoundLog), Error> {
    let log = system.run_round()?;
    let acc = monitor.record(log.round, system.global(), system.spec())?;
    let row = RoundRow {
        round: log.round,
        phase,
        selected_ids: log.selected_ids.clone(),
        accuracy: acc,
        detection: log.detection.clone(),
        snapshot_id: log.snapshot_id,
    };
    Ok((row, log))
}

/// Honest-only rounds. Depends only on the data and init seeds.
pub fn pretrain_system(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Pretrained, Error> {
    let init = nn::init_model(&prep.spec, cfg.seeds.init);
    let mut system = honest_system(cfg, prep, init, mix_seed(&[cfg.seeds.init, 1]))?;
    let honest: Vec<ClientId> = (0..cfg.n_c).collect();
    let trusted = defense::choose_trusted(&honest, mix_seed(&[cfg.seeds.init, 2]))?;
    let mut monitor = monitor_for(prep, trusted)?;
    let mut rows = Vec::with_capacity(cfg.pretrain_rounds);
    for _ in 0..cfg.pretrain_rounds {
        rows.push(play_round(&mut system, &mut monitor, Phase::Pretrain)?.0);
    }
    Ok(Pretrained {
        global: system.global().clone(),
        round: system.round(),
        trusted,
        rows,
    })
}

/// Everything after pretraining: Receiver join, calibration, Sender join and
/// `n_b` frames of transmission on each of the `k` channels. With `k = 0`
/// the Receiver still joins but no Sender does.
pub fn run_attack(cfg: &ExperimentConfig, prep: &Prepared, pre: &Pretrained) -> Result<ExperimentReport, Error> {
    cfg.validate()?;
    let mut system = honest_system(cfg, prep, pre.global.clone(), cfg.seeds.selection)?;
    system.set_round(pre.round);
    if cfg.jam_sigma > 0.0 {
        system.set_jammer(Some(Jammer::new(cfg.jam_sigma, cfg.seeds.jam)?));
    }
    system.set_track_distances(cfg.detection);
    let mut monitor = monitor_for(prep, pre.trusted)?;
    let mut rows = pre.rows.clone();
    let mut checkpoints = Vec::new();
    let keep = |round: usize, system: &FlSystem, checkpoints: &mut Vec<(usize, ParamVector)>| {
        if cfg.checkpoint_every > 0 && (round + 1) % cfg.checkpoint_every == 0 {
            checkpoints.push((round, system.global().clone()));
        }
    };

    let receiver_id = cfg.n_c;
    let sender_id = cfg.n_c + 1;
    let join_round = system.round();
    system.join(Box::new(ReceiverAgent::new(receiver_id)))?;
    fn receiver(s: &FlSystem, id: ClientId) -> &ReceiverAgent {
        s.client_as::<ReceiverAgent>(id).expect("receiver joined")
    }

    let frame_size = match cfg.f {
        FrameSize::Fixed(f) => f,
        FrameSize::Auto => loop {
            if let Ok(f) = covert::estimate_frame(receiver(&system, receiver_id).selection_events(), cfg.t_select) {
                break f;
            }
            if system.round() - join_round >= FRAME_ESTIMATION_LIMIT {
                return Err(Error::FrameEstimation {
                    rounds: FRAME_ESTIMATION_LIMIT,
                });
            }
            let (row, log) = play_round(&mut system, &mut monitor, Phase::Calibration)?;
            keep(log.round, &system, &mut checkpoints);
            rows.push(row);
        },
    };
    if frame_size < 2 {
        return Err(covert::CovertError::FrameTooShort(frame_size).into());
    }

    let view = receiver(&system, receiver_id).last_model().cloned().unwrap_or_else(|| system.global().clone());
    let harvest = covert::harvest_edges(
        &view,
        &prep.spec,
        &prep.calibration,
        &cfg.edge_transforms,
        cfg.edge_pairs,
        cfg.effective_pair_policy(),
        mix_seed(&[cfg.seeds.bits, 1]),
    )?;
    if harvest.edges.len() < cfg.k {
        return Err(Error::Calibration {
            found: harvest.edges.len(),
            needed: cfg.k,
            pairs: harvest.pairs,
        });
    }
    let (edges, collisions) = covert::choose_channels(&harvest.edges, cfg.k);
    let harvest_summary = HarvestSummary {
        pairs: harvest.pairs,
        searches: harvest.searches,
        edges: harvest.edges.len(),
        label_collisions: collisions,
    };

    let mut bit_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seeds.bits, 2]));
    let bits: Vec<Vec<u8>> = (0..cfg.k)
        .map(|_| covert::expand_pattern(&cfg.w, cfg.n_b, &mut bit_rng))
        .collect::<Result<_, _>>()?;
    let channels: Vec<ChannelParams> = edges
        .iter()
        .map(|e| ChannelParams::new(frame_size, e.clone()))
        .collect::<Result<_, _>>()?;
    let start = system.round();
    if cfg.k > 0 {
        system
            .client_as_mut::<ReceiverAgent>(receiver_id)
            .expect("receiver joined")
            .configure(channels.clone(), start)?;
        let copies = cfg.poison_copies.unwrap_or_else(|| prep.average_shard());
        let sender = SenderAgent::new(
            sender_id,
            channels.clone(),
            bits.clone(),
            start,
            SenderConfig {
                train: train_config(cfg),
                copies,
                reported_count: prep.average_shard(),
                distance_cap: cfg.sender_dc_cap,
                seed: mix_seed(&[cfg.seeds.bits, 3]),
            },
            prep.spec.num_classes(),
        )?;
        system.join(Box::new(sender))?;
    }
    for _ in 0..cfg.n_b * frame_size {
        let (row, log) = play_round(&mut system, &mut monitor, Phase::Transmission)?;
        keep(log.round, &system, &mut checkpoints);
        rows.push(row);
    }

    let mut channel_reports = Vec::with_capacity(cfg.k);
    let (mut sender_selected, mut sender_trained) = (0, 0);
    if cfg.k > 0 {
        let sender = system.client_as::<SenderAgent>(sender_id).expect("sender joined");
        sender_selected = sender.history().iter().filter(|r| r.selected).count();
        sender_trained = sender.history().iter().filter(|r| r.trained).count();
        let state = receiver(&system, receiver_id).state();
        for (i, ch) in channels.iter().enumerate() {
            let frames = covert::frame_records(&state.frames[i], sender.sent_bits(i));
            channel_reports.push(ChannelReport {
                index: i,
                summary: channel_summary(&frames)?,
                edge: ch.edge.clone(),
                frames,
            });
        }
    }

    Ok(ExperimentReport {
        config: cfg.clone(),
        trusted_client: pre.trusted,
        join_round,
        transmission_start: start,
        frame_size,
        harvest: harvest_summary,
        channels: channel_reports,
        rows,
        sender_selected_rounds: sender_selected,
        sender_trained_rounds: sender_trained,
        checkpoints,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, Error> {
    let prep = prepare_data(cfg)?;
    let pre = pretrain_system(cfg, &prep)?;
    run_attack(cfg, &prep, &pre)
}

/// One run per axis value, other fields shared. Runs whose pretraining
/// inputs coincide reuse one pretrained model.
pub fn sweep(template: &ExperimentConfig, axis: &str, values: &[String]) -> Result<Vec<ExperimentReport>, Error> {
    template.get(axis)?;
    let mut prepared: HashMap<String, (Prepared, Pretrained)> = HashMap::new();
    let mut reports = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = template.clone();
        cfg.set(axis, value)?;
        cfg.validate()?;
        let key = cfg.pretrain_key();
        if !prepared.contains_key(&key) {
            let prep = prepare_data(&cfg)?;
            let pre = pretrain_system(&cfg, &prep)?;
            prepared.insert(key.clone(), (prep, pre));
        }
        let (prep, pre) = &prepared[&key];
        reports.push(run_attack(&cfg, prep, pre)?);
    }
    Ok(reports)
}
