//! The covert channel. The Receiver calibrates by locating edge examples on
//! the decision boundary of the global model and by timing its own
//! selections. The Sender then encodes one bit per frame by poisoning its
//! local model so that the label of the edge example either changes across
//! the frame (1) or does not (0). The Receiver reads the label at the first
//! and last round of every frame.

use std::any::Any;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{self, DataError, Dataset, LabeledExample, TransformKind};
use crate::fl::{mix_seed, ClientId, ClientKind, FlClient, FlError, LocalUpdate, RoundContext};
use crate::metrics::FrameRecord;
use crate::nn::{self, NetSpec, NnError, ParamVector, TrainConfig};

/// Search interval `[H, L]` for the transformation parameter.
pub const DEFAULT_INTERVAL: (f64, f64) = (0.0, 0.5);
/// One feature position of a 28×28 image.
pub const DEFAULT_EPSILON: f64 = 1.0 / 784.0;

#[derive(Debug, Error)]
pub enum CovertError {
    #[error("labels at both ends of the interval cannot be equal (both {0})")]
    EndpointsEqual(usize),
    #[error("invalid search parameters: {0}")]
    BadSearch(String),
    #[error("selection stream ended after {seen} of {needed} selections")]
    FrameNotReached { seen: usize, needed: usize },
    #[error("frame size must be at least 2, got {0}")]
    FrameTooShort(usize),
    #[error("bit source exhausted on channel {0}")]
    BitsExhausted(usize),
    #[error("invalid bit pattern {0:?}")]
    BadPattern(String),
    #[error("channel {channel}: h and l must differ (both {label})")]
    SameLabels { channel: usize, label: usize },
    #[error("{0} channels configured but {1} bit streams given")]
    ChannelMismatch(usize, usize),
    #[error("poisoning needs at least one copy")]
    NoCopies,
    #[error("agent not configured")]
    NotConfigured,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl CovertError {
    fn into_fl(self, id: ClientId) -> FlError {
        FlError::Agent {
            id,
            source: Box::new(self),
        }
    }
}

/// A boundary input found by bisection, and the two labels it separates.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeExample {
    pub x: Vec<f64>,
    /// Label of `x`.
    pub h: usize,
    /// Label on the far side of the boundary.
    pub l: usize,
    /// α at which `x` was produced.
    pub alpha: f64,
    /// Smallest probed α carrying label `l`.
    pub alpha_far: f64,
    pub kind: TransformKind,
    pub iterations: usize,
    /// Some probe returned a label different from both endpoint labels.
    pub multi_class_boundary: bool,
    pub sources: Vec<usize>,
}

/// What Sender and Receiver agree on for one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    pub f: usize,
    pub edge: EdgeExample,
}

impl ChannelParams {
    pub fn new(f: usize, edge: EdgeExample) -> Result<Self, CovertError> {
        if f < 2 {
            return Err(CovertError::FrameTooShort(f));
        }
        if edge.h == edge.l {
            return Err(CovertError::SameLabels {
                channel: 0,
                label: edge.h,
            });
        }
        Ok(Self { f, edge })
    }
}

/// Bisects α over `interval` until the bracket is no wider than `eps`.
/// The lower end keeps the label first seen at `interval.0`.
pub fn edge_search(
    model: &ParamVector,
    spec: &NetSpec,
    kind: TransformKind,
    inputs: &[&[f64]],
    eps: f64,
    interval: (f64, f64),
) -> Result<EdgeExample, CovertError> {
    let (lo, hi) = interval;
    if !(eps > 0.0) || !(lo < hi) || lo < 0.0 || hi > 1.0 {
        return Err(CovertError::BadSearch(format!("eps = {eps}, interval = [{lo}, {hi}]")));
    }
    let label_at = |alpha: f64| -> Result<(Vec<f64>, usize), CovertError> {
        let x = data::transform(kind, inputs, alpha)?;
        let y = nn::predict_label(model, spec, &x)?;
        Ok((x, y))
    };
    let (mut a_high, mut a_low) = (lo, hi);
    let (mut x_high, y_high) = label_at(a_high)?;
    let (_, mut y_low) = label_at(a_low)?;
    if y_high == y_low {
        return Err(CovertError::EndpointsEqual(y_high));
    }
    let mut iterations = 0;
    let mut multi = false;
    while a_low - a_high > eps {
        let mid = (a_high + a_low) / 2.0;
        let (x_mid, y_mid) = label_at(mid)?;
        if y_mid != y_high && y_mid != y_low {
            multi = true;
        }
        if y_high != y_mid {
            a_low = mid;
            y_low = y_mid;
        } else {
            a_high = mid;
            x_high = x_mid;
        }
        iterations += 1;
    }
    Ok(EdgeExample {
        x: x_high,
        h: y_high,
        l: y_low,
        alpha: a_high,
        alpha_far: a_low,
        kind,
        iterations,
        multi_class_boundary: multi,
        sources: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairPolicy {
    /// Both examples carry the same true label.
    SameLabel,
    Any,
}

impl PairPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            PairPolicy::SameLabel => "same_label",
            PairPolicy::Any => "any",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "same_label" | "same" => Some(PairPolicy::SameLabel),
            "any" => Some(PairPolicy::Any),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Harvest {
    pub edges: Vec<EdgeExample>,
    pub pairs: usize,
    pub searches: usize,
}

impl Harvest {
    /// Edge examples per considered pair.
    pub fn yield_ratio(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            self.edges.len() as f64 / self.pairs as f64
        }
    }
}

/// Samples `pair_budget` random pairs and runs the bisection with every
/// transformation in `kinds` on each, keeping the successes.
pub fn harvest_edges(
    model: &ParamVector,
    spec: &NetSpec,
    dataset: &Dataset,
    kinds: &[TransformKind],
    pair_budget: usize,
    policy: PairPolicy,
    seed: u64,
) -> Result<Harvest, CovertError> {
    let mut harvest = Harvest {
        edges: Vec::new(),
        pairs: 0,
        searches: 0,
    };
    if pair_budget == 0 || dataset.len() < 2 {
        return Ok(harvest);
    }
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, ex) in dataset.iter().enumerate() {
        by_label[ex.label].push(i);
    }
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = 0;
    while harvest.pairs < pair_budget && draws < pair_budget * 20 {
        draws += 1;
        let i = rng.random_range(0..dataset.len());
        let pool = match policy {
            PairPolicy::SameLabel => &by_label[dataset.examples()[i].label],
            PairPolicy::Any => &all,
        };
        let j = *pool.choose(&mut rng).expect("pool holds i");
        if i == j {
            continue;
        }
        harvest.pairs += 1;
        let (a, b) = (&dataset.examples()[i].features, &dataset.examples()[j].features);
        for &kind in kinds {
            let inputs: Vec<&[f64]> = if kind.arity() == 1 { vec![a] } else { vec![a, b] };
            harvest.searches += 1;
            match edge_search(model, spec, kind, &inputs, DEFAULT_EPSILON, DEFAULT_INTERVAL) {
                Ok(mut edge) => {
                    edge.sources = if kind.arity() == 1 { vec![i] } else { vec![i, j] };
                    harvest.edges.push(edge);
                }
                Err(CovertError::EndpointsEqual(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(harvest)
}

/// Picks `k` edges, first those whose unordered `{h, l}` pair is new, then
/// any remaining ones. Returns the picks and how many share a label pair.
pub fn choose_channels(edges: &[EdgeExample], k: usize) -> (Vec<EdgeExample>, usize) {
    let key = |e: &EdgeExample| (e.h.min(e.l), e.h.max(e.l));
    let mut seen = Vec::new();
    let mut picked: Vec<usize> = Vec::new();
    for (i, e) in edges.iter().enumerate() {
        if picked.len() == k {
            break;
        }
        if !seen.contains(&key(e)) {
            seen.push(key(e));
            picked.push(i);
        }
    }
    let mut collisions = 0;
    for i in 0..edges.len() {
        if picked.len() == k {
            break;
        }
        if !picked.contains(&i) {
            picked.push(i);
            collisions += 1;
        }
    }
    (picked.into_iter().map(|i| edges[i].clone()).collect(), collisions)
}

/// 1-based round count at which the `t`-th selection happened.
pub fn estimate_frame(events: &[bool], t: usize) -> Result<usize, CovertError> {
    if t == 0 {
        return Err(CovertError::BadSearch("T must be positive".into()));
    }
    let mut seen = 0;
    for (i, &e) in events.iter().enumerate() {
        if e {
            seen += 1;
            if seen == t {
                return Ok(i + 1);
            }
        }
    }
    Err(CovertError::FrameNotReached { seen, needed: t })
}

/// `copies` replicas of `(x, target)`.
pub fn poison_dataset(x: &[f64], target: usize, copies: usize, num_classes: usize) -> Result<Dataset, CovertError> {
    if copies == 0 {
        return Err(CovertError::NoCopies);
    }
    let ex = LabeledExample {
        features: x.to_vec(),
        label: target,
        source_id: None,
    };
    Ok(Dataset::new(vec![ex; copies], x.len(), num_classes)?)
}

/// Expands a bit pattern to `n` bits. Strings of 0/1 repeat cyclically,
/// other strings are read as hexadecimal bytes (most significant bit first,
/// optional `0x`), and `auto` / `random` draws fair bits from `rng`.
pub fn expand_pattern<R: Rng + ?Sized>(pattern: &str, n: usize, rng: &mut R) -> Result<Vec<u8>, CovertError> {
    let p = pattern.trim();
    let lower = p.to_ascii_lowercase();
    if lower == "auto" || lower == "random" {
        return Ok((0..n).map(|_| rng.random_range(0..2u8)).collect());
    }
    let bad = || CovertError::BadPattern(pattern.to_string());
    let unit: Vec<u8> = if !lower.starts_with("0x") && !p.is_empty() && p.chars().all(|c| c == '0' || c == '1') {
        p.bytes().map(|c| c - b'0').collect()
    } else {
        let hex = lower.strip_prefix("0x").unwrap_or(&lower);
        if hex.is_empty() || hex.len() % 2 != 0 {
            return Err(bad());
        }
        let mut bits = Vec::with_capacity(hex.len() * 4);
        for i in (0..hex.len()).step_by(2) {
            let byte = u8::from_str_radix(&hex[i..i + 2], 16).map_err(|_| bad())?;
            bits.extend((0..8).rev().map(|s| (byte >> s) & 1));
        }
        bits
    };
    Ok(unit.iter().cycle().take(n).copied().collect())
}

/// Sender decision for one channel in one selected round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoisonAction {
    /// Upload the received model without poisoning.
    Hold,
    /// Train the edge example toward `target`.
    Train { target: usize },
}

/// Bit 0 keeps the label the frame started with, bit 1 moves it to the
/// other label; training happens only when the current label is wrong.
pub fn table2_action(bit: u8, v_r: usize, v: usize, v_not: usize) -> PoisonAction {
    let wanted = if bit == 0 { v } else { v_not };
    if v_r == wanted {
        PoisonAction::Hold
    } else {
        PoisonAction::Train { target: wanted }
    }
}

fn frame_position(round: usize, start: usize, f: usize) -> Option<usize> {
    (round >= start).then(|| (round - start) % f + 1)
}

#[derive(Debug, Clone)]
pub struct SenderConfig {
    pub train: TrainConfig,
    /// Total poisoned examples per training session, split across channels.
    pub copies: usize,
    /// Example count reported to the server.
    pub reported_count: usize,
    /// If set, stop poisoning before the local model drifts further than this.
    pub distance_cap: Option<f64>,
    pub seed: u64,
}

/// Per-channel Sender bookkeeping.
#[derive(Debug, Clone, Default)]
pub struct SenderState {
    /// Position `r ∈ 1..=f` of the current round within its frame.
    pub r: usize,
    pub bit: Vec<u8>,
    pub v: Vec<usize>,
    pub v_not: Vec<usize>,
    pub next_bit: usize,
}

/// Per-round Sender activity, kept for analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct SenderRound {
    pub round: usize,
    pub selected: bool,
    pub trained: bool,
}

pub struct SenderAgent {
    id: ClientId,
    channels: Vec<ChannelParams>,
    bits: Vec<Vec<u8>>,
    start_round: usize,
    cfg: SenderConfig,
    num_classes: usize,
    state: SenderState,
    history: Vec<SenderRound>,
}

impl SenderAgent {
    pub fn new(
        id: ClientId,
        channels: Vec<ChannelParams>,
        bits: Vec<Vec<u8>>,
        start_round: usize,
        cfg: SenderConfig,
        num_classes: usize,
    ) -> Result<Self, CovertError> {
        validate_channels(&channels)?;
        if channels.len() != bits.len() {
            return Err(CovertError::ChannelMismatch(channels.len(), bits.len()));
        }
        if cfg.copies == 0 {
            return Err(CovertError::NoCopies);
        }
        let k = channels.len();
        Ok(Self {
            id,
            channels,
            bits,
            start_round,
            cfg,
            num_classes,
            state: SenderState {
                r: 0,
                bit: vec![0; k],
                v: vec![0; k],
                v_not: vec![0; k],
                next_bit: 0,
            },
            history: Vec::new(),
        })
    }

    pub fn state(&self) -> &SenderState {
        &self.state
    }

    pub fn history(&self) -> &[SenderRound] {
        &self.history
    }

    pub fn sent_bits(&self, channel: usize) -> &[u8] {
        let n = self.state.next_bit.min(self.bits[channel].len());
        &self.bits[channel][..n]
    }

    fn act(&mut self, ctx: &RoundContext<'_>) -> Result<Option<LocalUpdate>, CovertError> {
        let Some(r) = frame_position(ctx.round, self.start_round, self.channels[0].f) else {
            return Ok(ctx.selected.then(|| self.untouched(ctx)));
        };
        self.state.r = r;
        if r == 1 {
            let idx = self.state.next_bit;
            for (c, ch) in self.channels.iter().enumerate() {
                let b = *self.bits[c].get(idx).ok_or(CovertError::BitsExhausted(c))?;
                let v = nn::predict_label(ctx.model, ctx.spec, &ch.edge.x)?;
                self.state.bit[c] = b;
                self.state.v[c] = v;
                self.state.v_not[c] = if v == ch.edge.h { ch.edge.l } else { ch.edge.h };
            }
            self.state.next_bit += 1;
        }
        if !ctx.selected {
            self.history.push(SenderRound {
                round: ctx.round,
                selected: false,
                trained: false,
            });
            return Ok(None);
        }
        let mut targets = Vec::new();
        for (c, ch) in self.channels.iter().enumerate() {
            let v_r = nn::predict_label(ctx.model, ctx.spec, &ch.edge.x)?;
            if let PoisonAction::Train { target } = table2_action(self.state.bit[c], v_r, self.state.v[c], self.state.v_not[c]) {
                targets.push((c, target));
            }
        }
        let update = if targets.is_empty() {
            self.untouched(ctx)
        } else {
            let per = (self.cfg.copies / targets.len()).max(1);
            let (c0, t0) = targets[0];
            let mut poison = poison_dataset(&self.channels[c0].edge.x, t0, per, self.num_classes)?;
            for &(c, t) in &targets[1..] {
                poison.extend(poison_dataset(&self.channels[c].edge.x, t, per, self.num_classes)?)?;
            }
            let cfg = self.cfg.train.with_seed(mix_seed(&[self.cfg.seed, ctx.round as u64]));
            let model = match self.cfg.distance_cap {
                Some(cap) => nn::train_local_capped(ctx.model, ctx.spec, &poison, &cfg, cap)?,
                None => nn::train_local(ctx.model, ctx.spec, &poison, &cfg)?,
            };
            LocalUpdate {
                model,
                example_count: self.cfg.reported_count,
            }
        };
        self.history.push(SenderRound {
            round: ctx.round,
            selected: true,
            trained: !targets.is_empty(),
        });
        Ok(Some(update))
    }

    fn untouched(&self, ctx: &RoundContext<'_>) -> LocalUpdate {
        LocalUpdate {
            model: ctx.model.clone(),
            example_count: self.cfg.reported_count,
        }
    }
}

impl FlClient for SenderAgent {
    fn id(&self) -> ClientId {
        self.id
    }

    fn kind(&self) -> ClientKind {
        ClientKind::Sender
    }

    fn step(&mut self, ctx: &RoundContext<'_>) -> Result<Option<LocalUpdate>, FlError> {
        self.act(ctx).map_err(|e| e.into_fl(self.id))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

fn validate_channels(channels: &[ChannelParams]) -> Result<(), CovertError> {
    let f = channels.first().map(|c| c.f).ok_or(CovertError::NotConfigured)?;
    for (i, ch) in channels.iter().enumerate() {
        if ch.f != f || ch.f < 2 {
            return Err(CovertError::FrameTooShort(ch.f));
        }
        if ch.edge.h == ch.edge.l {
            return Err(CovertError::SameLabels {
                channel: i,
                label: ch.edge.h,
            });
        }
    }
    Ok(())
}

/// One decoded frame on one channel, as observed by the Receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedFrame {
    pub frame_index: usize,
    pub round_first: usize,
    pub round_last: usize,
    pub v_first: usize,
    pub v_last: usize,
    pub decoded_bit: u8,
    pub score_h_first: f64,
    pub score_l_first: f64,
    pub score_h_last: f64,
    pub score_l_last: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ReceiverState {
    pub r: usize,
    /// Label and (h, l) scores at the first round of the open frame.
    pub open: Vec<Option<(usize, usize, f64, f64)>>,
    pub frames: Vec<Vec<ReceivedFrame>>,
}

impl ReceiverState {
    pub fn decoded_bits(&self, channel: usize) -> Vec<u8> {
        self.frames[channel].iter().map(|f| f.decoded_bit).collect()
    }
}

/// Observes every broadcast. Before transmission it only records whether it
/// was selected and keeps the latest model for calibration.
pub struct ReceiverAgent {
    id: ClientId,
    selection_events: Vec<bool>,
    last_model: Option<ParamVector>,
    channels: Vec<ChannelParams>,
    start_round: usize,
    state: ReceiverState,
}

impl ReceiverAgent {
    pub fn new(id: ClientId) -> Self {
        Self {
            id,
            selection_events: Vec::new(),
            last_model: None,
            channels: Vec::new(),
            start_round: usize::MAX,
            state: ReceiverState::default(),
        }
    }

    /// Starts decoding at `start_round`.
    pub fn configure(&mut self, channels: Vec<ChannelParams>, start_round: usize) -> Result<(), CovertError> {
        validate_channels(&channels)?;
        let k = channels.len();
        self.channels = channels;
        self.start_round = start_round;
        self.state = ReceiverState {
            r: 0,
            open: vec![None; k],
            frames: vec![Vec::new(); k],
        };
        Ok(())
    }

    pub fn selection_events(&self) -> &[bool] {
        &self.selection_events
    }

    pub fn last_model(&self) -> Option<&ParamVector> {
        self.last_model.as_ref()
    }

    pub fn state(&self) -> &ReceiverState {
        &self.state
    }

    fn observe(&mut self, ctx: &RoundContext<'_>) -> Result<(), CovertError> {
        self.selection_events.push(ctx.selected);
        self.last_model = Some(ctx.model.clone());
        let Some(f) = self.channels.first().map(|c| c.f) else {
            return Ok(());
        };
        let Some(r) = frame_position(ctx.round, self.start_round, f) else {
            return Ok(());
        };
        self.state.r = r;
        for (c, ch) in self.channels.iter().enumerate() {
            let scores = nn::forward(ctx.model, ctx.spec, &ch.edge.x)?;
            let v = scores.argmax();
            let (sh, sl) = (scores.0[ch.edge.h], scores.0[ch.edge.l]);
            if r == 1 {
                self.state.open[c] = Some((v, ctx.round, sh, sl));
            }
            if r == f {
                let (v_first, round_first, sh1, sl1) = self.state.open[c].take().ok_or(CovertError::NotConfigured)?;
                let frames = &mut self.state.frames[c];
                frames.push(ReceivedFrame {
                    frame_index: frames.len(),
                    round_first,
                    round_last: ctx.round,
                    v_first,
                    v_last: v,
                    decoded_bit: decode_bit(v_first, v),
                    score_h_first: sh1,
                    score_l_first: sl1,
                    score_h_last: sh,
                    score_l_last: sl,
                });
            }
        }
        Ok(())
    }
}

impl FlClient for ReceiverAgent {
    fn id(&self) -> ClientId {
        self.id
    }

    fn kind(&self) -> ClientKind {
        ClientKind::Receiver
    }

    /// When selected, hands back the broadcast model untouched with weight zero.
    fn step(&mut self, ctx: &RoundContext<'_>) -> Result<Option<LocalUpdate>, FlError> {
        self.observe(ctx).map_err(|e| e.into_fl(self.id))?;
        Ok(ctx.selected.then(|| LocalUpdate {
            model: ctx.model.clone(),
            example_count: 0,
        }))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// Differential Manchester decision: no change is 0, change is 1.
pub fn decode_bit(v_first: usize, v_last: usize) -> u8 {
    u8::from(v_first != v_last)
}

/// Joins decoded frames with the bits that were sent.
pub fn frame_records(frames: &[ReceivedFrame], sent: &[u8]) -> Vec<FrameRecord> {
    frames
        .iter()
        .zip(sent)
        .map(|(fr, &bit)| FrameRecord {
            frame_index: fr.frame_index,
            round_first: fr.round_first,
            round_last: fr.round_last,
            sent_bit: bit,
            decoded_bit: fr.decoded_bit,
            score_h_first: fr.score_h_first,
            score_l_first: fr.score_l_first,
            score_h_last: fr.score_h_last,
            score_l_last: fr.score_l_last,
        })
        .collect()
}
