//! Experiment reports and their on-disk form.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::Error;
use crate::covert::EdgeExample;
use crate::defense::{self, DetectionRecord};
use crate::fl::ClientId;
use crate::metrics::{self, Capacity, ChannelErrorModel, FrameRecord, MetricsError, Normalization, Snr};
use crate::nn::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Calibration,
    Transmission,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Calibration => "calibration",
            Phase::Transmission => "transmission",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRow {
    pub round: usize,
    pub phase: Phase,
    pub selected_ids: Vec<ClientId>,
    /// Trusted-client accuracy of the global model produced by this round.
    pub accuracy: f64,
    pub detection: Option<DetectionRecord>,
    pub snapshot_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarvestSummary {
    pub pairs: usize,
    pub searches: usize,
    pub edges: usize,
    /// Chosen channels sharing an `{h, l}` pair with an earlier channel.
    pub label_collisions: usize,
}

impl HarvestSummary {
    pub fn yield_ratio(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            self.edges as f64 / self.pairs as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSummary {
    pub bits: usize,
    pub ber: f64,
    /// `None` when the trace is too short or carries no score at all.
    pub snr: Option<Snr>,
    pub error_model: ChannelErrorModel,
    pub capacity: Capacity,
}

/// BER, SNR, crossover estimates and capacity from a frame log alone.
pub fn channel_summary(frames: &[FrameRecord]) -> Result<ChannelSummary, MetricsError> {
    let sent: Vec<u8> = frames.iter().map(|f| f.sent_bit).collect();
    let got: Vec<u8> = frames.iter().map(|f| f.decoded_bit).collect();
    let ber = metrics::ber(&sent, &got)?;
    let error_model = metrics::estimate_error_model(&sent, &got)?;
    let capacity = metrics::bmc_capacity(error_model.p1, error_model.p2)?;
    let snr = match metrics::signal_trace(frames, Normalization::Auto) {
        Ok(trace) => match metrics::snr(&trace) {
            Ok(s) => Some(s),
            Err(MetricsError::TooShort(_)) => None,
            Err(e) => return Err(e),
        },
        Err(MetricsError::ZeroBound) => None,
        Err(e) => return Err(e),
    };
    Ok(ChannelSummary {
        bits: frames.len(),
        ber,
        snr,
        error_model,
        capacity,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelReport {
    pub index: usize,
    pub edge: EdgeExample,
    pub frames: Vec<FrameRecord>,
    pub summary: ChannelSummary,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub trusted_client: ClientId,
    pub join_round: usize,
    pub transmission_start: usize,
    pub frame_size: usize,
    pub harvest: HarvestSummary,
    pub channels: Vec<ChannelReport>,
    pub rows: Vec<RoundRow>,
    pub sender_selected_rounds: usize,
    pub sender_trained_rounds: usize,
    pub checkpoints: Vec<(usize, ParamVector)>,
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(|| "na".into(), num)
}

fn snr_text(s: Option<Snr>) -> String {
    s.map_or_else(|| "na".into(), |s| s.to_string())
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl ExperimentReport {
    pub fn accuracy_series(&self) -> Vec<(usize, f64)> {
        self.rows.iter().map(|r| (r.round, r.accuracy)).collect()
    }

    /// Rounds from the Receiver's join onward.
    pub fn post_join_rows(&self) -> impl Iterator<Item = &RoundRow> {
        self.rows.iter().filter(|r| r.phase != Phase::Pretrain)
    }

    pub fn mean_post_join_accuracy(&self) -> Option<f64> {
        mean(self.post_join_rows().map(|r| r.accuracy))
    }

    pub fn pretrain_final_accuracy(&self) -> Option<f64> {
        self.rows.iter().filter(|r| r.phase == Phase::Pretrain).last().map(|r| r.accuracy)
    }

    /// Detection records of the transmission rounds, in round order.
    pub fn detections(&self) -> Vec<&DetectionRecord> {
        self.rows
            .iter()
            .filter(|r| r.phase == Phase::Transmission)
            .filter_map(|r| r.detection.as_ref())
            .collect()
    }

    /// Share of transmission rounds in which the Sender was the outlier.
    pub fn precision(&self) -> Option<f64> {
        let recs: Vec<DetectionRecord> = self.detections().into_iter().cloned().collect();
        defense::precision(&recs)
    }

    pub fn sent_bits(&self) -> Vec<u8> {
        self.channels.iter().flat_map(|c| c.frames.iter().map(|f| f.sent_bit)).collect()
    }

    pub fn decoded_bits(&self) -> Vec<u8> {
        self.channels.iter().flat_map(|c| c.frames.iter().map(|f| f.decoded_bit)).collect()
    }

    /// BER over all channels' bits taken together.
    pub fn pooled_ber(&self) -> Option<f64> {
        metrics::ber(&self.sent_bits(), &self.decoded_bits()).ok()
    }

    /// Mean of the finite per-channel SNR values.
    pub fn mean_snr_db(&self) -> Option<f64> {
        mean(self.channels.iter().filter_map(|c| c.summary.snr.and_then(|s| s.db())))
    }

    pub fn metrics_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("frame_size", self.frame_size.to_string());
        kv("join_round", self.join_round.to_string());
        kv("transmission_start", self.transmission_start.to_string());
        kv("trusted_client", self.trusted_client.to_string());
        kv("edge_pairs", self.harvest.pairs.to_string());
        kv("edge_searches", self.harvest.searches.to_string());
        kv("edge_examples", self.harvest.edges.to_string());
        kv("edge_yield", num(self.harvest.yield_ratio()));
        kv("label_collisions", self.harvest.label_collisions.to_string());
        kv("channels", self.channels.len().to_string());
        kv("ber", opt_num(self.pooled_ber()));
        kv("precision", opt_num(self.precision()));
        kv("detection_rounds", self.detections().len().to_string());
        kv("sender_selected_rounds", self.sender_selected_rounds.to_string());
        kv("sender_trained_rounds", self.sender_trained_rounds.to_string());
        kv("pretrain_final_accuracy", opt_num(self.pretrain_final_accuracy()));
        kv("mean_post_join_accuracy", opt_num(self.mean_post_join_accuracy()));
        for c in &self.channels {
            let s = &c.summary;
            let p = format!("ch{}.", c.index);
            kv(&format!("{p}h"), c.edge.h.to_string());
            kv(&format!("{p}l"), c.edge.l.to_string());
            kv(&format!("{p}bits"), s.bits.to_string());
            kv(&format!("{p}ber"), num(s.ber));
            kv(&format!("{p}snr_db"), snr_text(s.snr));
            kv(&format!("{p}p1"), num(s.error_model.p1));
            kv(&format!("{p}p2"), num(s.error_model.p2));
            kv(&format!("{p}capacity"), num(s.capacity.value));
        }
        out
    }

    /// Writes the report directory. Contents depend only on the config.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), Error> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_text(&dir.join("config.txt"), &self.config.to_text())?;
        write_text(&dir.join("metrics.txt"), &self.metrics_text())?;

        let mut w = csv_writer(&dir.join("metrics.csv"))?;
        w.write_record(["channel", "ber", "snr_db", "p1", "p2", "capacity", "frames", "bits"])?;
        for c in &self.channels {
            let s = &c.summary;
            w.write_record([
                c.index.to_string(),
                num(s.ber),
                snr_text(s.snr),
                num(s.error_model.p1),
                num(s.error_model.p2),
                num(s.capacity.value),
                c.frames.len().to_string(),
                s.bits.to_string(),
            ])?;
        }
        w.flush().map_err(|e| io_err(dir, e))?;

        let mut w = csv_writer(&dir.join("channels.csv"))?;
        w.write_record([
            "channel",
            "transform",
            "h",
            "l",
            "alpha",
            "alpha_far",
            "iterations",
            "multi_class_boundary",
            "sources",
        ])?;
        for c in &self.channels {
            let e = &c.edge;
            w.write_record([
                c.index.to_string(),
                e.kind.name().to_string(),
                e.h.to_string(),
                e.l.to_string(),
                num(e.alpha),
                num(e.alpha_far),
                e.iterations.to_string(),
                e.multi_class_boundary.to_string(),
                e.sources.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
            ])?;
        }
        w.flush().map_err(|e| io_err(dir, e))?;

        for c in &self.channels {
            write_frames_csv(&dir.join(format!("frames_ch{}.csv", c.index)), &c.frames)?;
        }

        let mut w = csv_writer(&dir.join("detection.csv"))?;
        w.write_record(["round", "max_dc", "outlier_id", "is_tp"])?;
        for d in self.detections() {
            w.write_record([
                d.round.to_string(),
                num(d.max_dc),
                d.outlier_id.to_string(),
                u8::from(d.is_true_positive).to_string(),
            ])?;
        }
        w.flush().map_err(|e| io_err(dir, e))?;

        let write_acc = |path: PathBuf, rows: &mut dyn Iterator<Item = &RoundRow>| -> Result<(), Error> {
            let mut w = csv_writer(&path)?;
            w.write_record(["round", "accuracy"])?;
            for r in rows {
                w.write_record([r.round.to_string(), num(r.accuracy)])?;
            }
            w.flush().map_err(|e| io_err(&path, e))
        };
        write_acc(dir.join("accuracy.csv"), &mut self.rows.iter())?;
        write_acc(dir.join("accuracy_post_join.csv"), &mut self.post_join_rows())?;

        let mut w = csv_writer(&dir.join("rounds.csv"))?;
        w.write_record(["round", "phase", "selected_ids", "accuracy", "max_dc", "outlier_id", "snapshot"])?;
        for r in &self.rows {
            w.write_record([
                r.round.to_string(),
                r.phase.name().to_string(),
                r.selected_ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
                num(r.accuracy),
                opt_num(r.detection.as_ref().map(|d| d.max_dc)),
                r.detection.as_ref().map_or_else(|| "na".into(), |d| d.outlier_id.to_string()),
                format!("{:016x}", r.snapshot_id),
            ])?;
        }
        w.flush().map_err(|e| io_err(dir, e))?;

        if !self.checkpoints.is_empty() {
            let cp = dir.join("checkpoints");
            fs::create_dir_all(&cp).map_err(|e| io_err(&cp, e))?;
            for (round, m) in &self.checkpoints {
                let path = cp.join(format!("round_{round:06}.fcpv"));
                fs::write(&path, m.to_bytes()).map_err(|e| io_err(&path, e))?;
            }
        }
        Ok(())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, Error> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_frames_csv(path: &Path, frames: &[FrameRecord]) -> Result<(), Error> {
    let mut w = csv_writer(path)?;
    w.write_record(FrameRecord::CSV_HEADER)?;
    for f in frames {
        w.write_record([
            f.frame_index.to_string(),
            f.round_first.to_string(),
            f.round_last.to_string(),
            f.sent_bit.to_string(),
            f.decoded_bit.to_string(),
            num(f.score_h_first),
            num(f.score_l_first),
            num(f.score_h_last),
            num(f.score_l_last),
        ])?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_frames_csv(path: &Path) -> Result<Vec<FrameRecord>, Error> {
    let mut r = csv::Reader::from_path(path)?;
    let bad = |what: &str| Error::Parse(format!("{}: bad {what}", path.display()));
    let mut frames = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| bad("row"));
        let int = |i: usize| -> Result<usize, Error> { field(i)?.parse().map_err(|_| bad(FrameRecord::CSV_HEADER[i])) };
        let real = |i: usize| -> Result<f64, Error> { field(i)?.parse().map_err(|_| bad(FrameRecord::CSV_HEADER[i])) };
        frames.push(FrameRecord {
            frame_index: int(0)?,
            round_first: int(1)?,
            round_last: int(2)?,
            sent_bit: int(3)? as u8,
            decoded_bit: int(4)? as u8,
            score_h_first: real(5)?,
            score_l_first: real(6)?,
            score_h_last: real(7)?,
            score_l_last: real(8)?,
        });
    }
    Ok(frames)
}

/// One summary line per sweep point.
pub fn write_sweep_csv(path: &Path, axis: &str, values: &[String], reports: &[ExperimentReport]) -> Result<(), Error> {
    let mut w = csv_writer(path)?;
    w.write_record([
        axis,
        "frame_size",
        "ber",
        "snr_db",
        "capacity",
        "precision",
        "mean_post_join_accuracy",
        "edge_yield",
    ])?;
    for (v, r) in values.iter().zip(reports) {
        let capacity = r
            .pooled_ber()
            .and_then(|_| metrics::estimate_error_model(&r.sent_bits(), &r.decoded_bits()).ok())
            .and_then(|m| metrics::bmc_capacity(m.p1, m.p2).ok())
            .map(|c| c.value);
        w.write_record([
            v.clone(),
            r.frame_size.to_string(),
            opt_num(r.pooled_ber()),
            opt_num(r.mean_snr_db()),
            opt_num(capacity),
            opt_num(r.precision()),
            opt_num(r.mean_post_join_accuracy()),
            num(r.harvest.yield_ratio()),
        ])?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
