//! Channel-quality measures: bit error rate, the Differential Manchester
//! reference signal, normalized score traces, SNR and the capacity of a
//! binary memoryless channel.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("value {0} is not a bit")]
    NotBinary(u8),
    #[error("all scores are zero; normalization bound undefined")]
    ZeroBound,
    #[error("normalization bound must be positive and finite, got {0}")]
    BadBound(f64),
    #[error("need at least two frames, got {0}")]
    TooShort(usize),
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
}

fn check_bits(bits: &[u8]) -> Result<(), MetricsError> {
    match bits.iter().find(|&&b| b > 1) {
        Some(&b) => Err(MetricsError::NotBinary(b)),
        None => Ok(()),
    }
}

/// Fraction of positions where `sent` and `received` differ.
pub fn ber(sent: &[u8], received: &[u8]) -> Result<f64, MetricsError> {
    if sent.len() != received.len() {
        return Err(MetricsError::LengthMismatch(sent.len(), received.len()));
    }
    if sent.is_empty() {
        return Err(MetricsError::Empty);
    }
    check_bits(sent)?;
    check_bits(received)?;
    let flips = sent.iter().zip(received).filter(|(a, b)| a != b).count();
    Ok(flips as f64 / sent.len() as f64)
}

/// `s(0) = 1`, `s(t) = (1 - 2 b_t) / s(t - 1)`; one sample more than there are bits.
pub fn reference_signal(bits: &[u8]) -> Result<Vec<f64>, MetricsError> {
    check_bits(bits)?;
    let mut s = Vec::with_capacity(bits.len() + 1);
    s.push(1.0);
    for &b in bits {
        let prev = s[s.len() - 1];
        s.push((1.0 - 2.0 * b as f64) / prev);
    }
    Ok(s)
}

/// What the Receiver and Sender logged about one frame of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub round_first: usize,
    pub round_last: usize,
    pub sent_bit: u8,
    pub decoded_bit: u8,
    pub score_h_first: f64,
    pub score_l_first: f64,
    pub score_h_last: f64,
    pub score_l_last: f64,
}

impl FrameRecord {
    pub const CSV_HEADER: [&'static str; 9] = [
        "frame_index",
        "round_first",
        "round_last",
        "sent_bit",
        "decoded_bit",
        "score_h_first",
        "score_l_first",
        "score_h_last",
        "score_l_last",
    ];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalization {
    /// Largest absolute h/l score seen over the transmission.
    Auto,
    Fixed(f64),
}

/// Normalized score signals sampled at the start of the first frame and at
/// the end of every frame, aligned with [`reference_signal`].
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTrace {
    pub z_h: Vec<f64>,
    pub z_l: Vec<f64>,
    pub z: Vec<f64>,
    pub s: Vec<f64>,
    pub n: Vec<f64>,
    pub bound: f64,
}

pub fn signal_trace(frames: &[FrameRecord], norm: Normalization) -> Result<SignalTrace, MetricsError> {
    let first = frames.first().ok_or(MetricsError::Empty)?;
    let mut raw_h = vec![first.score_h_first];
    let mut raw_l = vec![first.score_l_first];
    raw_h.extend(frames.iter().map(|f| f.score_h_last));
    raw_l.extend(frames.iter().map(|f| f.score_l_last));
    let bound = match norm {
        Normalization::Fixed(z) if z > 0.0 && z.is_finite() => z,
        Normalization::Fixed(z) => return Err(MetricsError::BadBound(z)),
        Normalization::Auto => {
            let m = raw_h
                .iter()
                .chain(&raw_l)
                .fold(0.0_f64, |acc, v| acc.max(v.abs()));
            if m == 0.0 {
                return Err(MetricsError::ZeroBound);
            }
            m
        }
    };
    let z_h: Vec<f64> = raw_h.iter().map(|v| v / bound).collect();
    let z_l: Vec<f64> = raw_l.iter().map(|v| v / bound).collect();
    let z: Vec<f64> = z_h.iter().zip(&z_l).map(|(h, l)| h - l).collect();
    let bits: Vec<u8> = frames.iter().map(|f| f.sent_bit).collect();
    let s = reference_signal(&bits)?;
    let n = z.iter().zip(&s).map(|(a, b)| a - b).collect();
    Ok(SignalTrace {
        z_h,
        z_l,
        z,
        s,
        n,
        bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Finite(f64),
    /// The normalized noise has zero variance.
    Infinite,
}

impl Snr {
    pub fn db(&self) -> Option<f64> {
        match self {
            Snr::Finite(v) => Some(*v),
            Snr::Infinite => None,
        }
    }
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Snr::Finite(v) => write!(f, "{v}"),
            Snr::Infinite => f.write_str("inf"),
        }
    }
}

pub fn snr(trace: &SignalTrace) -> Result<Snr, MetricsError> {
    snr_of(&trace.z, &trace.n)
}

/// `10 log10(mean(z²) / var(n / max|n|))` over the whole transmission.
pub fn snr_of(z: &[f64], n: &[f64]) -> Result<Snr, MetricsError> {
    if z.len() != n.len() {
        return Err(MetricsError::LengthMismatch(z.len(), n.len()));
    }
    // Samples are one more than frames.
    if z.len() < 3 {
        return Err(MetricsError::TooShort(z.len().saturating_sub(1)));
    }
    let peak = n.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if peak == 0.0 {
        return Ok(Snr::Infinite);
    }
    let len = n.len() as f64;
    let nbar: Vec<f64> = n.iter().map(|v| v / peak).collect();
    let mean = nbar.iter().sum::<f64>() / len;
    let var = nbar.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len;
    if var == 0.0 {
        return Ok(Snr::Infinite);
    }
    let power = z.iter().map(|v| v * v).sum::<f64>() / len;
    Ok(Snr::Finite(10.0 * (power / var).log10()))
}

/// Shannon entropy of a Bernoulli(p) source in bits, `H(0) = H(1) = 0`.
pub fn binary_entropy(p: f64) -> Result<f64, MetricsError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(MetricsError::ProbabilityOutOfRange(p));
    }
    let term = |q: f64| if q == 0.0 { 0.0 } else { -q * q.log2() };
    Ok(term(p) + term(1.0 - p))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capacity {
    /// `raw` clamped to be non-negative.
    pub value: f64,
    pub raw: f64,
}

/// `C = 1 - H(p1)/2 - H(p2)/2`.
pub fn bmc_capacity(p1: f64, p2: f64) -> Result<Capacity, MetricsError> {
    let raw = 1.0 - binary_entropy(p1)? / 2.0 - binary_entropy(p2)? / 2.0;
    Ok(Capacity {
        value: raw.max(0.0),
        raw,
    })
}

/// Transition counts `n_ab` (sent a, received b) and the crossover estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelErrorModel {
    pub n00: usize,
    pub n01: usize,
    pub n10: usize,
    pub n11: usize,
    /// P(1 | 0)
    pub p1: f64,
    /// P(0 | 1)
    pub p2: f64,
}

pub fn estimate_error_model(sent: &[u8], received: &[u8]) -> Result<ChannelErrorModel, MetricsError> {
    if sent.len() != received.len() {
        return Err(MetricsError::LengthMismatch(sent.len(), received.len()));
    }
    if sent.is_empty() {
        return Err(MetricsError::Empty);
    }
    check_bits(sent)?;
    check_bits(received)?;
    let mut counts = [[0usize; 2]; 2];
    for (&a, &b) in sent.iter().zip(received) {
        counts[a as usize][b as usize] += 1;
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(ChannelErrorModel {
        n00: counts[0][0],
        n01: counts[0][1],
        n10: counts[1][0],
        n11: counts[1][1],
        p1: ratio(counts[0][1], counts[0][0] + counts[0][1]),
        p2: ratio(counts[1][0], counts[1][0] + counts[1][1]),
    })
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricsError::TooShort(x.len()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let len = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / len;
    let my = ry.iter().sum::<f64>() / len;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some(sxy / (sxx * syy).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(bit: u8, h_first: f64, l_first: f64, h_last: f64, l_last: f64) -> FrameRecord {
        FrameRecord {
            frame_index: 0,
            round_first: 0,
            round_last: 0,
            sent_bit: bit,
            decoded_bit: bit,
            score_h_first: h_first,
            score_l_first: l_first,
            score_h_last: h_last,
            score_l_last: l_last,
        }
    }

    #[test]
    fn ber_fixtures() {
        let a = [0, 1, 1, 0];
        assert_eq!(ber(&a, &a).unwrap(), 0.0);
        assert_eq!(ber(&a, &[1, 0, 0, 1]).unwrap(), 1.0);
        let mut flipped = vec![0u8; 100];
        for b in flipped.iter_mut().step_by(17) {
            *b = 1;
        }
        assert_eq!(ber(&[0u8; 100], &flipped).unwrap(), 0.06);
        assert_eq!(ber(&[], &[]), Err(MetricsError::Empty));
        assert!(matches!(ber(&[0], &[0, 1]), Err(MetricsError::LengthMismatch(..))));
        assert_eq!(ber(&[2], &[0]), Err(MetricsError::NotBinary(2)));
    }

    #[test]
    fn reference_signal_fixtures() {
        assert_eq!(reference_signal(&[0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(reference_signal(&[1]).unwrap(), vec![1.0, -1.0]);
        let bits = [0, 1, 0, 1, 0, 0, 1, 1, 1, 0];
        assert_eq!(
            reference_signal(&bits).unwrap(),
            vec![1.0, 1.0, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0, 1.0, -1.0, -1.0]
        );
    }

    #[test]
    fn trace_endpoints_and_zero_noise() {
        let t = signal_trace(&[frame(0, 0.0, 0.0, 5.0, -5.0)], Normalization::Auto).unwrap();
        assert_eq!(t.bound, 5.0);
        assert_eq!(t.z[1], 2.0);

        let frames = [frame(1, 1.0, 0.0, 0.0, 1.0), frame(0, 0.0, 1.0, 0.0, 1.0)];
        let t = signal_trace(&frames, Normalization::Auto).unwrap();
        assert_eq!(t.z, t.s);
        assert!(t.n.iter().all(|&v| v == 0.0));
        assert_eq!(snr(&t).unwrap(), Snr::Infinite);
    }

    #[test]
    fn trace_errors() {
        assert_eq!(signal_trace(&[], Normalization::Auto), Err(MetricsError::Empty));
        let zero = [frame(0, 0.0, 0.0, 0.0, 0.0)];
        assert_eq!(signal_trace(&zero, Normalization::Auto), Err(MetricsError::ZeroBound));
        assert!(signal_trace(&zero, Normalization::Fixed(1.0)).is_ok());
        assert!(signal_trace(&zero, Normalization::Fixed(0.0)).is_err());
    }

    #[test]
    fn snr_needs_two_frames() {
        assert_eq!(snr_of(&[1.0, 1.0], &[0.1, 0.2]), Err(MetricsError::TooShort(1)));
    }

    #[test]
    fn capacity_anchors() {
        assert_eq!(bmc_capacity(0.0, 0.0).unwrap().value, 1.0);
        assert_eq!(bmc_capacity(0.5, 0.5).unwrap().value, 0.0);
        assert!((bmc_capacity(0.1, 0.2).unwrap().value - 0.4046).abs() < 1e-4);
        assert!(bmc_capacity(-0.1, 0.0).is_err());
        assert!(bmc_capacity(0.0, 1.5).is_err());
    }

    #[test]
    fn error_model_counts() {
        let m = estimate_error_model(&[0, 1], &[0, 1]).unwrap();
        assert_eq!((m.p1, m.p2), (0.0, 0.0));
        let sent = [0u8; 100];
        let mut got = [0u8; 100];
        got[..10].fill(1);
        let m = estimate_error_model(&sent, &got).unwrap();
        assert_eq!((m.n00, m.n01, m.n10, m.n11), (90, 10, 0, 0));
        assert_eq!((m.p1, m.p2), (0.1, 0.0));
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[0.0, 2.0]).unwrap(), None);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }
}
