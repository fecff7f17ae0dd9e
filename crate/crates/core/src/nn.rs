//! Dense feed-forward classifier: forward pass, softmax cross-entropy,
//! mini-batch SGD and flat parameter-vector algebra.
//!
//! Parameters live in one flat [`ParamVector`], layer-major. Each layer
//! stores its weight matrix first, input-major (`w[i * out + j]` connects
//! input `i` to output `j`), followed by its biases. Scores returned by the
//! forward pass are pre-softmax logits.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{Dataset, LabeledExample};

/// Magic bytes opening a serialized [`ParamVector`].
pub const PARAM_MAGIC: &[u8; 4] = b"FCPV";
/// Current serialization version.
pub const PARAM_VERSION: u32 = 1;

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("parameter length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-finite parameter at index {0}")]
    NonFinite(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error("malformed parameter file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
        }
    }

    fn param_count(&self) -> usize {
        self.input_dim * self.output_dim + self.output_dim
    }
}

/// A validated stack of dense layers.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NetSpec {
    layers: Vec<LayerSpec>,
}

impl NetSpec {
    /// Checks that dimensions are positive and chain, and that the last layer
    /// emits raw logits.
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self, NnError> {
        let last = layers
            .last()
            .ok_or_else(|| NnError::InvalidSpec("no layers".into()))?;
        if last.activation != Activation::Identity {
            return Err(NnError::InvalidSpec(
                "final layer must use the identity activation".into(),
            ));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.input_dim == 0 || layer.output_dim == 0 {
                return Err(NnError::InvalidSpec(format!("layer {i} has a zero dimension")));
            }
            if i > 0 && layers[i - 1].output_dim != layer.input_dim {
                return Err(NnError::InvalidSpec(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    i - 1,
                    layers[i - 1].output_dim,
                    i,
                    layer.input_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    /// ReLU hidden layers of the given widths followed by an identity output layer.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Result<Self, NnError> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(classes);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 == dims.len() {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                LayerSpec::new(w[0], w[1], act)
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    fn widest(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.output_dim.max(l.input_dim))
            .max()
            .unwrap_or(0)
    }
}

/// Flat vector of every model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self, NnError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// `magic "FCPV" | version u32 | count u64 | count × f64`, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.0.len());
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.0.len() as u64).to_le_bytes());
        for v in &self.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        if bytes.len() < 16 {
            return Err(NnError::Format("header shorter than 16 bytes".into()));
        }
        if &bytes[..4] != PARAM_MAGIC {
            return Err(NnError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != PARAM_VERSION {
            return Err(NnError::Format(format!("unsupported version {version}")));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() != count * 8 {
            return Err(NnError::Format(format!(
                "expected {} payload bytes, found {}",
                count * 8,
                body.len()
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::new(values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Pre-softmax class scores for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(pub Vec<f64>);

impl ScoreVector {
    pub fn scores(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest score; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Training hyperparameters of one local session.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shuffle_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.batch_size == 0 {
            return Err(NnError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(self, shuffle_seed: u64) -> Self {
        Self {
            shuffle_seed,
            ..self
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 32,
            learning_rate: 0.05,
            shuffle_seed: 0,
        }
    }
}

fn check_len(spec: &NetSpec, model: &ParamVector) -> Result<(), NnError> {
    if model.len() != spec.param_count() {
        return Err(NnError::LengthMismatch {
            left: model.len(),
            right: spec.param_count(),
        });
    }
    Ok(())
}

/// Glorot-uniform weights (`a = sqrt(6 / (fan_in + fan_out))`), zero biases.
pub fn init_model(spec: &NetSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for layer in spec.layers() {
        let bound = (6.0 / (layer.input_dim + layer.output_dim) as f64).sqrt();
        values.extend((0..layer.input_dim * layer.output_dim).map(|_| rng.random_range(-bound..=bound)));
        values.extend(std::iter::repeat_n(0.0, layer.output_dim));
    }
    ParamVector(values)
}

/// `c = a · b + beta · c` with explicit row/column strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm: output too small");
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs too small");
        assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs too small");
    }
    #[cfg(target_arch = "x86_64")]
    {
        if k > 0 && csb == 1 && n % 8 == 0 && std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime and the asserts
            // above bound every index the kernel touches.
            unsafe { gemm_avx512(m, k, n, a, rsa, csa, b, rsb, beta, c) };
            return;
        }
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Register-blocked product for a row-major `b` and a width that is a
/// multiple of 8: 4 rows × 40 columns of `c` per block, summed over `k` in order.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_avx512(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, beta: f64, c: &mut [f64]) {
    let vectors = n / 8;
    let mut v0 = 0;
    while v0 < vectors {
        let width = (vectors - v0).min(5);
        let mut i = 0;
        while i < m {
            let rows = if m - i >= 4 { 4 } else { 1 };
            let ap = a.as_ptr().add(i * rsa);
            let bp = b.as_ptr().add(v0 * 8);
            let cp = c.as_mut_ptr().add(i * n + v0 * 8);
            if rows == 4 {
                micro_rows::<4>(width, k, ap, rsa, csa, bp, rsb, beta, cp, n);
            } else {
                micro_rows::<1>(width, k, ap, rsa, csa, bp, rsb, beta, cp, n);
            }
            i += rows;
        }
        v0 += width;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
#[inline]
#[allow(clippy::too_many_arguments)]
unsafe fn micro_rows<const R: usize>(
    width: usize,
    k: usize,
    a: *const f64,
    rsa: usize,
    csa: usize,
    b: *const f64,
    rsb: usize,
    beta: f64,
    c: *mut f64,
    ldc: usize,
) {
    match width {
        5 => micro::<R, 5>(k, a, rsa, csa, b, rsb, beta, c, ldc),
        4 => micro::<R, 4>(k, a, rsa, csa, b, rsb, beta, c, ldc),
        3 => micro::<R, 3>(k, a, rsa, csa, b, rsb, beta, c, ldc),
        2 => micro::<R, 2>(k, a, rsa, csa, b, rsb, beta, c, ldc),
        _ => micro::<R, 1>(k, a, rsa, csa, b, rsb, beta, c, ldc),
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
#[inline]
#[allow(clippy::too_many_arguments)]
unsafe fn micro<const R: usize, const V: usize>(
    k: usize,
    a: *const f64,
    rsa: usize,
    csa: usize,
    b: *const f64,
    rsb: usize,
    beta: f64,
    c: *mut f64,
    ldc: usize,
) {
    use std::arch::x86_64::*;
    let mut acc = [[_mm512_setzero_pd(); V]; R];
    for p in 0..k {
        let bp = b.add(p * rsb);
        let mut bv = [_mm512_setzero_pd(); V];
        for (v, slot) in bv.iter_mut().enumerate() {
            *slot = _mm512_loadu_pd(bp.add(v * 8));
        }
        for (r, row) in acc.iter_mut().enumerate() {
            let av = _mm512_set1_pd(*a.add(r * rsa + p * csa));
            for (x, bw) in row.iter_mut().zip(&bv) {
                *x = _mm512_fmadd_pd(av, *bw, *x);
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        for (v, x) in row.iter().enumerate() {
            let cp = c.add(r * ldc + v * 8);
            let out = if beta == 0.0 { *x } else { _mm512_fmadd_pd(_mm512_set1_pd(beta), _mm512_loadu_pd(cp), *x) };
            _mm512_storeu_pd(cp, out);
        }
    }
}

/// `dst` (`cols × rows`) = `src` (`rows × cols`) transposed.
fn transpose(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    const T: usize = 8;
    for r0 in (0..rows).step_by(T) {
        for c0 in (0..cols).step_by(T) {
            for r in r0..(r0 + T).min(rows) {
                for c in c0..(c0 + T).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Per-batch scratch buffers: post-activation outputs and backprop deltas.
struct Workspace {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    inputs: Vec<f64>,
    /// Delta and delta_prev of one layer, transposed.
    transposed: Vec<f64>,
    transposed_out: Vec<f64>,
}

impl Workspace {
    fn new(spec: &NetSpec, batch: usize) -> Self {
        Self {
            acts: spec
                .layers()
                .iter()
                .map(|l| vec![0.0; batch * l.output_dim])
                .collect(),
            delta: vec![0.0; batch * spec.widest()],
            delta_prev: vec![0.0; batch * spec.widest()],
            inputs: vec![0.0; batch * spec.input_dim()],
            transposed: vec![0.0; batch * spec.widest()],
            transposed_out: vec![0.0; batch * spec.widest()],
        }
    }
}

/// Image inputs are mostly background; below this fill the first layer
/// skips zero features instead of running a dense product.
const SPARSE_FILL: f64 = 0.5;

/// Nonzero inputs of a batch grouped by feature, rows ascending within a
/// feature: the terms of feature `i` are `terms[start[i]..start[i + 1]]`,
/// each a row offset `r · stride` and the value.
struct Columns {
    start: Vec<usize>,
    terms: Vec<(usize, f64)>,
}

impl Columns {
    /// `None` when the batch is too dense for the sparse kernels to pay off.
    fn of_sparse(x: &[f64], fan_in: usize, stride: usize) -> Option<Columns> {
        // Branch-free compaction of each row, then a counting sort by feature.
        let mut hits: Vec<(u32, u32)> = vec![(0, 0); x.len() + 1];
        let mut n = 0;
        for (r, xr) in x.chunks_exact(fan_in).enumerate() {
            for (i, &v) in xr.iter().enumerate() {
                hits[n] = (r as u32, i as u32);
                n += usize::from(v != 0.0);
            }
        }
        if n as f64 >= SPARSE_FILL * x.len() as f64 {
            return None;
        }
        hits.truncate(n);
        let mut start = vec![0usize; fan_in + 1];
        for &(_, i) in &hits {
            start[i as usize + 1] += 1;
        }
        for i in 0..fan_in {
            start[i + 1] += start[i];
        }
        let mut next = start.clone();
        let mut terms = vec![(0usize, 0.0); n];
        for &(r, i) in &hits {
            let (r, i) = (r as usize, i as usize);
            terms[next[i]] = (r * stride, x[r * fan_in + i]);
            next[i] += 1;
        }
        Some(Columns { start, terms })
    }

    fn column(&self, i: usize) -> &[(usize, f64)] {
        &self.terms[self.start[i]..self.start[i + 1]]
    }

    fn features(&self) -> usize {
        self.start.len() - 1
    }
}

/// What the sparse first-layer backward pass does with `Σ_r x[r][i] · delta[r]`.
#[derive(Clone, Copy)]
enum FirstLayer {
    /// Write it to the gradient buffer.
    Store,
    /// Apply the SGD step to the weights in place; features absent from the
    /// batch have a zero gradient and are left alone.
    Step(f64),
}

/// `out[r] += Σ_i x[r][i] · w[i]` over the nonzero inputs, with `w` stored `fan_in × fan_out`.
fn sparse_forward(cols: &Columns, w: &[f64], out: &mut [f64], fan_out: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime.
            unsafe { sparse_forward_avx512(cols, w, out, fan_out) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            unsafe { sparse_forward_avx2(cols, w, out, fan_out) };
            return;
        }
    }
    sparse_forward_plain::<32>(cols, w, out, fan_out);
}

/// First-layer weight gradient, stored or applied per `mode`. Returns false
/// if a stepped weight became non-finite.
fn sparse_backward(cols: &Columns, delta: &[f64], dst: &mut [f64], fan_out: usize, mode: FirstLayer) -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { sparse_backward_avx512(cols, delta, dst, fan_out, mode) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { sparse_backward_avx2(cols, delta, dst, fan_out, mode) };
        }
    }
    sparse_backward_plain::<32>(cols, delta, dst, fan_out, mode)
}

// No FMA anywhere below: every lane rounds the product, then the sum, so
// all variants agree bit for bit.

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn sparse_forward_avx512(cols: &Columns, w: &[f64], out: &mut [f64], fan_out: usize) {
    sparse_forward_plain::<64>(cols, w, out, fan_out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn sparse_backward_avx512(cols: &Columns, delta: &[f64], dst: &mut [f64], fan_out: usize, mode: FirstLayer) -> bool {
    sparse_backward_plain::<64>(cols, delta, dst, fan_out, mode)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn sparse_forward_avx2(cols: &Columns, w: &[f64], out: &mut [f64], fan_out: usize) {
    sparse_forward_plain::<32>(cols, w, out, fan_out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn sparse_backward_avx2(cols: &Columns, delta: &[f64], dst: &mut [f64], fan_out: usize, mode: FirstLayer) -> bool {
    sparse_backward_plain::<32>(cols, delta, dst, fan_out, mode)
}

// Output columns go in blocks of `N`, then 8, then one at a time, so the
// inner loops keep a block of a row in registers. Each output still sums
// its terms in ascending order. Plain loops rather than closures: a
// closure would not inherit the caller's target features.

#[inline(always)]
fn forward_block<const B: usize>(cols: &Columns, w: &[f64], out: &mut [f64], fan_out: usize, at: usize) {
    for i in 0..cols.features() {
        let col = cols.column(i);
        if col.is_empty() {
            continue;
        }
        let wr: [f64; B] = w[i * fan_out + at..i * fan_out + at + B].try_into().expect("block in bounds");
        for &(ro, c) in col {
            let o: &mut [f64; B] = (&mut out[ro + at..ro + at + B]).try_into().expect("block in bounds");
            for k in 0..B {
                o[k] += c * wr[k];
            }
        }
    }
}

#[inline(always)]
fn backward_block<const B: usize>(cols: &Columns, delta: &[f64], dst: &mut [f64], fan_out: usize, at: usize, mode: FirstLayer) -> bool {
    let mut finite = true;
    for i in 0..cols.features() {
        let col = cols.column(i);
        let slot: &mut [f64; B] = (&mut dst[i * fan_out + at..i * fan_out + at + B]).try_into().expect("block in bounds");
        match mode {
            FirstLayer::Store => {
                let mut acc = [0.0; B];
                for &(ro, c) in col {
                    let d: &[f64; B] = delta[ro + at..ro + at + B].try_into().expect("block in bounds");
                    for k in 0..B {
                        acc[k] += c * d[k];
                    }
                }
                *slot = acc;
            }
            FirstLayer::Step(lr) => {
                if col.is_empty() {
                    continue;
                }
                let mut acc = [0.0; B];
                for &(ro, c) in col {
                    let d: &[f64; B] = delta[ro + at..ro + at + B].try_into().expect("block in bounds");
                    for k in 0..B {
                        acc[k] += c * d[k];
                    }
                }
                for k in 0..B {
                    slot[k] -= lr * acc[k];
                    finite &= slot[k].is_finite();
                }
            }
        }
    }
    finite
}

#[inline(always)]
fn sparse_forward_plain<const N: usize>(cols: &Columns, w: &[f64], out: &mut [f64], fan_out: usize) {
    let mut at = 0;
    while fan_out - at >= N {
        forward_block::<N>(cols, w, out, fan_out, at);
        at += N;
    }
    while fan_out - at >= 8 {
        forward_block::<8>(cols, w, out, fan_out, at);
        at += 8;
    }
    while at < fan_out {
        forward_block::<1>(cols, w, out, fan_out, at);
        at += 1;
    }
}

#[inline(always)]
fn sparse_backward_plain<const N: usize>(cols: &Columns, delta: &[f64], dst: &mut [f64], fan_out: usize, mode: FirstLayer) -> bool {
    let mut finite = true;
    let mut at = 0;
    while fan_out - at >= N {
        finite &= backward_block::<N>(cols, delta, dst, fan_out, at, mode);
        at += N;
    }
    while fan_out - at >= 8 {
        finite &= backward_block::<8>(cols, delta, dst, fan_out, at, mode);
        at += 8;
    }
    while at < fan_out {
        finite &= backward_block::<1>(cols, delta, dst, fan_out, at, mode);
        at += 1;
    }
    finite
}

/// Forward pass of `rows` inputs laid out row-major in `inputs`; fills
/// `acts`. Returns the first layer's nonzero index when it took the sparse path.
fn forward_into(params: &[f64], spec: &NetSpec, inputs: &[f64], rows: usize, acts: &mut [Vec<f64>]) -> Option<Columns> {
    let mut sparse = None;
    let mut offset = 0;
    for (li, layer) in spec.layers().iter().enumerate() {
        let (fan_in, fan_out) = (layer.input_dim, layer.output_dim);
        let w = &params[offset..offset + fan_in * fan_out];
        let b = &params[offset + fan_in * fan_out..offset + layer.param_count()];
        offset += layer.param_count();
        let (before, rest) = acts.split_at_mut(li);
        let out = &mut rest[0][..rows * fan_out];
        for row in out.chunks_exact_mut(fan_out) {
            row.copy_from_slice(b);
        }
        let prev: &[f64] = if li == 0 { inputs } else { &before[li - 1] };
        if li == 0 {
            sparse = Columns::of_sparse(prev, fan_in, fan_out);
        }
        match sparse.as_ref().filter(|_| li == 0) {
            Some(cols) => sparse_forward(cols, w, out, fan_out),
            None => gemm(rows, fan_in, fan_out, prev, fan_in, 1, w, fan_out, 1, 1.0, out),
        }
        if layer.activation == Activation::Relu {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    sparse
}

/// Logits of a single input.
pub fn forward(model: &ParamVector, spec: &NetSpec, x: &[f64]) -> Result<ScoreVector, NnError> {
    let scores = forward_batch(model, spec, x, 1)?;
    Ok(ScoreVector(scores))
}

/// Logits of `rows` inputs stacked row-major; returns `rows × classes` scores.
pub fn forward_batch(
    model: &ParamVector,
    spec: &NetSpec,
    inputs: &[f64],
    rows: usize,
) -> Result<Vec<f64>, NnError> {
    check_len(spec, model)?;
    if inputs.len() != rows * spec.input_dim() {
        return Err(NnError::DimensionMismatch {
            expected: rows * spec.input_dim(),
            found: inputs.len(),
        });
    }
    let mut acts: Vec<Vec<f64>> = spec
        .layers()
        .iter()
        .map(|l| vec![0.0; rows * l.output_dim])
        .collect();
    forward_into(model.as_slice(), spec, inputs, rows, &mut acts);
    Ok(acts.pop().expect("at least one layer"))
}

/// Argmax of the logits, lowest index on ties.
pub fn predict_label(model: &ParamVector, spec: &NetSpec, x: &[f64]) -> Result<usize, NnError> {
    Ok(forward(model, spec, x)?.argmax())
}

/// Predicted labels of every example, evaluated in chunks.
pub fn predict_all(model: &ParamVector, spec: &NetSpec, dataset: &Dataset) -> Result<Vec<usize>, NnError> {
    let classes = spec.num_classes();
    let mut labels = Vec::with_capacity(dataset.len());
    for chunk in dataset.examples().chunks(EVAL_CHUNK) {
        let mut inputs = Vec::with_capacity(chunk.len() * spec.input_dim());
        for ex in chunk {
            inputs.extend_from_slice(&ex.features);
        }
        let scores = forward_batch(model, spec, &inputs, chunk.len())?;
        labels.extend(scores.chunks_exact(classes).map(argmax));
    }
    Ok(labels)
}

/// Fraction of examples whose predicted label equals the true label.
pub fn accuracy(model: &ParamVector, spec: &NetSpec, dataset: &Dataset) -> Result<f64, NnError> {
    if dataset.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let predicted = predict_all(model, spec, dataset)?;
    let correct = predicted
        .iter()
        .zip(dataset)
        .filter(|(p, ex)| **p == ex.label)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Euclidean norm of `a - b`.
pub fn param_distance(a: &ParamVector, b: &ParamVector) -> Result<f64, NnError> {
    if a.len() != b.len() {
        return Err(NnError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.0
        .iter()
        .zip(&b.0)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

fn check_examples(spec: &NetSpec, examples: &[&LabeledExample]) -> Result<(), NnError> {
    for ex in examples {
        if ex.features.len() != spec.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: spec.input_dim(),
                found: ex.features.len(),
            });
        }
        if ex.label >= spec.num_classes() {
            return Err(NnError::LabelOutOfRange {
                label: ex.label,
                classes: spec.num_classes(),
            });
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy of one batch; writes its gradient into `grad`.
/// With `FirstLayer::Step` a sparse first layer's weights are stepped in
/// place instead, and their slice of `grad` is left untouched.
fn batch_gradient(
    params: &mut [f64],
    spec: &NetSpec,
    batch: &[&LabeledExample],
    ws: &mut Workspace,
    grad: &mut [f64],
    first: FirstLayer,
) -> BatchOutcome {
    let rows = batch.len();
    let dim = spec.input_dim();
    let inputs = &mut ws.inputs[..rows * dim];
    for (row, ex) in inputs.chunks_exact_mut(dim).zip(batch) {
        row.copy_from_slice(&ex.features);
    }
    let cols = forward_into(params, spec, inputs, rows, &mut ws.acts);

    let layers = spec.layers();
    let classes = spec.num_classes();
    let inv_rows = 1.0 / rows as f64;
    let mut loss = 0.0;
    {
        let logits = &ws.acts[layers.len() - 1];
        let delta = &mut ws.delta[..rows * classes];
        for ((drow, lrow), ex) in delta.chunks_exact_mut(classes).zip(logits.chunks_exact(classes)).zip(batch) {
            let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (d, &z) in drow.iter_mut().zip(lrow) {
                *d = (z - max).exp();
                sum += *d;
            }
            loss += sum.ln() + max - lrow[ex.label];
            for d in drow.iter_mut() {
                *d = *d / sum * inv_rows;
            }
            drow[ex.label] -= inv_rows;
        }
    }

    let mut stepped_finite = None;
    let mut offsets = Vec::with_capacity(layers.len());
    let mut off = 0;
    for l in layers {
        offsets.push(off);
        off += l.param_count();
    }
    for li in (0..layers.len()).rev() {
        let layer = layers[li];
        let (fan_in, fan_out) = (layer.input_dim, layer.output_dim);
        let w_off = offsets[li];
        let b_off = w_off + fan_in * fan_out;
        let delta = &ws.delta[..rows * fan_out];
        let prev: &[f64] = if li == 0 { &ws.inputs[..rows * dim] } else { &ws.acts[li - 1][..rows * fan_in] };
        // dW = prevᵀ · delta.
        match cols.as_ref().filter(|_| li == 0) {
            Some(cols) => match first {
                FirstLayer::Store => {
                    sparse_backward(cols, delta, &mut grad[w_off..b_off], fan_out, first);
                }
                FirstLayer::Step(_) => {
                    stepped_finite = Some(sparse_backward(cols, delta, &mut params[w_off..b_off], fan_out, first));
                }
            },
            None => gemm(fan_in, rows, fan_out, prev, 1, fan_in, delta, fan_out, 1, 0.0, &mut grad[w_off..b_off]),
        }
        let gb = &mut grad[b_off..b_off + fan_out];
        gb.iter_mut().for_each(|v| *v = 0.0);
        for drow in delta.chunks_exact(fan_out) {
            for (g, d) in gb.iter_mut().zip(drow) {
                *g += d;
            }
        }
        if li > 0 {
            // delta_prev = delta · Wᵀ, masked by the ReLU derivative.
            // Computed as (W · deltaᵀ)ᵀ: transposing the small delta is
            // cheaper than transposing W.
            let dt = &mut ws.transposed[..fan_out * rows];
            transpose(delta, rows, fan_out, dt);
            let dpt = &mut ws.transposed_out[..fan_in * rows];
            gemm(fan_in, fan_out, rows, &params[w_off..b_off], fan_out, 1, dt, rows, 1, 0.0, dpt);
            let dp = &mut ws.delta_prev[..rows * fan_in];
            transpose(dpt, fan_in, rows, dp);
            if layers[li - 1].activation == Activation::Relu {
                for (d, &a) in dp.iter_mut().zip(prev) {
                    *d = if a > 0.0 { *d } else { 0.0 };
                }
            }
            std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
        }
    }
    BatchOutcome {
        loss: loss * inv_rows,
        stepped_finite,
    }
}

struct BatchOutcome {
    loss: f64,
    /// Set when the first layer's weights were stepped in place: whether
    /// they all stayed finite.
    stepped_finite: Option<bool>,
}

/// Mean cross-entropy over `examples` and its gradient with respect to every parameter.
pub fn loss_and_gradient(
    model: &ParamVector,
    spec: &NetSpec,
    examples: &[&LabeledExample],
) -> Result<(f64, ParamVector), NnError> {
    check_len(spec, model)?;
    if examples.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    check_examples(spec, examples)?;
    let mut ws = Workspace::new(spec, examples.len());
    let mut grad = vec![0.0; model.len()];
    let mut params = model.0.clone();
    let out = batch_gradient(&mut params, spec, examples, &mut ws, &mut grad, FirstLayer::Store);
    Ok((out.loss, ParamVector(grad)))
}

/// Mean cross-entropy of the model over a dataset.
pub fn mean_loss(model: &ParamVector, spec: &NetSpec, dataset: &Dataset) -> Result<f64, NnError> {
    check_len(spec, model)?;
    if dataset.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let refs: Vec<&LabeledExample> = dataset.iter().collect();
    check_examples(spec, &refs)?;
    let classes = spec.num_classes();
    let mut total = 0.0;
    for chunk in refs.chunks(EVAL_CHUNK) {
        let mut inputs = Vec::with_capacity(chunk.len() * spec.input_dim());
        for ex in chunk {
            inputs.extend_from_slice(&ex.features);
        }
        let scores = forward_batch(model, spec, &inputs, chunk.len())?;
        for (row, ex) in scores.chunks_exact(classes).zip(chunk) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[ex.label];
        }
    }
    Ok(total / dataset.len() as f64)
}

/// Runs `cfg.epochs` epochs of plain mini-batch SGD starting from `model`.
/// The input is left untouched; shuffling is driven by `cfg.shuffle_seed`.
pub fn train_local(
    model: &ParamVector,
    spec: &NetSpec,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<ParamVector, NnError> {
    train_inner(model, spec, dataset, cfg, None)
}

/// As [`train_local`], but stops before the first step that would move the
/// parameters further than `max_distance` (L2) from `model`.
pub fn train_local_capped(
    model: &ParamVector,
    spec: &NetSpec,
    dataset: &Dataset,
    cfg: &TrainConfig,
    max_distance: f64,
) -> Result<ParamVector, NnError> {
    train_inner(model, spec, dataset, cfg, Some(max_distance))
}

fn train_inner(
    model: &ParamVector,
    spec: &NetSpec,
    dataset: &Dataset,
    cfg: &TrainConfig,
    cap: Option<f64>,
) -> Result<ParamVector, NnError> {
    check_len(spec, model)?;
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let refs: Vec<&LabeledExample> = dataset.iter().collect();
    check_examples(spec, &refs)?;
    let mut params = model.0.clone();
    if cfg.epochs == 0 {
        return Ok(ParamVector(params));
    }
    let batch = cfg.batch_size.min(refs.len());
    let mut ws = Workspace::new(spec, batch);
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..refs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut scratch: Vec<&LabeledExample> = Vec::with_capacity(batch);
    let mut previous = cap.map(|_| params.clone());
    let first_weights = spec.layers()[0].input_dim * spec.layers()[0].output_dim;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(batch).enumerate() {
            scratch.clear();
            scratch.extend(chunk.iter().map(|&i| refs[i]));
            if let Some(prev) = previous.as_mut() {
                prev.copy_from_slice(&params);
            }
            let out = batch_gradient(&mut params, spec, &scratch, &mut ws, &mut grad, FirstLayer::Step(cfg.learning_rate));
            if !out.loss.is_finite() {
                return Err(NnError::Divergence {
                    epoch,
                    batch: bi,
                    loss: out.loss,
                });
            }
            let from = if out.stepped_finite.is_some() { first_weights } else { 0 };
            let mut finite = out.stepped_finite.unwrap_or(true);
            for (p, g) in params[from..].iter_mut().zip(&grad[from..]) {
                *p -= cfg.learning_rate * g;
                finite &= p.is_finite();
            }
            if !finite {
                let i = params.iter().position(|v| !v.is_finite()).unwrap_or(0);
                return Err(NnError::NonFinite(i));
            }
            if let (Some(limit), Some(prev)) = (cap, previous.as_ref()) {
                let moved = params
                    .iter()
                    .zip(&model.0)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if moved > limit {
                    return Ok(ParamVector(prev.clone()));
                }
            }
        }
    }
    Ok(ParamVector(params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(features: Vec<f64>, label: usize) -> LabeledExample {
        LabeledExample {
            features,
            label,
            source_id: None,
        }
    }

    #[test]
    fn spec_validation() {
        assert!(NetSpec::new(vec![]).is_err());
        assert!(NetSpec::new(vec![
            LayerSpec::new(2, 3, Activation::Relu),
            LayerSpec::new(4, 2, Activation::Identity)
        ])
        .is_err());
        assert!(NetSpec::new(vec![LayerSpec::new(2, 2, Activation::Relu)]).is_err());
        let spec = NetSpec::mlp(784, &[200, 200, 200], 10).unwrap();
        assert_eq!(spec.param_count(), 784 * 200 + 200 + 2 * (200 * 200 + 200) + 200 * 10 + 10);
    }

    #[test]
    fn init_is_deterministic_with_expected_length() {
        let spec = NetSpec::mlp(2, &[], 2).unwrap();
        let a = init_model(&spec, 7);
        assert_eq!(a.len(), 6);
        assert_eq!(a, init_model(&spec, 7));
        assert_ne!(a, init_model(&spec, 8));
        assert_eq!(&a.as_slice()[4..], &[0.0, 0.0]);
    }

    #[test]
    fn zero_model_scores_zero_and_predicts_zero() {
        let spec = NetSpec::mlp(3, &[4], 3).unwrap();
        let m = ParamVector::zeros(spec.param_count());
        let s = forward(&m, &spec, &[0.3, 0.2, 0.9]).unwrap();
        assert_eq!(s.scores(), &[0.0, 0.0, 0.0]);
        assert_eq!(predict_label(&m, &spec, &[0.3, 0.2, 0.9]).unwrap(), 0);
    }

    #[test]
    fn identity_net_hand_computation() {
        let spec = NetSpec::new(vec![
            LayerSpec::new(2, 2, Activation::Relu),
            LayerSpec::new(2, 2, Activation::Identity),
        ])
        .unwrap();
        let m = ParamVector::new(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let s = forward(&m, &spec, &[1.0, -1.0]).unwrap();
        assert_eq!(s.scores(), &[1.0, 0.0]);
    }

    #[test]
    fn argmax_picks_largest() {
        assert_eq!(ScoreVector(vec![0.1, 3.0, -1.0]).argmax(), 1);
        assert_eq!(ScoreVector(vec![2.0, 2.0]).argmax(), 0);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let spec = NetSpec::mlp(3, &[], 2).unwrap();
        let m = init_model(&spec, 1);
        assert!(matches!(forward(&m, &spec, &[1.0]), Err(NnError::DimensionMismatch { .. })));
        let short = ParamVector::zeros(3);
        assert!(matches!(forward(&short, &spec, &[1.0, 2.0, 3.0]), Err(NnError::LengthMismatch { .. })));
    }

    #[test]
    fn zero_epochs_returns_input() {
        let spec = NetSpec::mlp(2, &[3], 2).unwrap();
        let m = init_model(&spec, 3);
        let ds = Dataset::new(vec![ex(vec![0.1, 0.2], 1)], 2, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert_eq!(train_local(&m, &spec, &ds, &cfg).unwrap(), m);
    }

    #[test]
    fn training_errors() {
        let spec = NetSpec::mlp(2, &[3], 2).unwrap();
        let m = init_model(&spec, 3);
        let empty = Dataset::empty(2, 2);
        assert!(matches!(
            train_local(&m, &spec, &empty, &TrainConfig::default()),
            Err(NnError::EmptyDataset)
        ));
        let ds = Dataset::new(vec![ex(vec![0.1, 0.2], 1)], 2, 2).unwrap();
        let diverging = TrainConfig {
            epochs: 200,
            learning_rate: 1e300,
            ..TrainConfig::default()
        };
        let err = train_local(&m, &spec, &ds, &diverging).unwrap_err();
        assert!(matches!(err, NnError::Divergence { .. } | NnError::NonFinite(_)), "{err}");
    }

    #[test]
    fn capped_training_respects_distance() {
        let spec = NetSpec::mlp(2, &[8], 2).unwrap();
        let m = init_model(&spec, 3);
        let ds = Dataset::new(vec![ex(vec![0.9, 0.1], 1); 64], 2, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 4,
            learning_rate: 0.5,
            shuffle_seed: 1,
        };
        let free = train_local(&m, &spec, &ds, &cfg).unwrap();
        let cap = param_distance(&free, &m).unwrap() / 3.0;
        let capped = train_local_capped(&m, &spec, &ds, &cfg, cap).unwrap();
        let d = param_distance(&capped, &m).unwrap();
        assert!(d <= cap && d > 0.0, "{d} vs {cap}");
    }

    #[test]
    fn distance_basics() {
        let a = ParamVector::new(vec![3.0, 4.0, 0.0]).unwrap();
        let z = ParamVector::zeros(3);
        assert_eq!(param_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(param_distance(&a, &z).unwrap(), 5.0);
        assert!(param_distance(&a, &ParamVector::zeros(2)).is_err());
    }

    #[test]
    fn accuracy_extremes() {
        let spec = NetSpec::mlp(1, &[], 2).unwrap();
        // Weight row [0, 1] with zero bias: positive input goes to class 1.
        let m = ParamVector::new(vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let right = Dataset::new(vec![ex(vec![0.5], 1)], 1, 2).unwrap();
        let wrong = Dataset::new(vec![ex(vec![0.5], 0), ex(vec![0.7], 0)], 1, 2).unwrap();
        assert_eq!(accuracy(&m, &spec, &right).unwrap(), 1.0);
        assert_eq!(accuracy(&m, &spec, &wrong).unwrap(), 0.0);
        assert!(accuracy(&m, &spec, &Dataset::empty(1, 2)).is_err());
    }

    #[test]
    fn param_bytes_round_trip_and_reject_garbage() {
        let v = ParamVector::new(vec![1.5, -2.25, 1e-300]).unwrap();
        let bytes = v.to_bytes();
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(&bytes[..4], b"FCPV");
        assert_eq!(ParamVector::from_bytes(&bytes).unwrap(), v);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParamVector::from_bytes(&bad).is_err());
        assert!(ParamVector::from_bytes(&bytes[..20]).is_err());
    }
}
