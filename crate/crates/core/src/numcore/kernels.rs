//! Forward kernels shared by the tape ops and the tape-free inference paths.
//!
//! Sequence tensors are time-major: `[L, d]` or batched `[B, L, d]`.

use super::gemm::{gemm, MatRef};
use super::tensor::{axis_split, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Softplus,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        }
    }

    /// Derivative at input `x` given the forward output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Softplus => sigmoid(x),
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Boolean attention mask of shape `[rows, cols]`; `true` marks an allowed pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::shape(
                "Mask::new",
                format!("{} flags for {}x{}", allowed.len(), rows, cols),
            ));
        }
        Ok(Mask {
            rows,
            cols,
            allowed,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Mask {
            rows,
            cols,
            allowed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

/// In-place softmax of one row restricted to allowed entries; masked entries become 0.
fn softmax_row(row: &mut [f64], allowed: impl Fn(usize) -> bool) -> Result<()> {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidArgument(
            "attention row has no allowed positions".into(),
        ));
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Softmax along an arbitrary axis with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::InvalidArgument(format!(
            "softmax axis {axis} for rank {}",
            x.rank()
        )));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..n {
                buf[j] = src[(o * n + j) * inner + i];
            }
            softmax_row(&mut buf, |_| true)?;
            for j in 0..n {
                out[(o * n + j) * inner + i] = buf[j];
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Batch/time/channel extents of a time-major sequence tensor.
pub(crate) fn seq_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [l, c] => Ok((1, l, c)),
        [b, l, c] => Ok((b, l, c)),
        _ => Err(Error::shape(op, format!("expected [L, C] or [B, L, C], got {shape:?}"))),
    }
}

/// Zero-padded "same" im2col buffer: row `(b, t)`, column `j * ci + c` holds
/// `x[b, t + j - pad, c]`.
pub(crate) fn im2col(x: &[f64], batch: usize, len: usize, ci: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let mut cols = vec![0.0; batch * len * k * ci];
    for b in 0..batch {
        for t in 0..len {
            let row = &mut cols[(b * len + t) * k * ci..(b * len + t + 1) * k * ci];
            for j in 0..k {
                let src = t as isize + j as isize - pad as isize;
                if src < 0 || src >= len as isize {
                    continue;
                }
                let s = (b * len + src as usize) * ci;
                row[j * ci..(j + 1) * ci].copy_from_slice(&x[s..s + ci]);
            }
        }
    }
    cols
}

/// Kernel `[co, ci, k]` rearranged to `[k * ci, co]` to match [`im2col`].
pub(crate) fn conv_weight_matrix(w: &[f64], co: usize, ci: usize, k: usize) -> Vec<f64> {
    let mut m = vec![0.0; k * ci * co];
    for o in 0..co {
        for c in 0..ci {
            for j in 0..k {
                m[(j * ci + c) * co + o] = w[(o * ci + c) * k + j];
            }
        }
    }
    m
}

pub(crate) fn conv1d_check(x: &[usize], w: &[usize], bias: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
    let (b, l, ci) = seq_dims(x, "conv1d")?;
    let [co, wci, k] = *w else {
        return Err(Error::shape("conv1d", format!("kernel must be [out, in, k], got {w:?}")));
    };
    if wci != ci {
        return Err(Error::shape("conv1d", format!("input channels {ci} vs kernel {w:?}")));
    }
    if k % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv1d kernel size must be odd, got {k}"
        )));
    }
    if bias != [co] {
        return Err(Error::shape("conv1d", format!("bias {bias:?} for {co} outputs")));
    }
    Ok((b, l, ci, co, k))
}

/// Same-length 1-D convolution (cross-correlation, zero padding) over the time axis.
pub fn conv1d(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, l, ci, co, k) = conv1d_check(x.shape(), w.shape(), bias.shape())?;
    let cols = im2col(x.data(), b, l, ci, k);
    let wm = conv_weight_matrix(w.data(), co, ci, k);
    let mut out = vec![0.0; b * l * co];
    for row in out.chunks_mut(co) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        MatRef::new(&cols, b * l, k * ci),
        MatRef::new(&wm, k * ci, co),
        1.0,
        &mut out,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = co;
    Tensor::from_parts(shape, out).check_finite("conv1d")
}

pub(crate) fn avgpool_check(shape: &[usize], kernel: usize) -> Result<(usize, usize, usize)> {
    let dims = seq_dims(shape, "avgpool1d_replicate")?;
    if kernel % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "moving-average kernel must be odd, got {kernel}"
        )));
    }
    if kernel > 2 * dims.1 - 1 {
        return Err(Error::InvalidArgument(format!(
            "moving-average kernel {kernel} too large for length {}",
            dims.1
        )));
    }
    Ok(dims)
}

/// Centered moving average over time with edge replication.
///
/// Evaluated as `x[t] + mean_j (x[clamp(t+j)] - x[t])` so a constant series
/// maps to itself exactly.
pub fn avgpool1d_replicate(x: &Tensor, kernel: usize) -> Result<Tensor> {
    let (b, l, c) = avgpool_check(x.shape(), kernel)?;
    let half = (kernel / 2) as isize;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let inv = 1.0 / kernel as f64;
    for bi in 0..b {
        for t in 0..l {
            let centre = &src[(bi * l + t) * c..(bi * l + t + 1) * c];
            let dst = &mut out[(bi * l + t) * c..(bi * l + t + 1) * c];
            for j in -half..=half {
                let s = (t as isize + j).clamp(0, l as isize - 1) as usize;
                let row = &src[(bi * l + s) * c..(bi * l + s + 1) * c];
                for ch in 0..c {
                    dst[ch] += row[ch] - centre[ch];
                }
            }
            for ch in 0..c {
                dst[ch] = centre[ch] + dst[ch] * inv;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Dimensions of a batched attention problem.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub dk: usize,
    pub dv: usize,
}

pub(crate) fn attn_dims(q: &[usize], k: &[usize], v: &[usize]) -> Result<AttnDims> {
    let (bq, lq, dq) = seq_dims(q, "attention")?;
    let (bk, lk, dk) = seq_dims(k, "attention")?;
    let (bv, lv, dv) = seq_dims(v, "attention")?;
    if q.len() != k.len() || k.len() != v.len() || bq != bk || bk != bv || dq != dk || lk != lv {
        return Err(Error::shape(
            "attention",
            format!("q {q:?}, k {k:?}, v {v:?}"),
        ));
    }
    Ok(AttnDims {
        batch: bq,
        lq,
        lk,
        dk,
        dv,
    })
}

/// `softmax(scale * q k^T, masked) v`; returns the output and the probabilities `[B, Lq, Lk]`.
pub fn dense_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Mask>,
    scale: f64,
) -> Result<(Tensor, Tensor)> {
    let d = attn_dims(q.shape(), k.shape(), v.shape())?;
    if let Some(m) = mask {
        if m.rows() != d.lq || m.cols() != d.lk {
            return Err(Error::shape(
                "attention",
                format!("mask {}x{} for {}x{}", m.rows(), m.cols(), d.lq, d.lk),
            ));
        }
    }
    let mut probs = vec![0.0; d.batch * d.lq * d.lk];
    let mut out = vec![0.0; d.batch * d.lq * d.dv];
    for b in 0..d.batch {
        let qb = &q.data()[b * d.lq * d.dk..(b + 1) * d.lq * d.dk];
        let kb = &k.data()[b * d.lk * d.dk..(b + 1) * d.lk * d.dk];
        let vb = &v.data()[b * d.lk * d.dv..(b + 1) * d.lk * d.dv];
        let pb = &mut probs[b * d.lq * d.lk..(b + 1) * d.lq * d.lk];
        gemm(
            MatRef::new(qb, d.lq, d.dk),
            MatRef::new(kb, d.lk, d.dk).t(),
            0.0,
            pb,
        );
        for (i, row) in pb.chunks_mut(d.lk).enumerate() {
            for s in row.iter_mut() {
                *s *= scale;
            }
            match mask {
                Some(m) => softmax_row(row, |j| m.allowed(i, j))?,
                None => softmax_row(row, |_| true)?,
            }
        }
        gemm(
            MatRef::new(pb, d.lq, d.lk),
            MatRef::new(vb, d.lk, d.dv),
            0.0,
            &mut out[b * d.lq * d.dv..(b + 1) * d.lq * d.dv],
        );
    }
    let mut out_shape = q.shape().to_vec();
    *out_shape.last_mut().unwrap() = d.dv;
    let mut p_shape = vec![d.batch, d.lq, d.lk];
    if q.rank() == 2 {
        p_shape.remove(0);
    }
    Ok((
        Tensor::from_parts(out_shape, out).check_finite("attention")?,
        Tensor::from_parts(p_shape, probs),
    ))
}

/// Band attention: position `i` attends to `j` with `|i - j| <= half_width`.
///
/// Only the `2 * half_width + 1` band logits per row are formed. Returns the
/// output and the band probabilities `[B, L, 2 * half_width + 1]`, where slot
/// `o` corresponds to key position `i + o - half_width` (zero when outside the
/// sequence).
pub fn band_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    half_width: usize,
    scale: f64,
) -> Result<(Tensor, Tensor)> {
    let d = attn_dims(q.shape(), k.shape(), v.shape())?;
    if d.lq != d.lk {
        return Err(Error::shape(
            "band_attention",
            format!("self-attention needs equal lengths, got {} and {}", d.lq, d.lk),
        ));
    }
    let l = d.lq;
    let width = 2 * half_width + 1;
    let mut probs = vec![0.0; d.batch * l * width];
    let mut out = vec![0.0; d.batch * l * d.dv];
    for b in 0..d.batch {
        let qb = &q.data()[b * l * d.dk..(b + 1) * l * d.dk];
        let kb = &k.data()[b * l * d.dk..(b + 1) * l * d.dk];
        let vb = &v.data()[b * l * d.dv..(b + 1) * l * d.dv];
        for i in 0..l {
            let row = &mut probs[(b * l + i) * width..(b * l + i + 1) * width];
            let qi = &qb[i * d.dk..(i + 1) * d.dk];
            let valid = |o: usize| band_key(i, o, half_width, l).is_some();
            for (o, s) in row.iter_mut().enumerate() {
                if let Some(j) = band_key(i, o, half_width, l) {
                    let kj = &kb[j * d.dk..(j + 1) * d.dk];
                    *s = scale * qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>();
                }
            }
            softmax_row(row, valid)?;
            let oi = &mut out[(b * l + i) * d.dv..(b * l + i + 1) * d.dv];
            for (o, &p) in row.iter().enumerate() {
                if let Some(j) = band_key(i, o, half_width, l) {
                    let vj = &vb[j * d.dv..(j + 1) * d.dv];
                    for (acc, &x) in oi.iter_mut().zip(vj) {
                        *acc += p * x;
                    }
                }
            }
        }
    }
    let mut out_shape = q.shape().to_vec();
    *out_shape.last_mut().unwrap() = d.dv;
    let mut p_shape = vec![d.batch, l, width];
    if q.rank() == 2 {
        p_shape.remove(0);
    }
    Ok((
        Tensor::from_parts(out_shape, out).check_finite("band_attention")?,
        Tensor::from_parts(p_shape, probs),
    ))
}

/// Band attention over all heads at once, without keeping probabilities.
///
/// `q`, `k`, `v` are `[.., L, d]` with `heads` equal slices packed along the
/// last axis; the output has the same layout. Per head the arithmetic matches
/// [`band_attention`] on that head's slice.
pub fn band_attention_packed(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    half_width: usize,
    scale: f64,
) -> Result<Tensor> {
    let d = attn_dims(q.shape(), k.shape(), v.shape())?;
    if d.lq != d.lk || d.dk != d.dv || heads == 0 || d.dk % heads != 0 {
        return Err(Error::shape(
            "band_attention_packed",
            format!("q {:?}, k {:?}, v {:?}, {heads} heads", q.shape(), k.shape(), v.shape()),
        ));
    }
    let (l, dm) = (d.lq, d.dk);
    let dh = dm / heads;
    let mut row = vec![0.0; 2 * half_width + 1];
    let mut out = vec![0.0; d.batch * l * dm];
    for b in 0..d.batch {
        let base = b * l * dm;
        let (qb, kb, vb) = (&q.data()[base..], &k.data()[base..], &v.data()[base..]);
        for i in 0..l {
            let lo = i.saturating_sub(half_width);
            let hi = (i + half_width).min(l - 1);
            let logits = &mut row[..hi - lo + 1];
            for off in (0..dm).step_by(dh) {
                let qi = &qb[i * dm + off..i * dm + off + dh];
                let mut max = f64::NEG_INFINITY;
                for (s, j) in logits.iter_mut().zip(lo..) {
                    let kj = &kb[j * dm + off..j * dm + off + dh];
                    *s = scale * qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>();
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in logits.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let oi = &mut out[base + i * dm + off..base + i * dm + off + dh];
                for (&s, j) in logits.iter().zip(lo..) {
                    let p = s / sum;
                    let vj = &vb[j * dm + off..j * dm + off + dh];
                    for (acc, &x) in oi.iter_mut().zip(vj) {
                        *acc += p * x;
                    }
                }
            }
        }
    }
    Tensor::from_parts(q.shape().to_vec(), out).check_finite("band_attention_packed")
}

/// Key position for band slot `o` of query `i`, if inside the sequence.
#[inline]
pub(crate) fn band_key(i: usize, o: usize, half_width: usize, len: usize) -> Option<usize> {
    let j = i as isize + o as isize - half_width as isize;
    (j >= 0 && (j as usize) < len).then_some(j as usize)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn packed_band_attention_matches_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shape = [2, 9, 6];
        let (q, k, v) = (
            Tensor::randn(shape, 1.0, &mut rng),
            Tensor::randn(shape, 1.0, &mut rng),
            Tensor::randn(shape, 1.0, &mut rng),
        );
        let packed = band_attention_packed(&q, &k, &v, 3, 2, 0.7).unwrap();
        for h in 0..3 {
            let slice = |t: &Tensor| t.narrow(2, 2 * h, 2).unwrap();
            let (one, _) = band_attention(&slice(&q), &slice(&k), &slice(&v), 2, 0.7).unwrap();
            assert_eq!(slice(&packed), one);
        }
        assert!(band_attention_packed(&q, &k, &v, 4, 2, 0.7).is_err());
    }
}
