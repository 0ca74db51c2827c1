//! Multi-head attention: dense (optionally masked), sliding-window via a
//! band mask, and a banded kernel that forms only the band of logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::kernels::{band_attention_packed, dense_attention};
use crate::numcore::{Bound, Mask, ParamId, ParamStore, Tensor, Var};

/// Sliding window of total span `w` (even): `w / 2` neighbours per side plus self.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BandMask {
    w: usize,
}

impl BandMask {
    pub fn new(w: usize) -> Result<Self> {
        if w == 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "window size must be even and positive, got {w}"
            )));
        }
        Ok(BandMask { w })
    }

    pub fn window(&self) -> usize {
        self.w
    }

    pub fn half_width(&self) -> usize {
        self.w / 2
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        i.abs_diff(j) <= self.half_width()
    }

    /// Dense `len x len` boolean form.
    pub fn to_mask(&self, len: usize) -> Mask {
        Mask::from_fn(len, len, |i, j| self.allowed(i, j))
    }
}

/// Which kernel evaluates windowed self-attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionPath {
    /// Full logits with the band mask applied.
    Dense,
    /// Only the band of logits.
    #[default]
    Banded,
}

/// Projections `W_Q, W_K, W_V, W_o`, each `[d, d]`; head `h` uses columns
/// `h·d/N .. (h+1)·d/N` of the input projections.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    heads: usize,
    d: usize,
}

impl MhaParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model width {d} not divisible by head count {heads}"
            )));
        }
        let bound = (6.0 / (2 * d) as f64).sqrt();
        let mut mat = |name: &str| {
            store.add(format!("{prefix}.{name}"), Tensor::uniform([d, d], bound, rng))
        };
        Ok(MhaParams {
            wq: mat("wq"),
            wk: mat("wk"),
            wv: mat("wv"),
            wo: mat("wo"),
            heads,
            d,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn head_width(&self) -> usize {
        self.d / self.heads
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_width() as f64).sqrt()
    }
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V` with masked positions excluded.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Mask>) -> Result<Tensor> {
    let dk = *q.shape().last().unwrap_or(&0);
    if dk == 0 {
        return Err(Error::shape("scaled_dot_attention", format!("q {:?}", q.shape())));
    }
    Ok(dense_attention(q, k, v, mask, 1.0 / (dk as f64).sqrt())?.0)
}

enum HeadKernel<'m> {
    Dense(Option<&'m Mask>),
    Band(usize),
}

fn mha_tape<'t>(
    query: Var<'t>,
    source: Var<'t>,
    params: &MhaParams,
    p: &Bound<'t>,
    kernel: HeadKernel<'_>,
) -> Result<Var<'t>> {
    let tape = query.tape();
    let q = query.matmul(p.var(params.wq))?;
    let k = source.matmul(p.var(params.wk))?;
    let v = source.matmul(p.var(params.wv))?;
    let axis = q.shape().len() - 1;
    let dh = params.head_width();
    let heads = (0..params.heads)
        .map(|h| {
            let (qh, kh, vh) = (
                q.narrow(axis, h * dh, dh)?,
                k.narrow(axis, h * dh, dh)?,
                v.narrow(axis, h * dh, dh)?,
            );
            match kernel {
                HeadKernel::Dense(mask) => tape.attention(qh, kh, vh, mask, params.scale()),
                HeadKernel::Band(hw) => tape.band_attention(qh, kh, vh, hw, params.scale()),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, axis)? };
    cat.matmul(p.var(params.wo))
}

/// Full multi-head attention from `query` positions to `source` positions.
pub fn mha<'t>(
    query: Var<'t>,
    source: Var<'t>,
    params: &MhaParams,
    p: &Bound<'t>,
    mask: Option<&Mask>,
) -> Result<Var<'t>> {
    mha_tape(query, source, params, p, HeadKernel::Dense(mask))
}

/// Windowed self-attention of `x: [L, d]` or `[B, L, d]`.
pub fn sliding_window_mha<'t>(
    x: Var<'t>,
    params: &MhaParams,
    p: &Bound<'t>,
    band: &BandMask,
    path: AttentionPath,
) -> Result<Var<'t>> {
    match path {
        AttentionPath::Dense => {
            let len = x.shape()[x.shape().len() - 2];
            let mask = band.to_mask(len);
            mha_tape(x, x, params, p, HeadKernel::Dense(Some(&mask)))
        }
        AttentionPath::Banded => mha_tape(x, x, params, p, HeadKernel::Band(band.half_width())),
    }
}

fn plain_mha(
    x: &Tensor,
    params: &MhaParams,
    store: &ParamStore,
    head: impl Fn(&Tensor, &Tensor, &Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let q = x.matmul(store.get(params.wq))?;
    let k = x.matmul(store.get(params.wk))?;
    let v = x.matmul(store.get(params.wv))?;
    let axis = x.rank() - 1;
    let dh = params.head_width();
    let mut out = Tensor::zeros(x.shape().to_vec());
    let cols = x.shape()[axis];
    let rows = x.numel() / cols;
    for h in 0..params.heads {
        let o = head(
            &q.narrow(axis, h * dh, dh)?,
            &k.narrow(axis, h * dh, dh)?,
            &v.narrow(axis, h * dh, dh)?,
        )?;
        let dst = out.data_mut();
        for r in 0..rows {
            dst[r * cols + h * dh..r * cols + (h + 1) * dh]
                .copy_from_slice(&o.data()[r * dh..(r + 1) * dh]);
        }
    }
    out.matmul(store.get(params.wo))
}

/// Tape-free windowed attention through the dense masked kernel.
pub fn sliding_window_mha_dense(
    x: &Tensor,
    params: &MhaParams,
    store: &ParamStore,
    band: &BandMask,
) -> Result<Tensor> {
    let len = x.shape()[x.rank().saturating_sub(2)];
    let mask = band.to_mask(len);
    plain_mha(x, params, store, |q, k, v| {
        Ok(dense_attention(q, k, v, Some(&mask), params.scale())?.0)
    })
}

/// Tape-free full attention (no mask).
pub fn full_mha(x: &Tensor, params: &MhaParams, store: &ParamStore) -> Result<Tensor> {
    plain_mha(x, params, store, |q, k, v| {
        Ok(dense_attention(q, k, v, None, params.scale())?.0)
    })
}

/// Tape-free windowed attention that forms only the band; memory `O(w·L)` per head.
pub fn banded_mha_fast(
    x: &Tensor,
    params: &MhaParams,
    store: &ParamStore,
    band: &BandMask,
) -> Result<Tensor> {
    let q = x.matmul(store.get(params.wq))?;
    let k = x.matmul(store.get(params.wk))?;
    let v = x.matmul(store.get(params.wv))?;
    band_attention_packed(&q, &k, &v, params.heads, band.half_width(), params.scale())?.matmul(store.get(params.wo))
}
