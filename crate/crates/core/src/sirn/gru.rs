use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Bound, ParamId, ParamStore, Tensor, Var};

/// One GRU layer; gate blocks are ordered reset, update, candidate.
#[derive(Clone, Debug)]
pub struct GruLayer {
    /// `[d_in, 3·d_h]`
    pub w_ih: ParamId,
    /// `[d_h, 3·d_h]`
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

/// Stacked GRU; layer `k > 0` consumes the hidden sequence of layer `k - 1`.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub layers: Vec<GruLayer>,
    d_in: usize,
    d_h: usize,
}

impl GruParams {
    /// Uniform `±1/sqrt(d_h)` initialization.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_layers == 0 || d_h == 0 {
            return Err(Error::InvalidArgument("GRU needs at least one layer and a positive width".into()));
        }
        let bound = 1.0 / (d_h as f64).sqrt();
        let layers = (0..num_layers)
            .map(|k| {
                let din = if k == 0 { d_in } else { d_h };
                GruLayer {
                    w_ih: store.add(format!("{prefix}.l{k}.w_ih"), Tensor::uniform([din, 3 * d_h], bound, rng)),
                    w_hh: store.add(format!("{prefix}.l{k}.w_hh"), Tensor::uniform([d_h, 3 * d_h], bound, rng)),
                    b_ih: store.add(format!("{prefix}.l{k}.b_ih"), Tensor::uniform([3 * d_h], bound, rng)),
                    b_hh: store.add(format!("{prefix}.l{k}.b_hh"), Tensor::uniform([3 * d_h], bound, rng)),
                }
            })
            .collect();
        Ok(GruParams { layers, d_in, d_h })
    }

    pub fn input_width(&self) -> usize {
        self.d_in
    }

    pub fn hidden_width(&self) -> usize {
        self.d_h
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Hidden sequences of a [`gru_forward`] run.
#[derive(Clone, Debug)]
pub struct GruOutput<'t> {
    /// Top-layer hidden sequence `[B, L, d_h]`.
    pub outputs: Var<'t>,
    /// Hidden sequence of every layer, bottom first.
    pub states: Vec<Var<'t>>,
}

fn layer_forward<'t>(x: Var<'t>, layer: &GruLayer, p: &Bound<'t>, h0: Var<'t>, dh: usize) -> Result<Var<'t>> {
    let tape = x.tape();
    let [b, l, _] = x.shape()[..] else {
        return Err(Error::shape("gru_forward", format!("input {:?}", x.shape())));
    };
    let gi = x.matmul(p.var(layer.w_ih))?.add(p.var(layer.b_ih))?;
    let gate = |v: Var<'t>, k: usize| v.narrow(1, k * dh, dh);
    let mut h = h0;
    let mut seq = Vec::with_capacity(l);
    for t in 0..l {
        let gi_t = gi.narrow(1, t, 1)?.reshape(&[b, 3 * dh])?;
        let gh = h.matmul(p.var(layer.w_hh))?.add(p.var(layer.b_hh))?;
        let r = gate(gi_t, 0)?.add(gate(gh, 0)?)?.sigmoid()?;
        let z = gate(gi_t, 1)?.add(gate(gh, 1)?)?.sigmoid()?;
        let n = gate(gi_t, 2)?.add(r.mul(gate(gh, 2)?)?)?.tanh()?;
        // (1 - z) n + z h
        h = n.add(z.mul(h.sub(n)?)?)?;
        seq.push(h.reshape(&[b, 1, dh])?);
    }
    if seq.len() == 1 {
        Ok(seq[0])
    } else {
        tape.concat(&seq, 1)
    }
}

/// Runs the GRU stack over `x: [B, L, d_in]` from `h0` (`[B, d_h]`, zeros when `None`,
/// shared by every layer).
pub fn gru_forward<'t>(
    x: Var<'t>,
    params: &GruParams,
    p: &Bound<'t>,
    h0: Option<Var<'t>>,
) -> Result<GruOutput<'t>> {
    let shape = x.shape();
    let [b, _, din] = shape[..] else {
        return Err(Error::shape("gru_forward", format!("input must be [B, L, d_in], got {shape:?}")));
    };
    if din != params.d_in {
        return Err(Error::shape(
            "gru_forward",
            format!("input width {din}, expected {}", params.d_in),
        ));
    }
    let h0 = match h0 {
        Some(h) => h,
        None => x.tape().constant(Tensor::zeros([b, params.d_h])),
    };
    let mut states = Vec::with_capacity(params.layers.len());
    let mut input = x;
    for layer in &params.layers {
        let out = layer_forward(input, layer, p, h0, params.d_h)?;
        states.push(out);
        input = out;
    }
    Ok(GruOutput {
        outputs: input,
        states,
    })
}
