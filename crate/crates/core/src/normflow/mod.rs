//! Conditional normalizing-flow head: an encoder latent, a flow initialized
//! from the decoder state and a chain of affine conditioners.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Floor added to every scale output.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Fully connected map with one tanh hidden layer.
#[derive(Clone, Debug)]
pub struct Fcn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Fcn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Fcn {
            w1: store.add(
                format!("{prefix}.w1"),
                Tensor::uniform([d_in, hidden], 1.0 / (d_in as f64).sqrt(), rng),
            ),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros([hidden])),
            w2: store.add(
                format!("{prefix}.w2"),
                Tensor::uniform([hidden, d_out], 1.0 / (hidden as f64).sqrt(), rng),
            ),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros([d_out])),
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        x.matmul(p.var(self.w1))?
            .add(p.var(self.b1))?
            .tanh()?
            .matmul(p.var(self.w2))?
            .add(p.var(self.b2))
    }
}

/// Location and scale networks; the scale passes through `softplus + SIGMA_FLOOR`.
#[derive(Clone, Debug)]
pub struct FlowConditioner {
    pub mu: Fcn,
    pub sigma: Fcn,
}

impl FlowConditioner {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        FlowConditioner {
            mu: Fcn::new(store, &format!("{prefix}.mu"), d_in, d, d, rng),
            sigma: Fcn::new(store, &format!("{prefix}.sigma"), d_in, d, d, rng),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.mu.ids().into_iter().chain(self.sigma.ids()).collect()
    }

    /// `(μ(x), σ(x))`.
    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let mu = self.mu.forward(x, p)?;
        let sigma = self.sigma.forward(x, p)?.softplus()?.offset(SIGMA_FLOOR)?;
        Ok((mu, sigma))
    }

    /// `μ(x) + σ(x) · z`.
    pub fn affine<'t>(&self, x: Var<'t>, z: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        let (mu, sigma) = self.forward(x, p)?;
        mu.add(sigma.mul(z)?)
    }
}

/// Which latent feeds the output projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NfVariant {
    /// The full chain `z_T`.
    #[default]
    Full,
    /// The encoder latent `z_e`.
    ZeOnly,
    /// `z_d`: the encoder-latent map applied to the decoder state.
    ZdOnly,
    /// The chain start `z_0`.
    Z0,
    /// No flow: the flow head repeats the decoder forecast with zero variance.
    NoFlow,
}

impl NfVariant {
    pub const ALL: [NfVariant; 5] = [
        NfVariant::Full,
        NfVariant::ZeOnly,
        NfVariant::ZdOnly,
        NfVariant::Z0,
        NfVariant::NoFlow,
    ];
}

#[derive(Clone, Debug)]
pub struct FlowParams {
    /// `z_e = μ_e(h_e) + σ_e(h_e) · ε`
    pub encoder: FlowConditioner,
    /// `z_0 = μ_d(h_d) + σ_d(h_d) · z̄_e`
    pub init: FlowConditioner,
    /// `z_t = μ_t([h_d ‖ z_{t-1}]) + σ_t([h_d ‖ z_{t-1}]) · z_{t-1}`
    pub chain: Vec<FlowConditioner>,
    /// `[d, d_t]`
    pub proj_w: ParamId,
    /// `[d_t]`
    pub proj_b: ParamId,
    d: usize,
}

impl FlowParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        d_t: usize,
        transforms: usize,
        rng: &mut R,
    ) -> Self {
        FlowParams {
            encoder: FlowConditioner::new(store, &format!("{prefix}.enc"), d, d, rng),
            init: FlowConditioner::new(store, &format!("{prefix}.init"), d, d, rng),
            chain: (0..transforms)
                .map(|t| FlowConditioner::new(store, &format!("{prefix}.step{t}"), 2 * d, d, rng))
                .collect(),
            proj_w: store.add(
                format!("{prefix}.proj_w"),
                Tensor::uniform([d, d_t], 1.0 / (d as f64).sqrt(), rng),
            ),
            proj_b: store.add(format!("{prefix}.proj_b"), Tensor::zeros([d_t])),
            d,
        }
    }

    pub fn transforms(&self) -> usize {
        self.chain.len()
    }

    pub fn width(&self) -> usize {
        self.d
    }

    /// Every parameter owned by the flow.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.ids();
        ids.extend(self.init.ids());
        for c in &self.chain {
            ids.extend(c.ids());
        }
        ids.extend([self.proj_w, self.proj_b]);
        ids
    }
}

/// `z_e = μ_e(h_e) + σ_e(h_e) · ε`.
pub fn encoder_latent<'t>(h_e: Var<'t>, eps: Var<'t>, params: &FlowParams, p: &Bound<'t>) -> Result<Var<'t>> {
    params.encoder.affine(h_e, eps, p)
}

/// Mean over positions of `z_e: [B, L_e, d]`, repeated to `len` positions.
pub fn align_latent(z_e: Var<'_>, len: usize) -> Result<Var<'_>> {
    z_e.mean_axis(1)?.broadcast_axis(1, len)
}

/// `z_0 = μ_d(h_d) + σ_d(h_d) · z_e` with `z_e` already aligned to `h_d`.
pub fn init_flow<'t>(h_d: Var<'t>, z_e: Var<'t>, params: &FlowParams, p: &Bound<'t>) -> Result<Var<'t>> {
    if h_d.shape() != z_e.shape() {
        return Err(Error::shape(
            "init_flow",
            format!("decoder state {:?} vs latent {:?}", h_d.shape(), z_e.shape()),
        ));
    }
    params.init.affine(h_d, z_e, p)
}

/// Applies the `T` conditioned affine steps to `z_0`.
pub fn flow_chain<'t>(z0: Var<'t>, h_d: Var<'t>, params: &FlowParams, p: &Bound<'t>) -> Result<Var<'t>> {
    let tape = z0.tape();
    let axis = h_d.shape().len() - 1;
    let mut z = z0;
    for step in &params.chain {
        let cond = tape.concat(&[h_d, z], axis)?;
        z = step.affine(cond, z, p)?;
    }
    Ok(z)
}

/// Standard-normal draws for one flow sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowNoise {
    /// `[B, L_e, d]`
    pub enc: Tensor,
    /// `[B, L_d, d]`, used by [`NfVariant::ZdOnly`].
    pub dec: Tensor,
}

impl FlowNoise {
    pub fn sample<R: Rng + ?Sized>(enc_shape: &[usize], dec_shape: &[usize], rng: &mut R) -> Self {
        FlowNoise {
            enc: Tensor::randn(enc_shape.to_vec(), 1.0, rng),
            dec: Tensor::randn(dec_shape.to_vec(), 1.0, rng),
        }
    }

    pub fn zeros(enc_shape: &[usize], dec_shape: &[usize]) -> Self {
        FlowNoise {
            enc: Tensor::zeros(enc_shape.to_vec()),
            dec: Tensor::zeros(dec_shape.to_vec()),
        }
    }
}

/// One draw of the flow head: the projected latent over the last `pred_len`
/// decoder positions, `[B, pred_len, d_t]`. `None` for [`NfVariant::NoFlow`].
pub fn flow_sample<'t>(
    h_e: Var<'t>,
    h_d: Var<'t>,
    params: &FlowParams,
    p: &Bound<'t>,
    noise: &FlowNoise,
    variant: NfVariant,
    pred_len: usize,
) -> Result<Option<Var<'t>>> {
    let tape = h_e.tape();
    let len = h_d.shape()[1];
    if pred_len > len {
        return Err(Error::shape(
            "flow_sample",
            format!("horizon {pred_len} longer than decoder length {len}"),
        ));
    }
    let z = match variant {
        NfVariant::NoFlow => return Ok(None),
        NfVariant::ZdOnly => encoder_latent(h_d, tape.constant(noise.dec.clone()), params, p)?,
        _ => {
            let z_e = encoder_latent(h_e, tape.constant(noise.enc.clone()), params, p)?;
            let z_e = align_latent(z_e, len)?;
            match variant {
                NfVariant::ZeOnly => z_e,
                NfVariant::Z0 => init_flow(h_d, z_e, params, p)?,
                _ => flow_chain(init_flow(h_d, z_e, params, p)?, h_d, params, p)?,
            }
        }
    };
    let out = z
        .narrow(1, len - pred_len, pred_len)?
        .matmul(p.var(params.proj_w))?
        .add(p.var(params.proj_b))?;
    Ok(Some(out))
}

/// Monte-Carlo summary of the flow head.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowForecast {
    /// Sample mean `[B, pred_len, d_t]`.
    pub mean: Tensor,
    /// Per-coordinate variance over the draws (divisor `n`).
    pub variance: Tensor,
}

/// Draws `n_samples` flow outputs from fixed latent states. `None` for [`NfVariant::NoFlow`].
pub fn flow_forecast<R: Rng + ?Sized>(
    h_e: &Tensor,
    h_d: &Tensor,
    store: &ParamStore,
    params: &FlowParams,
    variant: NfVariant,
    pred_len: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<Option<FlowForecast>> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    if variant == NfVariant::NoFlow {
        return Ok(None);
    }
    let ids = params.ids();
    // Welford accumulation
    let mut mean: Option<Tensor> = None;
    let mut m2: Option<Tensor> = None;
    for k in 1..=n_samples {
        let noise = FlowNoise::sample(h_e.shape(), h_d.shape(), rng);
        let tape = Tape::new();
        let p = store.bind_subset(&tape, &ids);
        let draw = flow_sample(
            tape.constant(h_e.clone()),
            tape.constant(h_d.clone()),
            params,
            &p,
            &noise,
            variant,
            pred_len,
        )?
        .expect("flow variant yields a sample")
        .value();
        match (mean.as_mut(), m2.as_mut()) {
            (Some(mu), Some(acc)) => {
                for ((m, s), &x) in mu.data_mut().iter_mut().zip(acc.data_mut()).zip(draw.data()) {
                    let delta = x - *m;
                    *m += delta / k as f64;
                    *s += delta * (x - *m);
                }
            }
            _ => {
                m2 = Some(Tensor::zeros(draw.shape().to_vec()));
                mean = Some(draw.as_ref().clone());
            }
        }
    }
    let mean = mean.expect("n_samples >= 1");
    let variance = m2.expect("n_samples >= 1").map(|s| s / n_samples as f64);
    Ok(Some(FlowForecast { mean, variance }))
}
