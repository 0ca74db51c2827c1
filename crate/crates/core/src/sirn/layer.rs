use rand::Rng;

use super::gru::{gru_forward, GruParams};
use crate::attention::{sliding_window_mha, AttentionPath, BandMask, MhaParams};
use crate::error::{Error, Result};
use crate::numcore::{Bound, ParamId, ParamStore, Tensor, Var};

/// Moving-average trend and the residual seasonal part of `x: [B, L, d]`.
///
/// A kernel longer than `2L - 1` is shortened to `2L - 1`.
pub fn series_decompose<'t>(x: Var<'t>, kernel: usize) -> Result<(Var<'t>, Var<'t>)> {
    let shape = x.shape();
    let len = shape[shape.len().saturating_sub(2)];
    let k = kernel.min(2 * len.max(1) - 1);
    let trend = x.avgpool1d_replicate(k)?;
    let seasonal = x.sub(trend)?;
    Ok((trend, seasonal))
}

/// Hyperparameters of one SIRN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SirnConfig {
    pub d: usize,
    pub heads: usize,
    pub window: usize,
    /// Distillation depth `η ≥ 1`.
    pub eta: usize,
    pub decomp_kernel: usize,
    pub seasonal_kernel: usize,
    pub rnn1_layers: usize,
    pub rnn2_layers: usize,
    pub attention: AttentionPath,
}

impl Default for SirnConfig {
    fn default() -> Self {
        SirnConfig {
            d: 64,
            heads: 4,
            window: 2,
            eta: 2,
            decomp_kernel: 25,
            seasonal_kernel: 3,
            rnn1_layers: 1,
            rnn2_layers: 1,
            attention: AttentionPath::Banded,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SirnLayerParams {
    pub config: SirnConfig,
    /// Global gate.
    pub rnn1: GruParams,
    /// Trend aggregator.
    pub rnn2: GruParams,
    pub mha: MhaParams,
    pub band: BandMask,
    /// Seasonal convolution (kernel `[d, d, k]`, bias `[d]`) per distillation step.
    pub seasonal: Vec<(ParamId, ParamId)>,
    /// Output projection `[d, d]`.
    pub w_out: ParamId,
}

impl SirnLayerParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: SirnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.eta == 0 {
            return Err(Error::InvalidArgument("distillation depth must be at least 1".into()));
        }
        if config.decomp_kernel % 2 == 0 || config.seasonal_kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "decomposition and seasonal kernels must be odd, got {} and {}",
                config.decomp_kernel, config.seasonal_kernel
            )));
        }
        let d = config.d;
        let band = BandMask::new(config.window)?;
        let rnn1 = GruParams::new(store, &format!("{prefix}.rnn1"), d, d, config.rnn1_layers, rng)?;
        let rnn2 = GruParams::new(store, &format!("{prefix}.rnn2"), d, d, config.rnn2_layers, rng)?;
        let mha = MhaParams::new(store, &format!("{prefix}.mha"), d, config.heads, rng)?;
        let cb = 1.0 / ((d * config.seasonal_kernel) as f64).sqrt();
        let seasonal = (0..config.eta)
            .map(|l| {
                (
                    store.add(
                        format!("{prefix}.seasonal{l}.kernel"),
                        Tensor::uniform([d, d, config.seasonal_kernel], cb, rng),
                    ),
                    store.add(format!("{prefix}.seasonal{l}.bias"), Tensor::zeros([d])),
                )
            })
            .collect();
        let wb = (3.0 / d as f64).sqrt();
        let w_out = store.add(format!("{prefix}.w_out"), Tensor::uniform([d, d], wb, rng));
        Ok(SirnLayerParams {
            config,
            rnn1,
            rnn2,
            mha,
            band,
            seasonal,
            w_out,
        })
    }
}

/// One decomposition performed inside a layer.
#[derive(Clone, Debug)]
pub struct Decomposition<'t> {
    pub input: Var<'t>,
    pub trend: Var<'t>,
    pub seasonal: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct SirnOutput<'t> {
    pub x_out: Var<'t>,
    /// Hidden sequence of each layer of the gating GRU, bottom first.
    pub flow_states: Vec<Var<'t>>,
    /// Every decomposition in order: the initial one, then one per distillation step.
    pub decompositions: Vec<Decomposition<'t>>,
}

/// Gating, windowed attention, recurrent seasonal-trend distillation and
/// fusion over `x: [B, L, d]`.
pub fn sirn_layer_forward<'t>(
    x: Var<'t>,
    params: &SirnLayerParams,
    p: &Bound<'t>,
) -> Result<SirnOutput<'t>> {
    let cfg = &params.config;
    let attend = |v: Var<'t>| sliding_window_mha(v, &params.mha, p, &params.band, cfg.attention);

    let gate_rnn = gru_forward(x, &params.rnn1, p, None)?;
    let g = gate_rnn.outputs.softmax(2)?;
    let x1 = g.mul(x)?.add(attend(x)?)?.add(x)?;

    let mut decompositions = Vec::with_capacity(cfg.eta + 1);
    let (t0, s0) = series_decompose(x1, cfg.decomp_kernel)?;
    decompositions.push(Decomposition { input: x1, trend: t0, seasonal: s0 });
    let local = attend(x1)?;
    let mut trend_sum = t0;
    let mut seasonal = s0;
    for &(kernel, bias) in &params.seasonal {
        let input = seasonal.conv1d(p.var(kernel), p.var(bias))?.add(local)?;
        let (t, s) = series_decompose(input, cfg.decomp_kernel)?;
        decompositions.push(Decomposition { input, trend: t, seasonal: s });
        trend_sum = trend_sum.add(t)?;
        seasonal = s;
    }
    let trend_rnn = gru_forward(trend_sum, &params.rnn2, p, None)?;
    let x_out = seasonal.add(trend_rnn.outputs)?.matmul(p.var(params.w_out))?;
    Ok(SirnOutput {
        x_out,
        flow_states: gate_rnn.states,
        decompositions,
    })
}
