use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{LayerChoice, ModelConfig};
use crate::attention::{mha, MhaParams};
use crate::dataio::{scales_for_interval, CalendarFeature, ForecastMode, Scale, SeriesFrame, WindowSample};
use crate::error::{Error, Result};
use crate::inputrep::{fuse_input, multivariate_correlation, FusionParams, MultiscaleEmbed};
use crate::normflow::{flow_forecast, flow_sample, FlowNoise, FlowParams};
use crate::numcore::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::sirn::{sirn_layer_forward, SirnConfig, SirnLayerParams};

/// Data-dependent sizes fixed when a model is built.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    /// Input variables `d_x`.
    pub num_vars: usize,
    /// Forecast variables `d_t`.
    pub target_width: usize,
    /// Calendar scales of the embedding.
    pub scales: Vec<Scale>,
}

impl ModelDims {
    /// Sizes for `frame` under `mode`, with calendar scales chosen by its interval.
    pub fn for_frame(frame: &SeriesFrame, mode: ForecastMode) -> Self {
        ModelDims {
            num_vars: frame.num_vars(),
            target_width: mode.target_width(frame.num_vars()),
            scales: scales_for_interval(frame.interval_seconds()),
        }
    }
}

/// One window's forecast, `[L_y, d_t]` per field.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastResult {
    pub y_dec: Tensor,
    pub z_out: Tensor,
    pub variance: Tensor,
    /// `λ·y_dec + (1−λ)·z_out`
    pub fused: Tensor,
}

/// Stacked inputs of several windows.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, L_x, d_x]`
    pub enc_x: Tensor,
    /// `[B, L_tok + L_y, d_x]`
    pub dec_x: Tensor,
    /// Per-window correlation weights `[B, d_x, d_x]`.
    pub w_r: Tensor,
    pub enc_marks: Vec<Vec<CalendarFeature>>,
    pub dec_marks: Vec<Vec<CalendarFeature>>,
    /// `[B, L_y, d_t]`
    pub target: Tensor,
}

impl Batch {
    pub fn new(samples: &[&WindowSample]) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let w_r = samples
            .iter()
            .map(|s| Ok(multivariate_correlation(&s.enc_x)?.w_r))
            .collect::<Result<Vec<_>>>()?;
        let stack = |f: fn(&WindowSample) -> &Tensor| {
            let parts: Vec<Tensor> = samples.iter().map(|s| f(s).clone()).collect();
            Tensor::stack(&parts)
        };
        Ok(Batch {
            enc_x: stack(|s| &s.enc_x)?,
            dec_x: stack(|s| &s.dec_x)?,
            w_r: Tensor::stack(&w_r)?,
            enc_marks: samples.iter().map(|s| s.enc_marks.clone()).collect(),
            dec_marks: samples.iter().map(|s| s.dec_marks.clone()).collect(),
            target: stack(|s| &s.target)?,
        })
    }

    pub fn len(&self) -> usize {
        self.enc_x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything the trunk produces on one tape.
#[derive(Clone, Debug)]
pub struct TrunkOutput<'t> {
    /// Decoder head `[B, L_y, d_t]`.
    pub y_dec: Var<'t>,
    /// Encoder flow state `[B, L_x, d]`.
    pub h_e: Var<'t>,
    /// Decoder flow state `[B, L_dec, d]`.
    pub h_d: Var<'t>,
}

#[derive(Clone, Debug)]
struct Stack {
    fusion: FusionParams,
    embed: MultiscaleEmbed,
    layers: Vec<SirnLayerParams>,
}

/// Encoder, decoder, cross-attention bridge, linear head and flow head over a
/// single parameter store.
#[derive(Clone, Debug)]
pub struct Conformer {
    config: ModelConfig,
    dims: ModelDims,
    store: ParamStore,
    encoder: Stack,
    decoder: Stack,
    cross: MhaParams,
    head_w: ParamId,
    head_b: ParamId,
    flow: FlowParams,
}

impl Conformer {
    /// Builds freshly initialized parameters from `config.seed`.
    pub fn new(config: ModelConfig, dims: ModelDims) -> Result<Self> {
        config.validate()?;
        if dims.num_vars == 0 || dims.target_width == 0 || dims.scales.is_empty() {
            return Err(Error::InvalidArgument(format!("invalid model dimensions {dims:?}")));
        }
        if dims.target_width != config.mode.target_width(dims.num_vars) {
            return Err(Error::InvalidArgument(format!(
                "target width {} does not match {:?} mode over {} variables",
                dims.target_width, config.mode, dims.num_vars
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = &config;
        let sirn = |gru_layers: usize| SirnConfig {
            d: c.d,
            heads: c.heads,
            window: c.w,
            eta: c.eta,
            decomp_kernel: c.decomp_kernel,
            seasonal_kernel: c.seasonal_kernel,
            rnn1_layers: gru_layers,
            rnn2_layers: gru_layers,
            attention: c.attention,
        };
        let mut stack = |store: &mut ParamStore, name: &str, len: usize, layers: usize, gru: usize| -> Result<Stack> {
            Ok(Stack {
                fusion: FusionParams::new(store, &format!("{name}.fusion"), dims.num_vars, c.d, c.fusion_kernel, &mut rng)?,
                embed: MultiscaleEmbed::new(store, &format!("{name}.embed"), &dims.scales, len, c.d, &mut rng),
                layers: (0..layers)
                    .map(|i| SirnLayerParams::new(store, &format!("{name}.sirn{i}"), sirn(gru), &mut rng))
                    .collect::<Result<_>>()?,
            })
        };
        let encoder = stack(&mut store, "encoder", c.input_len, c.encoder_layers, 1)?;
        let decoder = stack(&mut store, "decoder", c.decoder_len(), c.decoder_layers, c.decoder_gru_layers())?;
        let cross = MhaParams::new(&mut store, "cross", c.d, c.heads, &mut rng)?;
        let hb = 1.0 / (c.d as f64).sqrt();
        let head_w = store.add("head.w", Tensor::uniform([c.d, dims.target_width], hb, &mut rng));
        let head_b = store.add("head.b", Tensor::zeros([dims.target_width]));
        let flow = FlowParams::new(&mut store, "flow", c.d, dims.target_width, c.transforms, &mut rng);
        Ok(Conformer {
            config,
            dims,
            store,
            encoder,
            decoder,
            cross,
            head_w,
            head_b,
            flow,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// The decoder's final linear map (weight, bias).
    pub fn head_ids(&self) -> [ParamId; 2] {
        [self.head_w, self.head_b]
    }

    /// The flow's output projection (weight, bias).
    pub fn flow_projection_ids(&self) -> [ParamId; 2] {
        [self.flow.proj_w, self.flow.proj_b]
    }

    pub fn flow_params(&self) -> &FlowParams {
        &self.flow
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let c = &self.config;
        let b = batch.len();
        let want = [
            ("encoder input", batch.enc_x.shape(), vec![b, c.input_len, self.dims.num_vars]),
            ("decoder input", batch.dec_x.shape(), vec![b, c.decoder_len(), self.dims.num_vars]),
            ("target", batch.target.shape(), vec![b, c.pred_len, self.dims.target_width]),
        ];
        for (what, got, expect) in want {
            if got != expect.as_slice() {
                return Err(Error::shape("forward", format!("{what} {got:?}, expected {expect:?}")));
            }
        }
        Ok(())
    }

    fn run_stack<'t>(
        &self,
        stack: &Stack,
        x: &Tensor,
        marks: &[Vec<CalendarFeature>],
        w_r: &Tensor,
        p: &Bound<'t>,
        tape: &'t Tape,
        choice: LayerChoice,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let variant = self.config.input_variant;
        let gamma = if variant.uses_gamma() {
            let refs: Vec<&[CalendarFeature]> = marks.iter().map(Vec::as_slice).collect();
            Some(stack.embed.forward(p, &refs)?)
        } else {
            None
        };
        let mut h = fuse_input(tape.constant(x.clone()), w_r, &stack.fusion, p, gamma, variant)?;
        let mut states = Vec::new();
        for layer in &stack.layers {
            let out = sirn_layer_forward(h, layer, p)?;
            states.extend(out.flow_states);
            h = out.x_out;
        }
        let state = match choice {
            LayerChoice::First => states[0],
            LayerChoice::Last => states[states.len() - 1],
        };
        Ok((h, state))
    }

    /// Encoder, decoder, bridge and decoder head on a tape.
    pub fn trunk<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &Batch) -> Result<TrunkOutput<'t>> {
        self.check_batch(batch)?;
        let c = &self.config;
        let (enc_out, h_e) = self.run_stack(
            &self.encoder,
            &batch.enc_x,
            &batch.enc_marks,
            &batch.w_r,
            p,
            tape,
            c.latent.encoder,
        )?;
        let (dec, h_d) = self.run_stack(
            &self.decoder,
            &batch.dec_x,
            &batch.dec_marks,
            &batch.w_r,
            p,
            tape,
            c.latent.decoder,
        )?;
        let bridged = mha(dec, enc_out, &self.cross, p, None)?.add(dec)?;
        let y = bridged.matmul(p.var(self.head_w))?.add(p.var(self.head_b))?;
        let y_dec = y.narrow(1, c.token_len(), c.pred_len)?;
        Ok(TrunkOutput { y_dec, h_e, h_d })
    }

    /// One reparameterized flow draw, or `None` when the flow is disabled.
    pub fn flow_draw<'t>(&self, trunk: &TrunkOutput<'t>, p: &Bound<'t>, noise: &FlowNoise) -> Result<Option<Var<'t>>> {
        flow_sample(
            trunk.h_e,
            trunk.h_d,
            &self.flow,
            p,
            noise,
            self.config.nf_variant,
            self.config.pred_len,
        )
    }

    /// Fresh standard-normal noise matching a trunk's flow states.
    pub fn sample_noise<R: Rng + ?Sized>(&self, trunk: &TrunkOutput<'_>, rng: &mut R) -> FlowNoise {
        FlowNoise::sample(&trunk.h_e.shape(), &trunk.h_d.shape(), rng)
    }

    /// `λ·MSE(y_dec, Y) + (1−λ)·MSE(z_out, Y)`; without a flow `z_out` is `y_dec`.
    pub fn loss<'t>(&self, y_dec: Var<'t>, z_out: Option<Var<'t>>, target: Var<'t>) -> Result<Var<'t>> {
        let lambda = self.config.lambda;
        let dec = y_dec.mse(target)?;
        let flow = match z_out {
            Some(z) => z.mse(target)?,
            None => dec,
        };
        dec.scale(lambda)?.add(flow.scale(1.0 - lambda)?)
    }

    /// Training loss on a tape with the given flow noise.
    pub fn batch_loss<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &Batch, noise: Option<&FlowNoise>) -> Result<Var<'t>> {
        let trunk = self.trunk(tape, p, batch)?;
        let noise = match noise {
            Some(n) => n.clone(),
            None => FlowNoise::zeros(&trunk.h_e.shape(), &trunk.h_d.shape()),
        };
        let z = self.flow_draw(&trunk, p, &noise)?;
        self.loss(trunk.y_dec, z, tape.constant(batch.target.clone()))
    }

    /// Inference: one trunk pass, `n_samples` flow draws per window.
    pub fn forecast<R: Rng + ?Sized>(&self, batch: &Batch, n_samples: usize, rng: &mut R) -> Result<Vec<ForecastResult>> {
        let tape = Tape::new();
        let p = self.store.bind_constant(&tape);
        let trunk = self.trunk(&tape, &p, batch)?;
        let y_dec = trunk.y_dec.value();
        let flow = flow_forecast(
            &trunk.h_e.value(),
            &trunk.h_d.value(),
            &self.store,
            &self.flow,
            self.config.nf_variant,
            self.config.pred_len,
            n_samples,
            rng,
        )?;
        let (z_out, variance) = match flow {
            Some(f) => (f.mean, f.variance),
            None => ((*y_dec).clone(), Tensor::zeros(y_dec.shape().to_vec())),
        };
        if !y_dec.is_finite() || !z_out.is_finite() {
            return Err(Error::NonFinite("forecast"));
        }
        let lambda = self.config.lambda;
        let fused = y_dec.zip_map(&z_out, |y, z| lambda * y + (1.0 - lambda) * z)?;
        Ok((0..batch.len())
            .map(|i| ForecastResult {
                y_dec: y_dec.select(0, i),
                z_out: z_out.select(0, i),
                variance: variance.select(0, i),
                fused: fused.select(0, i),
            })
            .collect())
    }
}
