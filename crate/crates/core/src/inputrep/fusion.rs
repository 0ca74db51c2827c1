use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Bound, ParamId, ParamStore, Tensor, Var};

/// Convolutional projection `W_v: [d, d_x, k_v]`, `b_v: [d]`.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl FusionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dx: usize,
        d: usize,
        kv: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kv % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "fusion kernel size must be odd, got {kv}"
            )));
        }
        let bound = 1.0 / ((dx * kv) as f64).sqrt();
        Ok(FusionParams {
            kernel: store.add(format!("{prefix}.kernel"), Tensor::uniform([d, dx, kv], bound, rng)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros([d])),
        })
    }
}

/// How the correlation term, the raw input and the calendar term are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputVariant {
    /// `conv(W_R X + X) + Γ`
    #[default]
    Full,
    /// `conv(W_R X + X)`
    NoGamma,
    /// `conv(X) + Γ`
    NoR,
    /// `conv(X)`
    NoRNoGamma,
    /// `conv(W_R X) + Γ`
    NoX,
    /// `conv(W_R X)`
    NoXNoGamma,
    /// `conv(W_Γ W_R X + X)`
    Method1,
    /// `conv(W_R X + W_Γ X)`
    Method2,
    /// `conv(W_R X + W_Γ X + X)`
    Method3,
    /// `conv(W_R X + X) ⊙ W_Γ`
    Method4,
}

impl InputVariant {
    pub const ALL: [InputVariant; 10] = [
        InputVariant::Full,
        InputVariant::NoGamma,
        InputVariant::NoR,
        InputVariant::NoRNoGamma,
        InputVariant::NoX,
        InputVariant::NoXNoGamma,
        InputVariant::Method1,
        InputVariant::Method2,
        InputVariant::Method3,
        InputVariant::Method4,
    ];

    /// Whether the calendar embedding enters the result.
    pub fn uses_gamma(self) -> bool {
        !matches!(
            self,
            InputVariant::NoGamma | InputVariant::NoRNoGamma | InputVariant::NoXNoGamma
        )
    }

    pub fn uses_correlation(self) -> bool {
        !matches!(self, InputVariant::NoR | InputVariant::NoRNoGamma)
    }
}

/// `L · softmax_time(Γ)`: a time weighting with mean one per channel.
fn gamma_weights<'t>(gamma_bar: Var<'t>) -> Result<Var<'t>> {
    let len = gamma_bar.shape()[1];
    gamma_bar.softmax(1)?.scale(len as f64)
}

/// Builds the model input `[B, L, d]` from `x: [B, L, d_x]`.
///
/// `w_r` holds one correlation matrix `[d_x, d_x]` or one per sample
/// `[B, d_x, d_x]`; it is treated as a constant. `gamma_bar` is the calendar
/// embedding `[B, L, d]` and may be `None` for variants that ignore it.
/// For Methods 1-3, `W_Γ X` reweights every input channel in time by the
/// channel-averaged profile of `L · softmax_time(Γ)`.
pub fn fuse_input<'t>(
    x: Var<'t>,
    w_r: &Tensor,
    fusion: &FusionParams,
    p: &Bound<'t>,
    gamma_bar: Option<Var<'t>>,
    variant: InputVariant,
) -> Result<Var<'t>> {
    let shape = x.shape();
    let [b, _, dx] = shape[..] else {
        return Err(Error::shape("fuse_input", format!("input must be [B, L, d_x], got {shape:?}")));
    };
    let tape = x.tape();
    let w_rt = match w_r.shape() {
        [r, c] if *r == dx && *c == dx => {
            let t = w_r.transpose_last2();
            Tensor::stack(&vec![t; b])?
        }
        [bb, r, c] if *bb == b && *r == dx && *c == dx => w_r.transpose_last2(),
        s => {
            return Err(Error::shape(
                "fuse_input",
                format!("correlation weights {s:?} for input {shape:?}"),
            ))
        }
    };
    let correlated = || x.matmul(tape.constant(w_rt.clone()));
    let gamma = || {
        gamma_bar.ok_or_else(|| {
            Error::InvalidArgument(format!("input variant {variant:?} needs the calendar embedding"))
        })
    };
    let time_gate = || -> Result<Var<'t>> {
        gamma_weights(gamma()?)?.mean_axis(2)?.broadcast_axis(2, dx)
    };
    let conv = |v: Var<'t>| v.conv1d(p.var(fusion.kernel), p.var(fusion.bias));

    let out = match variant {
        InputVariant::Full => conv(correlated()?.add(x)?)?.add(gamma()?)?,
        InputVariant::NoGamma => conv(correlated()?.add(x)?)?,
        InputVariant::NoR => conv(x)?.add(gamma()?)?,
        InputVariant::NoRNoGamma => conv(x)?,
        InputVariant::NoX => conv(correlated()?)?.add(gamma()?)?,
        InputVariant::NoXNoGamma => conv(correlated()?)?,
        InputVariant::Method1 => conv(time_gate()?.mul(correlated()?)?.add(x)?)?,
        InputVariant::Method2 => conv(correlated()?.add(time_gate()?.mul(x)?)?)?,
        InputVariant::Method3 => conv(correlated()?.add(time_gate()?.mul(x)?)?.add(x)?)?,
        InputVariant::Method4 => conv(correlated()?.add(x)?)?.mul(gamma_weights(gamma()?)?)?,
    };
    Ok(out)
}
