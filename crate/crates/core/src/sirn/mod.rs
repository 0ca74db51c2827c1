//! Recurrent layer combining GRU gating, windowed attention and repeated
//! moving-average seasonal-trend decomposition.

mod gru;
mod layer;

pub use gru::{gru_forward, GruLayer, GruOutput, GruParams};
pub use layer::{
    series_decompose, sirn_layer_forward, Decomposition, SirnConfig, SirnLayerParams, SirnOutput,
};
