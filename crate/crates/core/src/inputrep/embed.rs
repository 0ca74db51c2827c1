use std::rc::Rc;

use rand::Rng;

use crate::dataio::{CalendarFeature, Scale};
use crate::error::{Error, Result};
use crate::numcore::{Bound, ParamId, ParamStore, Tensor, Var};

/// Per-scale calendar lookup tables mixed across time, plus a bias.
#[derive(Clone, Debug)]
pub struct MultiscaleEmbed {
    scales: Vec<Scale>,
    /// `E_k: [cardinality_k, d]`
    tables: Vec<ParamId>,
    /// `W_k: [L, L]`
    mix: Vec<ParamId>,
    /// `b_S: [L, d]`
    bias: ParamId,
    len: usize,
    d: usize,
}

impl MultiscaleEmbed {
    /// Tables start as `N(0, 1/d)`, mixing matrices as identity, bias at zero.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        scales: &[Scale],
        len: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let mut tables = Vec::new();
        let mut mix = Vec::new();
        for s in scales {
            let name = format!("{s:?}").to_lowercase();
            tables.push(store.add(
                format!("{prefix}.table.{name}"),
                Tensor::randn([s.cardinality(), d], std, rng),
            ));
            mix.push(store.add(format!("{prefix}.mix.{name}"), Tensor::eye(len)));
        }
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros([len, d]));
        MultiscaleEmbed {
            scales: scales.to_vec(),
            tables,
            mix,
            bias,
            len,
            d,
        }
    }

    pub fn scales(&self) -> &[Scale] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn table_id(&self, k: usize) -> ParamId {
        self.tables[k]
    }

    pub fn mix_id(&self, k: usize) -> ParamId {
        self.mix[k]
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    /// `sum_k W_k E_k[codes_k] + b_S` for each sequence of marks; output `[B, L, d]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, marks: &[&[CalendarFeature]]) -> Result<Var<'t>> {
        if marks.is_empty() {
            return Err(Error::InvalidArgument("empty batch of calendar marks".into()));
        }
        if let Some(m) = marks.iter().find(|m| m.len() != self.len) {
            return Err(Error::shape(
                "multiscale_embedding",
                format!("{} marks for an embedding sized to length {}", m.len(), self.len),
            ));
        }
        let b = marks.len();
        let bias = p.var(self.bias);
        let mut acc: Option<Var<'t>> = None;
        for (k, s) in self.scales.iter().enumerate() {
            let codes: Rc<[usize]> = marks.iter().flat_map(|m| m.iter().map(|f| s.code(f))).collect();
            let g = bias
                .tape()
                .embedding(p.var(self.tables[k]), codes, &[b, self.len])?;
            let mixed = p.var(self.mix[k]).matmul(g)?;
            acc = Some(match acc {
                Some(a) => a.add(mixed)?,
                None => mixed,
            });
        }
        match acc {
            Some(a) => a.add(bias),
            None => bias
                .reshape(&[1, self.len, self.d])?
                .broadcast_axis(0, b),
        }
    }
}
