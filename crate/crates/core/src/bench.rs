//! Attention microbenchmark with an allocation-counting global allocator.

use std::alloc::{GlobalAlloc, Layout, System};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{banded_mha_fast, sliding_window_mha_dense, BandMask, MhaParams};
use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tensor};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static INSTALLED: AtomicUsize = AtomicUsize::new(0);

/// System allocator that tracks live and peak heap bytes.
///
/// Install it with `#[global_allocator]` in a binary to get nonzero
/// `peak_bytes` from [`bench_attention`].
pub struct CountingAlloc;

impl CountingAlloc {
    fn grow(size: usize) {
        let now = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
        PEAK.fetch_max(now, Ordering::Relaxed);
    }
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(1, Ordering::Relaxed);
        let p = System.alloc(layout);
        if !p.is_null() {
            Self::grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(1, Ordering::Relaxed);
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            Self::grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size >= layout.size() {
                Self::grow(new_size - layout.size());
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

/// Whether a [`CountingAlloc`] serves this process.
pub fn allocation_tracking() -> bool {
    drop(std::hint::black_box(vec![0u8; 1]));
    INSTALLED.load(Ordering::Relaxed) == 1
}

/// Peak live bytes above the level at the start of `f`.
pub fn measure_peak<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let out = f();
    (out, PEAK.load(Ordering::Relaxed).saturating_sub(base))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchVariant {
    /// Band-only kernel, `O(w·L)`.
    Banded,
    /// Full score matrix with a band mask, `O(L²)`.
    Dense,
}

impl BenchVariant {
    pub fn name(self) -> &'static str {
        match self {
            BenchVariant::Banded => "banded",
            BenchVariant::Dense => "dense",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub trials: usize,
    pub warmup: usize,
    pub window: usize,
    pub d: usize,
    pub heads: usize,
    /// Trials are split into this many groups for the median of means.
    pub groups: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![512, 1024, 2048, 4096],
            trials: 20,
            warmup: 10,
            window: 32,
            d: 32,
            heads: 2,
            groups: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub len: usize,
    pub variant: BenchVariant,
    /// Median over groups of the mean wall time per call.
    pub mean_ms: f64,
    /// Peak heap growth during one call; 0 without a [`CountingAlloc`].
    pub peak_bytes: usize,
}

/// Median of the means of `groups` contiguous slices of `samples`.
pub fn median_of_means(samples: &[f64], groups: usize) -> f64 {
    let groups = groups.clamp(1, samples.len().max(1));
    let size = samples.len() / groups;
    if size == 0 {
        return f64::NAN;
    }
    let mut means: Vec<f64> = (0..groups)
        .map(|g| {
            let chunk = if g + 1 == groups { &samples[g * size..] } else { &samples[g * size..(g + 1) * size] };
            chunk.iter().sum::<f64>() / chunk.len() as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let m = means.len();
    if m % 2 == 1 {
        means[m / 2]
    } else {
        0.5 * (means[m / 2 - 1] + means[m / 2])
    }
}

/// Times windowed self-attention on `[L, d]` inputs for both kernels.
///
/// Each kernel is timed in its own phase. Within a phase the trials are
/// interleaved across lengths, so a slow period on the machine affects all
/// lengths alike. Rows are ordered banded first, then dense.
pub fn bench_attention(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.trials == 0 || cfg.lengths.is_empty() {
        return Err(Error::InvalidArgument("bench needs at least one length and one trial".into()));
    }
    let band = BandMask::new(cfg.window)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let params = MhaParams::new(&mut store, "bench", cfg.d, cfg.heads, &mut rng)?;
    let inputs: Vec<Tensor> = cfg.lengths.iter().map(|&len| Tensor::randn([len, cfg.d], 1.0, &mut rng)).collect();
    let run = |i: usize, variant: BenchVariant| match variant {
        BenchVariant::Banded => banded_mha_fast(&inputs[i], &params, &store, &band),
        BenchVariant::Dense => sliding_window_mha_dense(&inputs[i], &params, &store, &band),
    };

    let mut cells = Vec::new();
    let mut peaks = Vec::new();
    let mut times = Vec::new();
    for variant in [BenchVariant::Banded, BenchVariant::Dense] {
        let mut samples = vec![Vec::with_capacity(cfg.trials); inputs.len()];
        for i in 0..inputs.len() {
            for _ in 0..cfg.warmup {
                std::hint::black_box(run(i, variant)?);
            }
            let (out, peak) = measure_peak(|| run(i, variant));
            std::hint::black_box(out?);
            peaks.push(peak);
            cells.push((i, variant));
        }
        for _ in 0..cfg.trials {
            for (i, s) in samples.iter_mut().enumerate() {
                let t = Instant::now();
                let out = run(i, variant)?;
                s.push(t.elapsed().as_secs_f64() * 1e3);
                std::hint::black_box(out);
            }
        }
        times.extend(samples);
    }

    let rows = cells
        .iter()
        .zip(times.iter().zip(peaks))
        .map(|(&(i, variant), (samples, peak_bytes))| {
            let row = BenchRow {
                len: cfg.lengths[i],
                variant,
                mean_ms: median_of_means(samples, cfg.groups),
                peak_bytes,
            };
            log::info!("L={} {}: {:.3} ms, peak {} B", row.len, variant.name(), row.mean_ms, peak_bytes);
            row
        })
        .collect();
    Ok(rows)
}

/// `T(L_next) / T(L)` for consecutive lengths of one variant.
pub fn time_ratios(rows: &[BenchRow], variant: BenchVariant) -> Vec<(usize, usize, f64)> {
    let v: Vec<&BenchRow> = rows.iter().filter(|r| r.variant == variant).collect();
    v.windows(2)
        .map(|p| (p[0].len, p[1].len, p[1].mean_ms / p[0].mean_ms))
        .collect()
}

/// Columns `L, variant, mean_ms, peak_bytes`.
pub fn write_bench_csv(path: impl AsRef<Path>, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["L", "variant", "mean_ms", "peak_bytes"])?;
    for r in rows {
        w.write_record([
            r.len.to_string(),
            r.variant.name().to_string(),
            format!("{:?}", r.mean_ms),
            r.peak_bytes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
