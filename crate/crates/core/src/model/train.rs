use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::metrics::evaluate;
use super::network::{Batch, Conformer};
use super::optim::Adam;
use crate::dataio::{
    fit_stats, split, standardize, windows_in_range, SeriesFrame, SplitRanges, SplitSpec, StandardizeStats,
    WindowSample,
};
use crate::error::{Error, Result};
use crate::numcore::Tape;

/// Offsets separating the random streams derived from one seed.
const TRAIN_STREAM: u64 = 0x7472_6169_6e00;
const EVAL_STREAM: u64 = 0x6576_616c_0000;

/// Standardized frame, its statistics and the windows of each split.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub frame: SeriesFrame,
    pub stats: StandardizeStats,
    pub ranges: SplitRanges,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

/// Splits `raw`, fits statistics on the training rows and cuts windows
/// (training windows at `config.train_stride`, the others at stride 1).
pub fn prepare_data(raw: &SeriesFrame, split_spec: &SplitSpec, config: &ModelConfig) -> Result<PreparedData> {
    let spec = config.window_spec()?;
    if raw.len() < spec.total_len() {
        return Err(Error::Data(format!(
            "series too short: {} rows, need at least {} (input {} + horizon {})",
            raw.len(),
            spec.total_len(),
            spec.input_len,
            spec.pred_len
        )));
    }
    let ranges = split(raw, split_spec)?;
    let stats = fit_stats(raw, ranges.train.clone())?;
    let frame = standardize(raw, &stats)?;
    let cut = |r: Range<usize>, stride: usize| windows_in_range(&frame, spec, r, stride, config.mode);
    let train = cut(ranges.train.clone(), config.train_stride)?;
    let val = cut(ranges.val.clone(), 1)?;
    let test = cut(ranges.test.clone(), 1)?;
    for (name, w, r) in [("train", &train, &ranges.train), ("validation", &val, &ranges.val)] {
        if w.is_empty() {
            return Err(Error::Data(format!(
                "{name} split ({} rows) holds no complete window of horizon {}",
                r.len(),
                spec.pred_len
            )));
        }
    }
    Ok(PreparedData {
        frame,
        stats,
        ranges,
        train,
        val,
        test,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: Conformer,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Fresh random stream for validation, identical every epoch.
pub fn eval_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(EVAL_STREAM))
}

pub fn train(model: Conformer, train: &[WindowSample], val: &[WindowSample]) -> Result<TrainOutcome> {
    train_with(model, train, val, |_| {})
}

/// Adam over seeded shuffled batches with early stopping on validation fused MSE.
pub fn train_with(
    mut model: Conformer,
    train: &[WindowSample],
    val: &[WindowSample],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training needs non-empty train and validation splits".into()));
    }
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(TRAIN_STREAM));
    let mut adam = Adam::new(model.store(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Conformer)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&WindowSample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = Batch::new(&samples)?;
            let tape = Tape::new();
            let p = model.store().bind(&tape);
            let trunk = model.trunk(&tape, &p, &batch)?;
            let noise = model.sample_noise(&trunk, &mut rng);
            let z = model.flow_draw(&trunk, &p, &noise)?;
            let loss = model.loss(trunk.y_dec, z, tape.constant(batch.target.clone()))?;
            let value = loss.value().item();
            if !value.is_finite() {
                log::error!("non-finite training loss at epoch {epoch}, batch {}", bi + 1);
                return Err(Error::NonFinite("training loss"));
            }
            let grads = p.gradients(&tape.backward(loss)?);
            adam.update(model.store_mut(), &grads)?;
            loss_sum += value * chunk.len() as f64;
        }
        let (metrics, _) = evaluate(&model, val, cfg.eval_samples, &mut eval_rng(cfg.seed))?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_mse: metrics.fused.mse,
            val_mae: metrics.fused.mae,
        };
        log::info!(
            "epoch {epoch}: train loss {:.6}, val mse {:.6}, val mae {:.6}",
            record.train_loss,
            record.val_mse,
            record.val_mae
        );
        on_epoch(&record);
        history.push(record);
        let improved = best.as_ref().is_none_or(|(b, _, _)| record.val_mse < *b);
        if improved {
            best = Some((record.val_mse, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    match best {
        Some((_, best_epoch, model)) => Ok(TrainOutcome {
            model,
            history,
            best_epoch,
        }),
        None => Ok(TrainOutcome {
            model,
            history,
            best_epoch: 0,
        }),
    }
}
