use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use conformer_core::bench::{bench_attention, time_ratios, write_bench_csv, BenchConfig, BenchVariant};
use conformer_core::dataio::{
    csv_columns, load_csv, split, standardize, synth_generate, windows_in_range, write_csv, Interval, SeriesFrame,
    SplitSpec,
};
use conformer_core::model::{
    eval_rng, evaluate, persistence_metrics, predict as predict_windows, prepare_data, target_columns, train_with,
    write_forecast_csv, Checkpoint, Conformer, ModelDims, PredictedWindow, MANIFEST_FILE,
};

use crate::config::{load_config, parse_config_str, usage, RunConfig, SEED_ENV};
use crate::{BenchArgs, EvalArgs, ModelFlags, PredictArgs, SynthArgs, TrainArgs};

const CHECKPOINT_DIR: &str = "checkpoint";
const RUN_FILE: &str = "run.json";

pub fn synth(a: SynthArgs) -> Result<()> {
    let frame = synth_generate(a.seed, a.len, a.dx, &a.periods, a.trend_slope, a.noise)?;
    write_csv(&frame, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} rows x {} variables to {}", frame.len(), frame.num_vars(), a.out.display());
    Ok(())
}

/// Layers command-line overrides over `cfg`.
fn apply_flags(cfg: &mut RunConfig, f: &ModelFlags) -> Result<()> {
    macro_rules! set {
        ($($flag:ident => $dst:expr),* $(,)?) => {
            $(if let Some(v) = f.$flag.clone() { $dst = v; })*
        };
    }
    if let Some(d) = &f.data {
        cfg.data = Some(d.clone());
    }
    if let Some(t) = &f.target {
        cfg.target = Some(t.clone());
    }
    if let Some(s) = &f.split_fractions {
        let [a, b, c] = s[..] else {
            return usage(format!("--split-fractions needs three fractions, got {}", s.len()));
        };
        cfg.split = SplitSpec::Fractions([a, b, c]);
    }
    if let Some(s) = &f.split_months {
        let [a, b, c] = s[..] else {
            return usage(format!("--split-months needs three counts, got {}", s.len()));
        };
        cfg.split = SplitSpec::Months([a, b, c]);
    }
    if f.interval_seconds.is_some() {
        cfg.interval_seconds = f.interval_seconds;
    }
    if f.token_len.is_some() {
        cfg.model.token_len = f.token_len;
    }
    let m = &mut cfg.model;
    set! {
        out_dir => cfg.out_dir,
        d => m.d,
        heads => m.heads,
        w => m.w,
        lambda => m.lambda,
        eta => m.eta,
        decomp_kernel => m.decomp_kernel,
        transforms => m.transforms,
        input_len => m.input_len,
        pred_len => m.pred_len,
        mode => m.mode,
        input_variant => m.input_variant,
        nf_variant => m.nf_variant,
        latent_encoder => m.latent.encoder,
        latent_decoder => m.latent.decoder,
        attention => m.attention,
        learning_rate => m.learning_rate,
        batch_size => m.batch_size,
        max_epochs => m.max_epochs,
        patience => m.patience,
        train_stride => m.train_stride,
        eval_samples => m.eval_samples,
        seed => m.seed,
    }
    Ok(())
}

/// Config file, then the seed environment variable, then flags; validated.
pub fn resolve(flags: &ModelFlags) -> Result<RunConfig> {
    let mut cfg = load_config(flags.config.as_deref(), std::env::var(SEED_ENV).ok())?;
    apply_flags(&mut cfg, flags)?;
    cfg.model.validate()?;
    Ok(cfg)
}

fn load_frame(path: &Path, target: Option<&str>, interval: Option<i64>) -> Result<SeriesFrame> {
    let target = match target {
        Some(t) => t.to_string(),
        None => csv_columns(path)?
            .pop()
            .with_context(|| format!("{} has no value columns", path.display()))?,
    };
    let interval = interval.map_or(Interval::Infer, Interval::Seconds);
    Ok(load_csv(path, &target, interval)?)
}

fn require_data(cfg: &RunConfig) -> Result<PathBuf> {
    match &cfg.data {
        Some(p) => Ok(p.clone()),
        None => usage("no input data: pass --data or set \"data\" in the config"),
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve(&a.flags)?;
    let data_path = require_data(&cfg)?;
    let raw = load_frame(&data_path, cfg.target.as_deref(), cfg.interval_seconds)?;
    cfg.target = Some(raw.target_name().to_string());
    let prepared = prepare_data(&raw, &cfg.split, &cfg.model)?;
    log::info!(
        "{} train, {} validation, {} test windows",
        prepared.train.len(),
        prepared.val.len(),
        prepared.test.len()
    );
    let model = Conformer::new(cfg.model.clone(), ModelDims::for_frame(&raw, cfg.model.mode))?;
    let outcome = train_with(model, &prepared.train, &prepared.val, |_| {})?;

    let out = &cfg.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let ckpt = Checkpoint {
        model: outcome.model,
        stats: prepared.stats,
        variable_names: raw.variable_names().to_vec(),
        target_index: raw.target_index(),
    };
    ckpt.save(&ckpt_dir)?;
    fs::write(ckpt_dir.join(RUN_FILE), serde_json::to_string_pretty(&cfg)?)?;

    let mut history = String::from("epoch,train_loss,val_mse,val_mae\n");
    for r in &outcome.history {
        history.push_str(&format!("{},{:?},{:?},{:?}\n", r.epoch, r.train_loss, r.val_mse, r.val_mae));
    }
    fs::write(out.join("history.csv"), history)?;
    let best = outcome.history.iter().find(|r| r.epoch == outcome.best_epoch);
    println!(
        "trained {} epochs (best {}, validation mse {}); checkpoint in {}",
        outcome.history.len(),
        outcome.best_epoch,
        best.map_or("n/a".into(), |r| format!("{:.6}", r.val_mse)),
        ckpt_dir.display()
    );
    Ok(())
}

fn open_checkpoint(path: Option<&PathBuf>) -> Result<(PathBuf, Checkpoint)> {
    let Some(dir) = path else {
        return usage("missing --checkpoint <dir> (a directory written by `train`)");
    };
    if !dir.join(MANIFEST_FILE).is_file() {
        return usage(format!("no checkpoint found at {}", dir.display()));
    }
    Ok((dir.clone(), Checkpoint::load(dir)?))
}

/// Run settings saved with the checkpoint, overridden by flags.
fn run_config_for(ckpt_dir: &Path, flags: &ModelFlags) -> Result<RunConfig> {
    let mut cfg = if flags.config.is_some() {
        load_config(flags.config.as_deref(), None)?
    } else {
        match fs::read_to_string(ckpt_dir.join(RUN_FILE)) {
            Ok(text) => parse_config_str(&text)?,
            Err(_) => RunConfig::default(),
        }
    };
    apply_flags(&mut cfg, flags)?;
    Ok(cfg)
}

fn checkpoint_frame(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<SeriesFrame> {
    let path = require_data(cfg)?;
    let target = &ckpt.variable_names[ckpt.target_index];
    let raw = load_frame(&path, Some(target), cfg.interval_seconds)?;
    if raw.variable_names() != ckpt.variable_names.as_slice() {
        return Err(conformer_core::Error::Data(format!(
            "columns {:?} differ from the checkpoint's {:?}",
            raw.variable_names(),
            ckpt.variable_names
        ))
        .into());
    }
    Ok(raw)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (dir, ckpt) = open_checkpoint(a.checkpoint.as_ref())?;
    let cfg = run_config_for(&dir, &a.flags)?;
    let raw = checkpoint_frame(&ckpt, &cfg)?;
    let model = &ckpt.model;
    let mc = model.config();
    let ranges = split(&raw, &cfg.split)?;
    let range = match a.split.as_str() {
        "train" => ranges.train,
        "val" | "validation" => ranges.val,
        "test" => ranges.test,
        other => return usage(format!("unknown split '{other}' (train, val or test)")),
    };
    let frame = standardize(&raw, &ckpt.stats)?;
    let windows = windows_in_range(&frame, mc.window_spec()?, range.clone(), 1, mc.mode)?;
    if windows.is_empty() {
        return Err(conformer_core::Error::Data(format!(
            "split '{}' ({} rows) holds no complete window",
            a.split,
            range.len()
        ))
        .into());
    }
    let samples = a.samples.unwrap_or(mc.eval_samples);
    let (metrics, results) = evaluate(model, &windows, samples, &mut eval_rng(mc.seed))?;
    let columns = target_columns(mc.mode, raw.num_vars(), raw.target_index());
    let baseline = persistence_metrics(&windows, &columns)?;

    let out = a.out.clone().unwrap_or_else(|| dir.parent().unwrap_or(Path::new(".")).join("metrics.csv"));
    let mut text = String::from("split,head,mse,mae\n");
    for (head, m) in [
        ("decoder", metrics.decoder),
        ("flow", metrics.flow),
        ("fused", metrics.fused),
        ("persistence", baseline),
    ] {
        text.push_str(&format!("{},{head},{:?},{:?}\n", a.split, m.mse, m.mae));
        println!("{:<12} mse {:.6}  mae {:.6}", head, m.mse, m.mae);
    }
    fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
    if let Some(p) = &a.predictions {
        let saved: Vec<PredictedWindow> = windows
            .iter()
            .zip(results)
            .map(|(w, result)| PredictedWindow {
                start: w.start,
                result,
                target: Some(w.target.clone()),
            })
            .collect();
        write_forecast_csv(p, &saved, raw.variable_names(), &columns, None, true)?;
    }
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let (dir, ckpt) = open_checkpoint(a.checkpoint.as_ref())?;
    let flags = ModelFlags {
        data: a.data.clone(),
        ..Default::default()
    };
    let cfg = run_config_for(&dir, &flags)?;
    let raw = checkpoint_frame(&ckpt, &cfg)?;
    let mc = ckpt.model.config();
    let seed = match (a.seed, std::env::var(SEED_ENV).ok()) {
        (Some(s), _) => s,
        (None, Some(s)) => match s.trim().parse() {
            Ok(v) => v,
            Err(_) => return usage(format!("{SEED_ENV} must be an unsigned integer, got '{s}'")),
        },
        (None, None) => mc.seed,
    };
    let windows = predict_windows(&ckpt, &raw, a.samples, a.stride, &mut eval_rng(seed))?;
    let columns = target_columns(mc.mode, raw.num_vars(), raw.target_index());
    write_forecast_csv(&a.out, &windows, raw.variable_names(), &columns, Some(&ckpt.stats), false)?;
    println!("wrote {} forecast windows to {}", windows.len(), a.out.display());
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        lengths: a.lengths,
        trials: a.trials,
        warmup: a.warmup,
        window: a.w,
        d: a.d,
        heads: a.heads,
        ..Default::default()
    };
    let rows = bench_attention(&cfg)?;
    write_bench_csv(&a.out, &rows)?;
    for r in &rows {
        println!("L={:<6} {:<7} {:>10.3} ms  peak {} B", r.len, r.variant.name(), r.mean_ms, r.peak_bytes);
    }
    for v in [BenchVariant::Banded, BenchVariant::Dense] {
        for (l0, l1, ratio) in time_ratios(&rows, v) {
            println!("{} T({l1})/T({l0}) = {ratio:.2}", v.name());
        }
    }
    Ok(())
}
