//! End-to-end runs driven by a [`RunConfig`]: data, models, training and
//! test-split evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, ForecastWindow};
use crate::config::{DataConfig, RunConfig};
use crate::data::{load_csv, synth_piecewise, Dataset, SeriesTable, Split};
use crate::error::{invalid_arg, Error, Result};
use crate::eval::{evaluate, EvalReport, Patcher};
use crate::persistence::load_patcher;
use crate::policy::PatchPolicy;
use crate::trainer::{StepMetrics, Trainer};

/// Piecewise-constant toy table, one independent series per channel.
pub fn synth_table(cfg: &DataConfig) -> Result<SeriesTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.synth_seed);
    let mut channels = Vec::with_capacity(cfg.synth_channels);
    for _ in 0..cfg.synth_channels.max(1) {
        let mut series = Vec::new();
        while series.len() < cfg.synth_length {
            let (chunk, _) = synth_piecewise(
                16,
                cfg.synth_min_segment..=cfg.synth_max_segment.max(cfg.synth_min_segment),
                cfg.synth_noise,
                &mut rng,
            )?;
            series.extend(chunk);
        }
        series.truncate(cfg.synth_length);
        channels.push(series);
    }
    let names = (0..channels.len()).map(|c| format!("x{c}")).collect();
    SeriesTable::from_channels(names, channels)
}

pub fn load_dataset(cfg: &DataConfig) -> Result<Dataset> {
    let mut table = if cfg.path.is_empty() {
        synth_table(cfg)?
    } else {
        load_csv(&cfg.path)?
    };
    if !cfg.channels.is_empty() {
        let mut names = Vec::new();
        let mut channels = Vec::new();
        for name in &cfg.channels {
            let col = table
                .channel(name)
                .ok_or_else(|| Error::Config(format!("data.channels: no column `{name}`")))?;
            names.push(name.clone());
            channels.push(col.to_vec());
        }
        table.names = names;
        table.channels = channels;
    }
    Dataset::new(cfg.name.clone(), table, cfg.split_spec()?, cfg.zscore)
}

/// Fresh policy (or the frozen pretrained one) and backbone, initialized
/// from `train.seed`.
pub fn build_trainer(cfg: &RunConfig) -> Result<Trainer> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let policy = if cfg.patcher.pretrained.is_empty() {
        PatchPolicy::new(cfg.policy.clone(), &mut rng)?
    } else {
        load_patcher(&cfg.patcher.pretrained, true)?
    };
    let backbone = Backbone::new(cfg.backbone.clone(), &mut rng)?;
    let mut trainer = Trainer::new(policy, backbone, cfg.train.clone(), cfg.compression()?)?;
    if let Some(p) = cfg.patcher.fixed()? {
        trainer = trainer.with_patcher(p);
    }
    Ok(trainer)
}

pub fn split_windows(cfg: &RunConfig, ds: &Dataset, split: Split) -> Result<Vec<ForecastWindow>> {
    let stride = match split {
        Split::Train => cfg.data.train_stride,
        _ => cfg.data.eval_stride,
    };
    ds.windows(split, cfg.backbone.lookback, cfg.backbone.horizon, stride)
}

/// Train on the train split. `on_epoch` sees the trainer after every epoch.
pub fn fit(
    cfg: &RunConfig,
    ds: &Dataset,
    on_epoch: impl FnMut(&Trainer) -> Result<()>,
) -> Result<(Trainer, Vec<StepMetrics>)> {
    let mut trainer = build_trainer(cfg)?;
    let history = resume(&mut trainer, cfg, ds, on_epoch)?;
    Ok((trainer, history))
}

/// Continue training an existing trainer on the train split.
pub fn resume(
    trainer: &mut Trainer,
    cfg: &RunConfig,
    ds: &Dataset,
    on_epoch: impl FnMut(&Trainer) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    let windows = split_windows(cfg, ds, Split::Train)?;
    trainer.train(&windows, on_epoch)
}

/// The patcher a trained run evaluates with.
pub fn run_patcher<'a>(trainer: &'a Trainer, cfg: &RunConfig) -> Result<Patcher<'a>> {
    Ok(match &trainer.patcher {
        Some(p) => Patcher::Fixed(p),
        None => Patcher::Learned {
            policy: &trainer.policy,
            selection: cfg.patcher.selection(cfg.compression.target_rate)?,
        },
    })
}

pub fn evaluate_split(trainer: &Trainer, cfg: &RunConfig, ds: &Dataset, split: Split) -> Result<EvalReport> {
    let windows = split_windows(cfg, ds, split)?;
    if trainer.backbone.config().lookback != cfg.backbone.lookback
        || trainer.backbone.config().horizon != cfg.backbone.horizon
    {
        return Err(invalid_arg("trainer lookback/horizon differ from the run config"));
    }
    evaluate(&trainer.backbone, run_patcher(trainer, cfg)?, &trainer.compression, &windows, cfg.train.seed)
}
