//! Seed-aggregated comparison table for the fixed patchers.

use reinpatch::config::RunConfig;
use reinpatch::data::Split;
use reinpatch::eval::{emit_table, ResultRow};
use reinpatch::pipeline::{evaluate_split, fit, load_dataset};

fn main() -> reinpatch::Result<()> {
    let mut cfg = RunConfig::toy();
    cfg.data.synth_length = 6000;
    cfg.train.max_steps = 200;
    cfg.patcher.rate = 16.0;
    let ds = load_dataset(&cfg.data)?;
    let mut rows = Vec::new();
    for kind in ["static", "random", "variance"] {
        cfg.patcher.kind = kind.into();
        for seed in 0..3 {
            cfg.train.seed = seed;
            let (t, _) = fit(&cfg, &ds, |_| Ok(()))?;
            let r = evaluate_split(&t, &cfg, &ds, Split::Test)?;
            rows.push(ResultRow {
                method: kind.into(),
                dataset: cfg.data.name.clone(),
                lookback: cfg.backbone.lookback,
                horizon: cfg.backbone.horizon,
                seed,
                mse: r.mse,
                mae: r.mae,
            });
        }
    }
    let (_, text) = emit_table(&rows)?;
    print!("{text}");
    Ok(())
}
