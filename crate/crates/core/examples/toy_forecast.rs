//! Joint training on piecewise-constant toy data, compared with static
//! patching under the same backbone and step budget.
//!
//! cargo run --release --example toy_forecast -- [seed] [steps] [section.key=value ...]

use std::time::Instant;

use reinpatch::config::RunConfig;
use reinpatch::data::Split;
use reinpatch::pipeline::{evaluate_split, fit, load_dataset};

fn main() -> reinpatch::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed = args.first().and_then(|s| s.parse().ok()).unwrap_or(0);
    let steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1500);

    let mut cfg = RunConfig::toy();
    cfg.train.seed = seed;
    cfg.train.max_steps = steps;
    for kv in args.iter().skip(2) {
        cfg.set(kv)?;
    }
    let ds = load_dataset(&cfg.data)?;

    for kind in ["reinpatch", "static"] {
        cfg.patcher.kind = kind.into();
        let t0 = Instant::now();
        let (trainer, history) = fit(&cfg, &ds, |_| Ok(()))?;
        let tail = &history[history.len().saturating_sub(50)..];
        let raw = tail.iter().map(|m| m.raw_compression).sum::<f64>() / tail.len() as f64;
        let loss = tail.iter().map(|m| m.backbone_loss).sum::<f64>() / tail.len() as f64;
        let test = evaluate_split(&trainer, &cfg, &ds, Split::Test)?;
        println!(
            "{kind:>9}: test mse {:.4} mae {:.4} (rate {:.2}) | train loss {loss:.4}, raw rate {raw:.2} | {:.1}s",
            test.mse,
            test.mae,
            test.compression,
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
