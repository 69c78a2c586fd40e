//! Train briefly, export the policy, then reuse it frozen with a fresh
//! backbone.

use reinpatch::config::RunConfig;
use reinpatch::data::Split;
use reinpatch::persistence::save_patcher;
use reinpatch::pipeline::{build_trainer, evaluate_split, fit, load_dataset, split_windows};

fn main() -> reinpatch::Result<()> {
    let dir = std::env::temp_dir().join("reinpatch-foundation");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("patcher.rpf");

    let mut cfg = RunConfig::toy();
    cfg.data.synth_length = 6000;
    cfg.train.max_steps = 150;
    let ds = load_dataset(&cfg.data)?;
    let (source, _) = fit(&cfg, &ds, |_| Ok(()))?;
    save_patcher(&source.policy, &path)?;
    println!("exported {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());

    cfg.patcher.pretrained = path.display().to_string();
    cfg.train.seed = 1;
    let mut reuse = build_trainer(&cfg)?;
    let before = reuse.policy.params().clone();
    let history = reuse.train(&split_windows(&cfg, &ds, Split::Train)?, |_| Ok(()))?;
    println!(
        "frozen reuse: backbone loss {:.4} -> {:.4}, policy unchanged: {}",
        history[0].backbone_loss,
        history[history.len() - 1].backbone_loss,
        reuse.policy.params() == &before
    );
    let report = evaluate_split(&reuse, &cfg, &ds, Split::Test)?;
    println!("test mse {:.4} mae {:.4} at rate {:.2}", report.mse, report.mae, report.compression);
    Ok(())
}
