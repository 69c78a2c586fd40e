//! Group-relative policy gradient on a two-step bandit: reward 1 iff step 0
//! closes a patch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reinpatch::nn::{AdamW, AdamWConfig};
use reinpatch::policy::{PatchPolicy, PolicyConfig};
use reinpatch::trainer::{AdvantageMode, PolicyRollouts};

fn main() -> reinpatch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = PolicyConfig { d_patch: 8, depth: 1, heads: 2, context_limit: 2, ..PolicyConfig::default() };
    let mut policy = PatchPolicy::new(cfg, &mut rng)?;
    let mut opt = AdamW::new(AdamWConfig::with_lr(1e-2), policy.params());
    let x = [0.3, -0.4];
    for step in 0..=1000u64 {
        let rollouts = PolicyRollouts::sample(&policy, &[&x], 8, step, &mut rng)?;
        let rewards = vec![rollouts.samples()[0].iter().map(|(b, _)| f64::from(b.levels()[0] >= 1)).collect()];
        let update = rollouts.finish(&policy, rewards, AdvantageMode::Standardize, 1e-8, 0.0)?;
        opt.step(policy.params_mut(), &update.grads)?;
        if step % 200 == 0 {
            let row = policy.forward(&x)?.logits().row(0).to_vec();
            let p = 1.0 / (1.0 + (row[0] - row[1]).exp());
            println!("step {step:>4}: P(boundary at 0) {p:.3} entropy {:.3}", update.entropy);
        }
    }
    Ok(())
}
