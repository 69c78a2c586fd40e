//! Sample boundary groups from an untrained policy in both modes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reinpatch::partition::boundary_compression_rate;
use reinpatch::policy::{log_prob, policy_entropy, sample_group, PatchPolicy, PolicyConfig, PolicyMode};

fn main() -> reinpatch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..32).map(|t| if t < 20 { 0.0 } else { 2.0 } + (t as f64 * 0.7).sin() * 0.1).collect();
    for mode in [PolicyMode::Contextual, PolicyMode::Causal] {
        let cfg = PolicyConfig { mode, num_levels: 2, context_limit: 32, ..PolicyConfig::default() };
        let policy = PatchPolicy::new(cfg, &mut rng)?;
        let out = policy.forward(&x)?;
        println!("{mode:?}: entropy {:.3}, modal {:?}", policy_entropy(&out), out.modal().levels());
        for (b, lp) in sample_group(&out, 4, &mut rng)? {
            assert!((log_prob(&out, &b)? - lp).abs() < 1e-9);
            println!("  {:?} log p {lp:.3} rate {:.2}", b.levels(), boundary_compression_rate(&b, 1));
        }
    }
    Ok(())
}
