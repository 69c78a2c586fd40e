//! Fixed patchers on a step signal.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reinpatch::baselines::{FixedPatcher, DEFAULT_VARIANCE_WINDOW};

fn main() -> reinpatch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..64).map(|t| if (20..44).contains(&t) { 3.0 } else { 0.0 }).collect();
    let patchers = [
        FixedPatcher::Static { patch_size: 16 },
        FixedPatcher::Random { rate: 16.0 },
        FixedPatcher::Variance { rate: 16.0, window: DEFAULT_VARIANCE_WINDOW },
    ];
    for p in patchers {
        let part = p.partition(&x, &mut rng)?;
        println!("{:>8}: {:?}", p.name(), part.spans());
    }
    Ok(())
}
