//! Inference-time budgets: top-k, expected-k and streaming thresholds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reinpatch::adaptation::{expected_k, expected_k_boundaries, topk_boundaries, StreamState};

fn count(flags: &[u8]) -> usize {
    flags.iter().map(|&f| f as usize).sum()
}

fn main() -> reinpatch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits: Vec<f64> = (0..96).map(|_| rng.random_range(-3.0..1.0)).collect();
    for rate in [4.0, 8.0, 16.0] {
        println!("top-k at rate {rate}: {} boundaries", count(&topk_boundaries(&logits, rate)?));
    }
    println!("expected k {:.2} -> {} boundaries", expected_k(&logits), count(&expected_k_boundaries(&logits)?));

    for rate in [2.0, 4.0, 8.0] {
        let mut window = StreamState::new(rate, 64)?;
        let mut ema = StreamState::with_ema(rate, 0.02, 64)?;
        let (mut a, mut b) = (0u32, 0u32);
        for _ in 0..10_000 {
            let l: f64 = rng.random_range(-3.0..3.0);
            a += u32::from(window.decide(l)?);
            b += u32::from(ema.decide(l)?);
        }
        println!("stream rate {rate}: window {:.4} ema {:.4} target {:.4}", a as f64 / 1e4, b as f64 / 1e4, 1.0 / rate);
    }

    // Rising logits always beat the trailing quantile.
    let mut s = StreamState::new(4.0, 16)?;
    let hits: u32 = (0..100).map(|t| s.decide(t as f64).map(u32::from)).sum::<reinpatch::Result<u32>>()?;
    println!("monotone stream: {hits}/100 boundaries");
    Ok(())
}
