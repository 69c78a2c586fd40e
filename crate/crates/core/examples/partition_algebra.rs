//! Boundary vectors, partitions and minimum-compression enforcement.

use reinpatch::partition::{
    boundaries_to_partition, compression_rate, enforce_min_compression, nested_partitions, BoundaryVector,
    CompressionConfig,
};

fn main() -> reinpatch::Result<()> {
    // Two levels: 2 closes a patch at both levels, 1 only at the first.
    let b = BoundaryVector::new(vec![1, 0, 2, 1, 0, 1, 0, 0, 2, 0, 1, 0], 2)?;
    for level in 1..=2 {
        let p = boundaries_to_partition(&b, level)?;
        println!("level {level}: spans {:?} rate {:.2}", p.spans(), compression_rate(&p));
    }
    for (l, p) in nested_partitions(&b, 2)?.iter().enumerate() {
        println!("nested level {}: {:?}", l + 1, p.spans());
    }

    let cfg = CompressionConfig::new(3.0)?.with_level_rates(vec![6.0])?;
    let e = enforce_min_compression(&b, &cfg);
    println!("enforced {:?} (from {:?})", e.levels(), b.levels());
    for level in 1..=2 {
        let p = boundaries_to_partition(&e, level)?;
        println!("level {level}: spans {:?} rate {:.2}", p.spans(), compression_rate(&p));
    }
    Ok(())
}
