//! Fuse four feature vectors through the gated ranker and binarize.

use fghash::ranker::{binarize, Ranker};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> fghash::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ranker = Ranker::new(8, 6, 16, &mut rng);
    let features: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();

    let projected = (0..4)
        .map(|i| ranker.project(i, &features[i]))
        .collect::<fghash::Result<Vec<_>>>()?;
    for (i, g) in ranker.gate_values(&projected)?.iter().enumerate() {
        println!("gate {i}: {:?}", g.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    }
    let fused = ranker.gated_fuse(&projected)?;
    let relaxed = ranker.hash_head(&fused)?;
    let code = binarize(&relaxed);
    println!("relaxed: {:?}", relaxed.iter().map(|v| format!("{v:+.2}")).collect::<Vec<_>>());
    println!("code:    {:?}", code);

    let refs: Vec<&[f64]> = features.iter().map(Vec::as_slice).collect();
    assert_eq!(ranker.forward(&refs)?.code, relaxed);
    Ok(())
}
