//! Enumerate the default anchors, score them at random, suppress overlaps.

use fghash::backbone::BackboneConfig;
use fghash::geometry::{generate_anchors, nms, AnchorSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> fghash::Result<()> {
    let backbone = BackboneConfig::default();
    let grids = backbone.grids()?;
    let mut anchors = generate_anchors(&grids, &AnchorSpec::default(), backbone.input_size, true)?;
    for l in 1..=3 {
        println!("layer {l}: {} anchors", anchors.count_in_layer(l));
    }
    println!("total: {}", anchors.len());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for p in &mut anchors.proposals {
        p.score = rng.gen();
    }
    let kept = nms(&anchors.layer(1), 0.25, 6);
    println!("\ntop 6 of layer 1 after suppression at IoU 0.25:");
    print!("{}", kept.to_csv());
    Ok(())
}
