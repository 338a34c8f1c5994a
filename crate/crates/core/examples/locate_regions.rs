//! Print the selected region of each tap for a few synthetic queries, with
//! IoU against the planted glyph.
//!
//! cargo run --example locate_regions -- [model.ckpt]

use std::path::Path;

use fghash::checkpoint;
use fghash::data::Split;
use fghash::geometry::iou;
use fghash::model::{Model, ModelConfig};
use fghash::synth::{generate, SyntheticSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fghash::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(p) => checkpoint::load(Path::new(&p))?.0,
        None => Model::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(1))?,
    };
    let data = generate(&SyntheticSpec::default())?;
    for item in data.split(Split::Query).take(4) {
        let g = item.glyph_box;
        println!(
            "label {}  glyph ({:.0},{:.0})-({:.0},{:.0})",
            item.label, g.x_min, g.y_min, g.x_max, g.y_max
        );
        for p in model.locate(&item.sample().image)? {
            let b = p.bbox;
            println!(
                "  layer {} cell {:?}  ({:.0},{:.0})-({:.0},{:.0})  IoU {:.2}",
                p.layer_id,
                p.grid_index,
                b.x_min,
                b.y_min,
                b.x_max,
                b.y_max,
                iou(&b, &g)
            );
        }
    }
    Ok(())
}
