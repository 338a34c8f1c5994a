//! Write the default planted-glyph dataset and a ready-to-use train.cfg.
//!
//! cargo run --example synth_dataset -- /tmp/glyphs

use std::path::PathBuf;

use fghash::pipeline::cmd_synth;
use fghash::synth::{read_boxes, SyntheticSpec};

fn main() -> fghash::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("fghash_glyphs"));
    let spec = SyntheticSpec::default();
    let (out, cfg) = cmd_synth(&spec, &dir)?;
    println!("{} images under {}", out.images.len(), dir.display());
    println!("manifest: {}", out.manifest.display());
    println!("config:   {}", cfg.display());
    for (path, b) in read_boxes(&out.boxes)?.iter().take(4) {
        println!(
            "{}  glyph at ({:.0}, {:.0})-({:.0}, {:.0})",
            path.file_name().unwrap().to_string_lossy(),
            b.x_min,
            b.y_min,
            b.x_max,
            b.y_max
        );
    }
    Ok(())
}
