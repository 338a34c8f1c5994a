//! Encode a small synthetic set, evaluate retrieval, persist the codes.
//!
//! Pass a checkpoint written by `fghash train` to use trained weights;
//! without one a randomly initialized model is used and MAP sits near
//! chance.
//!
//! cargo run --example encode_and_evaluate -- [model.ckpt]

use std::path::Path;

use fghash::checkpoint;
use fghash::data::Split;
use fghash::model::{Model, ModelConfig};
use fghash::pipeline::database_from;
use fghash::retrieval::{EvalOptions, Metrics, Queries};
use fghash::synth::{generate, SyntheticSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fghash::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(p) => checkpoint::load(Path::new(&p))?.0,
        None => Model::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(1))?,
    };
    let data = generate(&SyntheticSpec {
        num_classes: model.config.num_classes,
        train_per_class: 6,
        query_per_class: 3,
        ..SyntheticSpec::default()
    })?;
    let db = database_from(&model, &data.samples(Split::Train))?;
    let queries = database_from(&model, &data.samples(Split::Query))?;
    let metrics = Metrics::compute(
        &Queries::new(queries.codes(), queries.labels())?,
        &db,
        &EvalOptions::default(),
    )?;
    println!("database {} codes, {} queries", db.len(), queries.len());
    println!("MAP {:.4}  P@r3 {:.4}", metrics.map, metrics.p_at_radius);

    let path = std::env::temp_dir().join("fghash_synth.codes");
    db.save(&path)?;
    println!("codes written to {}", path.display());
    Ok(())
}
