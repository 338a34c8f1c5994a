//! Train on the planted-glyph benchmark and report retrieval and
//! localization quality. The full preset takes several minutes on one core.
//!
//! cargo run --release --example train_synthetic -- [epochs] [checkpoint]

use std::path::Path;

use fghash::checkpoint;
use fghash::config::Config;
use fghash::data::Split;
use fghash::geometry::iou;
use fghash::pipeline::{database_from, train_model};
use fghash::retrieval::{Metrics, Queries};
use fghash::synth::{generate, SyntheticSpec};

fn main() -> fghash::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = Config::synthetic();
    if let Some(e) = args.next() {
        cfg.set("epochs", &e)?;
    }
    let data = generate(&SyntheticSpec::default())?;
    let train = data.samples(Split::Train);
    let model = train_model(&cfg, &train, |log| {
        if log.epoch % 10 == 0 {
            println!(
                "epoch {:>3}  cls {:.3}  rank {:.3}  loc {:.3}",
                log.epoch, log.l_cls, log.l_rank, log.l_loc
            );
        }
        Ok(())
    })?;

    let db = database_from(&model, &train)?;
    let queries: Vec<_> = data.split(Split::Query).collect();
    let qdb = database_from(&model, &queries.iter().map(|i| i.sample()).collect::<Vec<_>>())?;
    let metrics = Metrics::compute(&Queries::new(qdb.codes(), qdb.labels())?, &db, &cfg.eval)?;
    let mut hits = 0;
    for item in &queries {
        let regions = model.locate(&item.sample().image)?;
        if iou(&regions[0].bbox, &item.glyph_box) >= 0.3 {
            hits += 1;
        }
    }
    println!("MAP {:.4}", metrics.map);
    println!("finest-layer IoU >= 0.3 on {hits}/{} queries", queries.len());

    if let Some(path) = args.next() {
        checkpoint::save(Path::new(&path), &model, &cfg)?;
        println!("checkpoint written to {path}");
    }
    Ok(())
}
