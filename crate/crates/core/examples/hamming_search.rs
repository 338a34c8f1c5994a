//! Build a code database, query it, persist it and score retrieval.

use fghash::retrieval::{CodeDatabase, EvalOptions, Metrics, PackedCode, Queries};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BITS: usize = 32;

/// Four class prototypes; members flip a few bits of theirs.
fn noisy_codes(rng: &mut ChaCha8Rng, per_class: usize, flips: usize) -> (Vec<Vec<i8>>, Vec<usize>) {
    let mut proto = ChaCha8Rng::seed_from_u64(99);
    let protos: Vec<Vec<i8>> = (0..4)
        .map(|_| (0..BITS).map(|_| if proto.gen() { 1 } else { -1 }).collect())
        .collect();
    let mut codes = Vec::new();
    let mut labels = Vec::new();
    for (c, p) in protos.iter().enumerate() {
        for _ in 0..per_class {
            let mut code = p.clone();
            for _ in 0..flips {
                let j = rng.gen_range(0..BITS);
                code[j] = -code[j];
            }
            codes.push(code);
            labels.push(c + 1);
        }
    }
    (codes, labels)
}

fn main() -> fghash::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (db_codes, db_labels) = noisy_codes(&mut rng, 25, 4);
    let (q_codes, q_labels) = noisy_codes(&mut rng, 5, 4);
    let db = CodeDatabase::from_signs(BITS, &db_codes, db_labels)?;

    let q = PackedCode::pack(&q_codes[0]);
    let top = db.query(&q, 5)?;
    println!("query 0 (label {}): {:?}", q_labels[0], top.items);

    let path = std::env::temp_dir().join("fghash_demo.codes");
    db.save(&path)?;
    assert_eq!(CodeDatabase::load(&path)?, db);
    println!("saved {} codes to {}", db.len(), path.display());

    let packed: Vec<PackedCode> = q_codes.iter().map(|c| PackedCode::pack(c)).collect();
    let metrics = Metrics::compute(&Queries::new(&packed, &q_labels)?, &db, &EvalOptions::default())?;
    println!("{}", metrics.to_json());
    Ok(())
}
