#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stopwise::dataset::{parse_dense, LabeledDataset};

/// Two-class CSV with a few informative, partly redundant columns and one
/// noise column.
pub fn synthetic_csv(n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("a,b,c,d,noise,label\n");
    for _ in 0..n {
        let y: f64 = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        let a = y + rng.gen_range(-0.8..0.8);
        let b = a + rng.gen_range(-0.3..0.3);
        let c = 0.8 * y + rng.gen_range(-1.0..1.0);
        let d = c + rng.gen_range(-0.5..0.5);
        let noise: f64 = rng.gen_range(0.0..1.0);
        let label = if y > 0.5 { "pos" } else { "neg" };
        out.push_str(&format!("{a:.4},{b:.4},{c:.4},{d:.4},{noise:.4},{label}\n"));
    }
    out
}

pub fn synthetic(n: usize, seed: u64) -> LabeledDataset {
    parse_dense(synthetic_csv(n, seed).as_bytes()).unwrap()
}
