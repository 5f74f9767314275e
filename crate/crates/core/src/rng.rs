//! Reproducible random streams and order-independent reductions.
//!
//! Every simulated path draws from its own ChaCha stream selected by
//! `(seed, path index)`, so serial and parallel runs produce identical paths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Generator for path `index` under `seed`.
pub fn path_stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Derives an independent seed for a labelled sub-computation.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, folded into the seed and finished with SplitMix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(seed ^ h)
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Pairwise summation with a fixed split order.
pub fn tree_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n if n <= 8 => xs.iter().sum(),
        n => {
            let (a, b) = xs.split_at(n / 2);
            tree_sum(a) + tree_sum(b)
        }
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl Estimate {
    /// Shifted by the first sample so that constant samples give their value exactly.
    pub fn from_samples(xs: &[f64]) -> Estimate {
        let n = xs.len();
        if n == 0 {
            return Estimate {
                mean: f64::NAN,
                std_err: f64::NAN,
                n: 0,
            };
        }
        let shift = xs[0];
        let centered: Vec<f64> = xs.iter().map(|x| x - shift).collect();
        let dm = tree_sum(&centered) / n as f64;
        let mean = shift + dm;
        let std_err = if n > 1 {
            let sq: Vec<f64> = centered.iter().map(|c| (c - dm) * (c - dm)).collect();
            (tree_sum(&sq) / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        Estimate { mean, std_err, n }
    }

    pub fn exact(value: f64) -> Estimate {
        Estimate {
            mean: value,
            std_err: 0.0,
            n: 1,
        }
    }
}
