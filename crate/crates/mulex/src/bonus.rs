//! Exploration-bonus providers: an exact visit-count oracle over logical
//! states, and a SimHash pseudocount approximation over rendered frames.

use crate::env::{Frame, StateKey};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// SimHash input resolution after area-average downsampling.
pub const SIMHASH_SIDE: usize = 13;
/// Number of equal-width quantization bins over [0,1].
pub const SIMHASH_BINS: u32 = 10;
/// Length of the binary code in bits.
pub const SIMHASH_CODE_BITS: usize = 256;

/// Exact state-visit counter; bonus is 1/sqrt(N) after incrementing.
#[derive(Debug, Clone, Default)]
pub struct CountTable {
    counts: HashMap<StateKey, u64>,
}

/// Serializable snapshot of a counter, for experiment resumption.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountSnapshot(pub Vec<(StateKey, u64)>);

impl CountTable {
    pub fn new() -> CountTable {
        CountTable::default()
    }

    pub fn snapshot(&self) -> CountSnapshot {
        let mut entries: Vec<_> = self.counts.iter().map(|(k, &n)| (*k, n)).collect();
        entries.sort_by_key(|(k, _)| (k.agent_cell, k.flags, k.world_side == crate::env::WorldSide::Right));
        CountSnapshot(entries)
    }

    pub fn restore(snapshot: &CountSnapshot) -> CountTable {
        CountTable {
            counts: snapshot.0.iter().copied().collect(),
        }
    }

    /// Record one visit of `key` and return the bonus 1/sqrt(N(key)).
    pub fn observe_and_bonus(&mut self, key: StateKey) -> f64 {
        let n = self.counts.entry(key).or_insert(0);
        *n += 1;
        1.0 / (*n as f64).sqrt()
    }

    pub fn count(&self, key: &StateKey) -> u64 {
        self.counts.get(key).copied().unwrap_or(0)
    }

    pub fn distinct_states(&self) -> usize {
        self.counts.len()
    }
}

/// 256-bit SimHash code of a quantized, downsampled frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SimHashCode(pub [u64; 4]);

impl SimHashCode {
    fn from_signs(values: &Array1<f64>) -> SimHashCode {
        let mut words = [0u64; 4];
        for (i, &v) in values.iter().enumerate() {
            if v >= 0.0 {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        SimHashCode(words)
    }
}

/// Random-projection index with pseudocounts over hash codes.
///
/// The projection matrix is sampled once from the seed and immutable
/// thereafter; the same frame always maps to the same code.
#[derive(Debug, Clone)]
pub struct SimHashIndex {
    seed: u64,
    projection: Array2<f64>,
    code_counts: HashMap<SimHashCode, u64>,
}

impl SimHashIndex {
    pub fn new(seed: u64) -> SimHashIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = SIMHASH_SIDE * SIMHASH_SIDE;
        let projection = Array2::from_shape_fn((SIMHASH_CODE_BITS, dim), |_| {
            StandardNormal.sample(&mut rng)
        });
        SimHashIndex {
            seed,
            projection,
            code_counts: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Downsample to 13x13, quantize to 10 bins, project, take signs.
    pub fn code(&self, frame: &Frame) -> SimHashCode {
        let small = area_average_resize(frame, SIMHASH_SIDE, SIMHASH_SIDE);
        let quantized = small.mapv(|v| quantize(v) as f64);
        let flat = Array1::from_iter(quantized.iter().copied());
        let response = self.projection.dot(&flat);
        SimHashCode::from_signs(&response)
    }

    /// Record one occurrence of the frame's code, return 1/sqrt(count).
    pub fn observe_and_bonus(&mut self, frame: &Frame) -> f64 {
        let code = self.code(frame);
        let n = self.code_counts.entry(code).or_insert(0);
        *n += 1;
        1.0 / (*n as f64).sqrt()
    }

    pub fn count(&self, code: &SimHashCode) -> u64 {
        self.code_counts.get(code).copied().unwrap_or(0)
    }

    pub fn distinct_codes(&self) -> usize {
        self.code_counts.len()
    }

    pub fn snapshot(&self) -> SimHashSnapshot {
        let mut entries: Vec<_> = self.code_counts.iter().map(|(c, &n)| (*c, n)).collect();
        entries.sort_by_key(|(c, _)| c.0);
        SimHashSnapshot {
            seed: self.seed,
            counts: entries,
        }
    }

    pub fn restore(snapshot: &SimHashSnapshot) -> SimHashIndex {
        let mut index = SimHashIndex::new(snapshot.seed);
        index.code_counts = snapshot.counts.iter().copied().collect();
        index
    }
}

/// Serializable snapshot of a SimHash index (projection re-derived from seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimHashSnapshot {
    pub seed: u64,
    pub counts: Vec<(SimHashCode, u64)>,
}

fn quantize(v: f32) -> u32 {
    let b = (v.clamp(0.0, 1.0) * SIMHASH_BINS as f32) as u32;
    b.min(SIMHASH_BINS - 1)
}

/// Box-filter resize: each output pixel is the mean of the (fractionally
/// overlapping) input region it covers.
pub fn area_average_resize(frame: &Frame, out_rows: usize, out_cols: usize) -> Array2<f32> {
    let (rows, cols) = frame.pixels.dim();
    let ry = rows as f64 / out_rows as f64;
    let rx = cols as f64 / out_cols as f64;
    Array2::from_shape_fn((out_rows, out_cols), |(or, oc)| {
        let y0 = or as f64 * ry;
        let y1 = (or + 1) as f64 * ry;
        let x0 = oc as f64 * rx;
        let x1 = (oc + 1) as f64 * rx;
        let mut acc = 0.0f64;
        let mut area = 0.0f64;
        let mut r = y0.floor() as usize;
        while (r as f64) < y1 && r < rows {
            let hy = (y1.min((r + 1) as f64) - y0.max(r as f64)).max(0.0);
            let mut c = x0.floor() as usize;
            while (c as f64) < x1 && c < cols {
                let hx = (x1.min((c + 1) as f64) - x0.max(c as f64)).max(0.0);
                acc += frame.pixels[[r, c]] as f64 * hy * hx;
                area += hy * hx;
                c += 1;
            }
            r += 1;
        }
        (acc / area) as f32
    })
}
