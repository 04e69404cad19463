//! Deterministic streaming summation.
//!
//! Every inner product in the crate goes through [`PairwiseSum`], whose
//! result depends only on the sequence of summands, never on how that
//! sequence is split into calls. Summands are grouped into fixed leaves of
//! [`LEAF`] elements; inside a leaf element `q` goes to lane `q % LANES`,
//! and finished leaves are merged as a binary tree keyed by leaf index.
//! Feeding a vector in blocks of 1 024 or 1 048 576 elements therefore
//! produces bit-identical totals, and independent accumulators can be run
//! on any thread without changing the answer.

pub const LEAF: usize = 256;
const LANES: usize = 8;

#[derive(Clone, Debug)]
pub struct PairwiseSum {
    lanes: [f64; LANES],
    /// Elements consumed in the current leaf.
    filled: usize,
    /// Completed subtrees as (level, sum), oldest first.
    stack: Vec<(u32, f64)>,
}

impl Default for PairwiseSum {
    fn default() -> Self {
        Self::new()
    }
}

impl PairwiseSum {
    pub fn new() -> Self {
        Self {
            lanes: [0.0; LANES],
            filled: 0,
            stack: Vec::new(),
        }
    }

    /// Accumulates `sum(a[i] * b[i])`.
    pub fn add_products(&mut self, a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len(), "add_products length mismatch");
        let mut a = a;
        let mut b = b;
        while !a.is_empty() {
            // Finish a misaligned lane position one element at a time.
            while self.filled % LANES != 0 && !a.is_empty() {
                self.lanes[self.filled % LANES] += a[0] * b[0];
                a = &a[1..];
                b = &b[1..];
                self.advance(1);
            }
            if a.is_empty() {
                break;
            }
            let room = LEAF - self.filled;
            let take = room.min(a.len());
            let whole = take - take % LANES;
            if whole > 0 {
                // A local copy keeps the lanes in registers.
                let mut lanes = self.lanes;
                for (xa, xb) in a[..whole]
                    .chunks_exact(LANES)
                    .zip(b[..whole].chunks_exact(LANES))
                {
                    for l in 0..LANES {
                        lanes[l] += xa[l] * xb[l];
                    }
                }
                self.lanes = lanes;
                a = &a[whole..];
                b = &b[whole..];
                self.advance(whole);
            } else {
                // Fewer than LANES elements remain in the input.
                for (xa, xb) in a.iter().zip(b) {
                    self.lanes[self.filled % LANES] += xa * xb;
                    self.advance(1);
                }
                break;
            }
        }
    }

    /// Accumulates `sum(a[i])`.
    pub fn add_values(&mut self, a: &[f64]) {
        for &x in a {
            self.lanes[self.filled % LANES] += x;
            self.advance(1);
        }
    }

    fn advance(&mut self, n: usize) {
        self.filled += n;
        debug_assert!(self.filled <= LEAF);
        if self.filled == LEAF {
            let leaf = fold_lanes(&self.lanes);
            self.lanes = [0.0; LANES];
            self.filled = 0;
            self.push(0, leaf);
        }
    }

    fn push(&mut self, mut level: u32, mut value: f64) {
        while let Some(&(top_level, top)) = self.stack.last() {
            if top_level != level {
                break;
            }
            self.stack.pop();
            value = top + value;
            level += 1;
        }
        self.stack.push((level, value));
    }

    pub fn total(&self) -> f64 {
        let mut acc = 0.0;
        for &(_, v) in &self.stack {
            acc += v;
        }
        if self.filled > 0 {
            acc += fold_lanes(&self.lanes);
        }
        acc
    }
}

#[inline]
fn fold_lanes(l: &[f64; LANES]) -> f64 {
    ((l[0] + l[1]) + (l[2] + l[3])) + ((l[4] + l[5]) + (l[6] + l[7]))
}

/// Deterministic inner product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = PairwiseSum::new();
    acc.add_products(a, b);
    acc.total()
}
