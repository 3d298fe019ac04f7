//! Partial-sum tree over event rates.
//!
//! Leaves hold rates; every internal node is recomputed as `left + right` on
//! update, so an incrementally maintained tree is bit-identical to one rebuilt
//! from the same leaves.

#[derive(Clone, Debug, PartialEq)]
pub struct EventTable {
    len: usize,
    cap: usize,
    tree: Vec<f64>,
}

impl EventTable {
    pub fn new(rates: &[f64]) -> Self {
        let cap = rates.len().max(1).next_power_of_two();
        let mut tree = vec![0.0; 2 * cap];
        tree[cap..cap + rates.len()].copy_from_slice(rates);
        let mut t = EventTable {
            len: rates.len(),
            cap,
            tree,
        };
        t.rebuild();
        t
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn total(&self) -> f64 {
        self.tree[1]
    }

    #[inline]
    pub fn rate(&self, event: usize) -> f64 {
        self.tree[self.cap + event]
    }

    pub fn rates(&self) -> &[f64] {
        &self.tree[self.cap..self.cap + self.len]
    }

    #[inline]
    pub fn set(&mut self, event: usize, rate: f64) {
        debug_assert!(rate >= 0.0 && rate.is_finite());
        let mut k = self.cap + event;
        if self.tree[k] == rate {
            return;
        }
        self.tree[k] = rate;
        while k > 1 {
            k >>= 1;
            self.tree[k] = self.tree[2 * k] + self.tree[2 * k + 1];
        }
    }

    /// Recomputes every internal node from the leaves.
    pub fn rebuild(&mut self) {
        for k in (1..self.cap).rev() {
            self.tree[k] = self.tree[2 * k] + self.tree[2 * k + 1];
        }
    }

    /// Event whose cumulative-rate interval contains `target` in `[0, total)`.
    /// Never returns a zero-rate event while the total is positive.
    #[inline]
    pub fn find(&self, mut target: f64) -> usize {
        let mut k = 1;
        while k < self.cap {
            let left = self.tree[2 * k];
            if target < left || self.tree[2 * k + 1] <= 0.0 {
                k *= 2;
            } else {
                target -= left;
                k = 2 * k + 1;
            }
        }
        k - self.cap
    }
}
