//! Occupation variables `eta(x)` in `{0, 1}`.

/// One occupation bit per site, stored a byte per site for branch-free access.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Configuration {
    occupancy: Vec<u8>,
}

impl Configuration {
    /// Panics if any entry is not 0 or 1.
    pub fn from_occupancy(occupancy: Vec<u8>) -> Self {
        assert!(occupancy.iter().all(|&v| v <= 1), "occupation numbers must be 0 or 1");
        Configuration { occupancy }
    }

    pub fn empty(sites: usize) -> Self {
        Configuration {
            occupancy: vec![0; sites],
        }
    }

    pub fn full(sites: usize) -> Self {
        Configuration {
            occupancy: vec![1; sites],
        }
    }

    /// Site `i` is bit `i` of `mask`.
    pub fn from_bitmask(mask: u64, sites: usize) -> Self {
        Configuration {
            occupancy: (0..sites).map(|i| ((mask >> i) & 1) as u8).collect(),
        }
    }

    pub fn to_bitmask(&self) -> u64 {
        assert!(self.occupancy.len() <= 64);
        self.occupancy
            .iter()
            .enumerate()
            .fold(0u64, |m, (i, &v)| m | ((v as u64) << i))
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.is_empty()
    }

    #[inline]
    pub fn get(&self, site: usize) -> u8 {
        self.occupancy[site]
    }

    #[inline]
    pub fn is_occupied(&self, site: usize) -> bool {
        self.occupancy[site] == 1
    }

    pub fn occupancy(&self) -> &[u8] {
        &self.occupancy
    }

    /// `eta^{x,y}`: exchange the occupations of `x` and `y`.
    #[inline]
    pub fn swap(&mut self, x: usize, y: usize) {
        self.occupancy.swap(x, y);
    }

    /// `eta^x`: flip the occupation of `x`.
    #[inline]
    pub fn flip(&mut self, x: usize) {
        self.occupancy[x] ^= 1;
    }

    pub fn swapped(&self, x: usize, y: usize) -> Self {
        let mut c = self.clone();
        c.swap(x, y);
        c
    }

    pub fn flipped(&self, x: usize) -> Self {
        let mut c = self.clone();
        c.flip(x);
        c
    }

    pub fn particle_count(&self) -> usize {
        self.occupancy.iter().map(|&v| v as usize).sum()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.occupancy.iter().map(|&v| v as f64).collect()
    }
}
