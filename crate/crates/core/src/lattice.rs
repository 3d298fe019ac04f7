//! Cylinder geometry `{-N..N} x T^(d-1)`: indexing, bonds, faces and blocks.
//!
//! Sites are addressed by a dense row-major index with the axial coordinate
//! slowest, so every axial cross-section is a contiguous slice of
//! `transverse_size^(d-1)` indices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Behavioural revision recorded in run metadata.
pub const MODULE_VERSION: &str = "1.0.0";

/// Coordinates of a site: `coords[0]` is axial in `[-N, N]`, the rest are
/// transverse in `[0, transverse_size)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Site {
    pub coords: Vec<i64>,
}

/// Nearest-neighbor pair `(from, from + e_direction)`; `direction` is 0-based
/// with 0 the axial direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Bond {
    pub from: usize,
    pub to: usize,
    pub direction: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Face {
    Minus,
    Plus,
}

#[derive(Clone, Debug)]
pub struct CylinderLattice {
    dim: usize,
    half_length: usize,
    transverse_size: usize,
    slice_len: usize,
    bonds: Vec<Bond>,
    incident_offsets: Vec<usize>,
    incident: Vec<usize>,
}

impl PartialEq for CylinderLattice {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.half_length == other.half_length
            && self.transverse_size == other.transverse_size
    }
}

impl Eq for CylinderLattice {}

impl CylinderLattice {
    pub fn new(dim: usize, half_length: usize, transverse_size: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("dimension must be at least 1"));
        }
        if half_length == 0 {
            return Err(Error::domain("half-length N must be at least 1"));
        }
        if transverse_size == 0 {
            return Err(Error::domain("transverse size must be at least 1"));
        }
        let slice_len = transverse_size
            .checked_pow((dim - 1) as u32)
            .ok_or_else(|| Error::domain("lattice too large"))?;
        let mut lattice = CylinderLattice {
            dim,
            half_length,
            transverse_size,
            slice_len,
            bonds: Vec::new(),
            incident_offsets: Vec::new(),
            incident: Vec::new(),
        };
        lattice.bonds = lattice.enumerate_bonds();
        lattice.build_incidence();
        Ok(lattice)
    }

    /// Lattice with the transverse torus of side `N`.
    pub fn with_default_transverse(dim: usize, half_length: usize) -> Result<Self> {
        Self::new(dim, half_length, half_length)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `N`.
    pub fn half_length(&self) -> usize {
        self.half_length
    }

    pub fn transverse_size(&self) -> usize {
        self.transverse_size
    }

    /// Sites per axial cross-section, `transverse_size^(d-1)`.
    pub fn slice_len(&self) -> usize {
        self.slice_len
    }

    pub fn axial_len(&self) -> usize {
        2 * self.half_length + 1
    }

    pub fn site_count(&self) -> usize {
        self.axial_len() * self.slice_len
    }

    pub fn site_index(&self, coords: &[i64]) -> Result<usize> {
        if coords.len() != self.dim {
            return Err(Error::domain(format!(
                "expected {} coordinates, got {}",
                self.dim,
                coords.len()
            )));
        }
        let n = self.half_length as i64;
        let x1 = coords[0];
        if x1 < -n || x1 > n {
            return Err(Error::domain(format!("axial coordinate {x1} outside [-{n}, {n}]")));
        }
        let t = self.transverse_size as i64;
        let mut idx = (x1 + n) as usize;
        for &c in &coords[1..] {
            idx = idx * self.transverse_size + c.rem_euclid(t) as usize;
        }
        Ok(idx)
    }

    pub fn site(&self, index: usize) -> Site {
        let mut coords = vec![0; self.dim];
        self.coords_into(index, &mut coords);
        Site { coords }
    }

    pub fn coords_into(&self, index: usize, out: &mut [i64]) {
        debug_assert!(index < self.site_count());
        let mut rest = index % self.slice_len;
        for k in (1..self.dim).rev() {
            out[k] = (rest % self.transverse_size) as i64;
            rest /= self.transverse_size;
        }
        out[0] = self.axial(index);
    }

    /// Axial coordinate `x_1` of a site.
    #[inline]
    pub fn axial(&self, index: usize) -> i64 {
        (index / self.slice_len) as i64 - self.half_length as i64
    }

    /// Position of a site inside its cross-section.
    #[inline]
    pub fn transverse_offset(&self, index: usize) -> usize {
        index % self.slice_len
    }

    /// Macroscopic position: `x_1 / N` axially, `x_k / transverse_size` transversally.
    pub fn macro_position(&self, index: usize) -> Vec<f64> {
        let site = self.site(index);
        let mut u = Vec::with_capacity(self.dim);
        u.push(site.coords[0] as f64 / self.half_length as f64);
        u.extend(site.coords[1..].iter().map(|&c| c as f64 / self.transverse_size as f64));
        u
    }

    /// Neighbor across `direction` with `sign = +1 | -1`; `None` past an axial face.
    pub fn neighbor(&self, index: usize, direction: usize, sign: i64) -> Option<usize> {
        let mut coords = self.site(index).coords;
        coords[direction] += sign;
        self.site_index(&coords).ok()
    }

    /// Shifts a site by a transverse vector (length `d - 1`), wrapping on the torus.
    pub fn translate_transverse(&self, index: usize, shift: &[i64]) -> usize {
        let mut coords = self.site(index).coords;
        for (c, s) in coords[1..].iter_mut().zip(shift) {
            *c += s;
        }
        self.site_index(&coords).expect("transverse shifts keep the axial coordinate")
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    /// Indices into [`bonds`](Self::bonds) of the bonds touching `site`.
    pub fn incident_bonds(&self, site: usize) -> &[usize] {
        &self.incident[self.incident_offsets[site]..self.incident_offsets[site + 1]]
    }

    fn enumerate_bonds(&self) -> Vec<Bond> {
        let mut bonds = Vec::new();
        let mut coords = vec![0i64; self.dim];
        let n = self.half_length as i64;
        for from in 0..self.site_count() {
            self.coords_into(from, &mut coords);
            if coords[0] < n {
                bonds.push(Bond {
                    from,
                    to: from + self.slice_len,
                    direction: 0,
                });
            }
            for k in 1..self.dim {
                // With two points the forward and backward wraps are the same pair.
                let keep = match self.transverse_size {
                    1 => false,
                    2 => coords[k] == 0,
                    _ => true,
                };
                if keep {
                    let to = self.neighbor(from, k, 1).expect("transverse neighbors always exist");
                    bonds.push(Bond { from, to, direction: k });
                }
            }
        }
        bonds
    }

    fn build_incidence(&mut self) {
        let n = self.site_count();
        let mut counts = vec![0usize; n + 1];
        for b in &self.bonds {
            counts[b.from + 1] += 1;
            counts[b.to + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut incident = vec![0usize; counts[n]];
        for (id, b) in self.bonds.iter().enumerate() {
            incident[fill[b.from]] = id;
            fill[b.from] += 1;
            incident[fill[b.to]] = id;
            fill[b.to] += 1;
        }
        self.incident_offsets = counts;
        self.incident = incident;
    }

    /// Boundary `x_1 = ±N`, minus face first, each face in index order.
    pub fn boundary_sites(&self) -> Vec<usize> {
        let last = self.site_count() - self.slice_len;
        (0..self.slice_len).chain(last..self.site_count()).collect()
    }

    pub fn face_of(&self, index: usize) -> Option<Face> {
        let x1 = self.axial(index);
        let n = self.half_length as i64;
        if x1 == -n {
            Some(Face::Minus)
        } else if x1 == n {
            Some(Face::Plus)
        } else {
            None
        }
    }

    /// Sites within sup-distance `radius` of `center`, clipped at the faces and
    /// wrapped transversally (no duplicates), in index order.
    pub fn block(&self, center: usize, radius: usize) -> Vec<usize> {
        let c = self.site(center).coords;
        let n = self.half_length as i64;
        let r = radius as i64;
        let lo = (c[0] - r).max(-n);
        let hi = (c[0] + r).min(n);
        let axial: Vec<i64> = (lo..=hi).collect();
        let transverse: Vec<i64> = self.transverse_window(radius);
        let mut out = Vec::new();
        let mut coords = vec![0i64; self.dim];
        let tdim = self.dim - 1;
        let combos = transverse.len().pow(tdim as u32);
        for &x1 in &axial {
            coords[0] = x1;
            for combo in 0..combos {
                let mut rest = combo;
                for k in 1..self.dim {
                    coords[k] = c[k] + transverse[rest % transverse.len()];
                    rest /= transverse.len();
                }
                out.push(self.site_index(&coords).expect("axial range clipped"));
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Distinct transverse offsets within `radius`, accounting for the torus size.
    pub(crate) fn transverse_window(&self, radius: usize) -> Vec<i64> {
        let t = self.transverse_size;
        if 2 * radius + 1 >= t {
            // Whole circle: offsets 0..t cover every residue once.
            (0..t as i64).collect()
        } else {
            (-(radius as i64)..=radius as i64).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn site_index_examples() {
        let l = CylinderLattice::new(1, 2, 1).unwrap();
        assert_eq!(l.site_index(&[-2]).unwrap(), 0);
        let l = CylinderLattice::new(2, 1, 1).unwrap();
        assert_eq!(l.site_index(&[0, 0]).unwrap(), 1);
        let l = CylinderLattice::new(3, 2, 2).unwrap();
        // Row-major enumeration with x1 slowest.
        let mut order = Vec::new();
        for x1 in -2..=2 {
            for x2 in 0..2 {
                for x3 in 0..2 {
                    order.push(vec![x1, x2, x3]);
                }
            }
        }
        let pos = order.iter().position(|c| c == &vec![2, 1, 1]).unwrap();
        assert_eq!(pos, 19);
        assert_eq!(l.site_index(&[2, 1, 1]).unwrap(), 19);
    }

    #[test]
    fn site_index_rejects_axial_overflow_and_wraps_transverse() {
        let l = CylinderLattice::new(2, 2, 3).unwrap();
        assert!(matches!(l.site_index(&[3, 0]), Err(Error::Domain(_))));
        assert_eq!(l.site_index(&[0, -1]).unwrap(), l.site_index(&[0, 2]).unwrap());
    }

    #[test]
    fn index_round_trip() {
        let l = CylinderLattice::new(3, 2, 3).unwrap();
        for i in 0..l.site_count() {
            assert_eq!(l.site_index(&l.site(i).coords).unwrap(), i);
        }
    }

    #[test]
    fn bond_counts() {
        let l = CylinderLattice::new(1, 1, 1).unwrap();
        let pairs: Vec<_> = l.bonds().iter().map(|b| (l.axial(b.from), l.axial(b.to))).collect();
        assert_eq!(pairs, vec![(-1, 0), (0, 1)]);
        assert_eq!(CylinderLattice::new(2, 1, 2).unwrap().bonds().len(), 7);
        assert_eq!(CylinderLattice::new(3, 1, 1).unwrap().bonds().len(), 2);
    }

    #[test]
    fn bonds_are_unique_unordered_pairs() {
        for (d, n, t) in [(1, 3, 1), (2, 2, 2), (2, 2, 3), (3, 1, 4)] {
            let l = CylinderLattice::new(d, n, t).unwrap();
            let mut seen = HashSet::new();
            for b in l.bonds() {
                let key = (b.from.min(b.to), b.from.max(b.to));
                assert!(seen.insert(key), "duplicate bond {key:?}");
                assert_ne!(b.from, b.to);
            }
            let degree_sum: usize = (0..l.site_count()).map(|s| l.incident_bonds(s).len()).sum();
            assert_eq!(degree_sum, 2 * l.bonds().len());
        }
    }

    #[test]
    fn bonds_shift_covariant() {
        let l = CylinderLattice::new(3, 2, 3).unwrap();
        let set: HashSet<(usize, usize)> = l
            .bonds()
            .iter()
            .map(|b| (b.from.min(b.to), b.from.max(b.to)))
            .collect();
        let shifted: HashSet<(usize, usize)> = l
            .bonds()
            .iter()
            .map(|b| {
                let f = l.translate_transverse(b.from, &[1, 2]);
                let t = l.translate_transverse(b.to, &[1, 2]);
                (f.min(t), f.max(t))
            })
            .collect();
        assert_eq!(set, shifted);
    }

    #[test]
    fn interior_degrees() {
        let l = CylinderLattice::new(3, 2, 4).unwrap();
        for s in 0..l.site_count() {
            let axial = if l.face_of(s).is_some() { 1 } else { 2 };
            assert_eq!(l.incident_bonds(s).len(), axial + 2 * (l.dim() - 1));
        }
    }

    #[test]
    fn boundary_examples() {
        let l = CylinderLattice::new(1, 3, 1).unwrap();
        let b: Vec<i64> = l.boundary_sites().iter().map(|&s| l.axial(s)).collect();
        assert_eq!(b, vec![-3, 3]);
        assert_eq!(CylinderLattice::new(2, 2, 3).unwrap().boundary_sites().len(), 6);
        let l = CylinderLattice::new(3, 1, 2).unwrap();
        let b = l.boundary_sites();
        assert_eq!(b.len(), 8);
        let interior = (0..l.site_count()).filter(|&s| l.face_of(s).is_none()).count();
        assert_eq!(interior + b.len(), l.site_count());
    }

    #[test]
    fn block_examples() {
        let l = CylinderLattice::new(2, 2, 4).unwrap();
        let c = l.site_index(&[0, 0]).unwrap();
        assert_eq!(l.block(c, 0), vec![c]);
        assert_eq!(l.block(c, 1).len(), 9);
        let l = CylinderLattice::new(1, 2, 1).unwrap();
        let c = l.site_index(&[2]).unwrap();
        let b: Vec<i64> = l.block(c, 1).iter().map(|&s| l.axial(s)).collect();
        assert_eq!(b, vec![1, 2]);
        // A radius wider than the torus covers it exactly once.
        let l = CylinderLattice::new(2, 3, 3).unwrap();
        assert_eq!(l.block(l.site_index(&[0, 1]).unwrap(), 2).len(), 5 * 3);
    }
}
