use std::sync::Arc;

use crate::configuration::Configuration;
use crate::error::{Error, Result};
use crate::lattice::CylinderLattice;

use super::Kmc;

/// What to record along a trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecorder {
    /// Macroscopic observation times, nondecreasing.
    pub times: Vec<f64>,
    /// Radius `l` of the averaging block for the density snapshots.
    pub box_radius: usize,
    /// Start of the occupation time-average, if any.
    pub average_from: Option<f64>,
}

impl TrajectoryRecorder {
    pub fn new(times: Vec<f64>, box_radius: usize) -> Self {
        TrajectoryRecorder {
            times,
            box_radius,
            average_from: None,
        }
    }

    pub fn averaging_from(mut self, t0: f64) -> Self {
        self.average_from = Some(t0);
        self
    }

    pub fn validate(&self, t_end: f64) -> Result<()> {
        if self.times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::domain("observation times must be nondecreasing"));
        }
        if let Some(&t) = self.times.iter().find(|&&t| !(0.0..=t_end).contains(&t)) {
            return Err(Error::domain(format!("observation time {t} outside [0, {t_end}]")));
        }
        if let Some(t0) = self.average_from {
            if !(0.0..=t_end).contains(&t0) {
                return Err(Error::domain(format!("averaging start {t0} outside [0, {t_end}]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    /// Block-averaged occupation per site.
    pub density: Vec<f64>,
    /// Cumulative net rightward crossings per axial section.
    pub crossings: Vec<i64>,
}

/// Observables of one trajectory.
#[derive(Clone, Debug)]
pub struct Recording {
    pub lattice: Arc<CylinderLattice>,
    pub box_radius: usize,
    pub snapshots: Vec<Snapshot>,
    /// Time-averaged raw occupation per site over `[average_start, end]`.
    pub occupation_average: Option<Vec<f64>>,
    pub average_start: Option<f64>,
    /// Crossings counted before the averaging window opened.
    pub crossings_at_average_start: Option<Vec<i64>>,
    pub events: u64,
}

impl Recording {
    pub(super) fn new(lattice: Arc<CylinderLattice>, box_radius: usize) -> Self {
        Recording {
            lattice,
            box_radius,
            snapshots: Vec::new(),
            occupation_average: None,
            average_start: None,
            crossings_at_average_start: None,
            events: 0,
        }
    }

    pub(super) fn push(&mut self, kmc: &Kmc) {
        let density = coarse_grain(&self.lattice, kmc.configuration(), self.box_radius);
        self.snapshots.push(Snapshot {
            time: kmc.time(),
            density,
            crossings: kmc.section_crossings().to_vec(),
        });
    }

    /// Net crossings per section per unit macroscopic time over the whole run.
    pub fn section_flux(&self) -> Vec<f64> {
        let last = self.snapshots.last().expect("at least one snapshot");
        if last.time <= 0.0 {
            return vec![0.0; last.crossings.len()];
        }
        last.crossings.iter().map(|&c| c as f64 / last.time).collect()
    }

    /// Net crossings per section per unit macroscopic time over the averaging window.
    pub fn window_flux(&self) -> Option<Vec<f64>> {
        let start = self.crossings_at_average_start.as_ref()?;
        let t0 = self.average_start?;
        let last = self.snapshots.last()?;
        let span = last.time - t0;
        if span <= 0.0 {
            return None;
        }
        Some(
            last.crossings
                .iter()
                .zip(start)
                .map(|(&c, &s)| (c - s) as f64 / span)
                .collect(),
        )
    }
}

/// Block average `eta^l(x)` over `block(x, l)`, using the clipped block size near the faces.
pub fn coarse_grain(lattice: &CylinderLattice, eta: &Configuration, radius: usize) -> Vec<f64> {
    coarse_grain_values(lattice, &eta.as_f64(), radius)
}

/// [`coarse_grain`] for real-valued site data. Separable: the block is an axial
/// interval times a transverse cube, so averages can be taken one axis at a time.
pub fn coarse_grain_values(lattice: &CylinderLattice, values: &[f64], radius: usize) -> Vec<f64> {
    assert_eq!(values.len(), lattice.site_count());
    if radius == 0 {
        return values.to_vec();
    }
    let slice = lattice.slice_len();
    let axial = lattice.axial_len();
    let r = radius as isize;
    let mut out = vec![0.0; values.len()];
    let mut prefix = vec![0.0; axial + 1];
    for t in 0..slice {
        for i in 0..axial {
            prefix[i + 1] = prefix[i] + values[i * slice + t];
        }
        for i in 0..axial as isize {
            let lo = (i - r).max(0) as usize;
            let hi = ((i + r) as usize).min(axial - 1);
            out[i as usize * slice + t] = (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64;
        }
    }
    let tsize = lattice.transverse_size();
    let window = lattice.transverse_window(radius);
    let mut scratch = vec![0.0; tsize];
    for k in 1..lattice.dim() {
        // Stride of transverse coordinate k inside a cross-section.
        let stride = tsize.pow((lattice.dim() - 1 - k) as u32);
        let mut next = out.clone();
        for base in 0..values.len() {
            let coord = (base / stride) % tsize;
            if coord != 0 {
                continue;
            }
            for (c, s) in scratch.iter_mut().enumerate() {
                *s = out[base + c * stride];
            }
            for c in 0..tsize {
                let sum: f64 = window
                    .iter()
                    .map(|&w| scratch[(c as i64 + w).rem_euclid(tsize as i64) as usize])
                    .sum();
                next[base + c * stride] = sum / window.len() as f64;
            }
        }
        out = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn brute(lattice: &CylinderLattice, values: &[f64], radius: usize) -> Vec<f64> {
        (0..lattice.site_count())
            .map(|x| {
                let b = lattice.block(x, radius);
                b.iter().map(|&y| values[y]).sum::<f64>() / b.len() as f64
            })
            .collect()
    }

    #[test]
    fn full_configuration_stays_full() {
        let l = CylinderLattice::new(2, 3, 4).unwrap();
        let g = coarse_grain(&l, &Configuration::full(l.site_count()), 2);
        assert!(g.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn single_particle() {
        let l = CylinderLattice::new(1, 3, 1).unwrap();
        let mut occ = vec![0u8; 7];
        occ[3] = 1;
        let g = coarse_grain(&l, &Configuration::from_occupancy(occ), 1);
        for x in 2..=4 {
            assert!((g[x] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn matches_brute_force_blocks() {
        let mut r = rng::stream(3, &[]);
        for (d, n, t) in [(1, 6, 1), (2, 4, 5), (2, 3, 3), (3, 2, 4)] {
            let l = CylinderLattice::new(d, n, t).unwrap();
            let v: Vec<f64> = (0..l.site_count()).map(|_| r.random_range(0..2) as f64).collect();
            for radius in 0..4 {
                let fast = coarse_grain_values(&l, &v, radius);
                let slow = brute(&l, &v, radius);
                for (a, b) in fast.iter().zip(&slow) {
                    assert!((a - b).abs() < 1e-12, "d={d} n={n} t={t} r={radius}");
                }
            }
        }
    }

    #[test]
    fn recorder_validation() {
        assert!(TrajectoryRecorder::new(vec![0.2, 0.1], 0).validate(1.0).is_err());
        assert!(TrajectoryRecorder::new(vec![0.2, 1.5], 0).validate(1.0).is_err());
        assert!(TrajectoryRecorder::new(vec![0.0, 0.5, 0.5], 0).validate(1.0).is_ok());
    }
}
