//! Quenched random field `alpha(x)` in `[-A, A]`.
//!
//! Site `i` draws its value from the `i`-th 64-bit word of a ChaCha8 stream
//! keyed by the field seed, so `alpha(x)` is a pure function of
//! `(seed, index)` and can be regenerated one site at a time.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::CylinderLattice;
use crate::rng;

/// Behavioural revision recorded in run metadata.
pub const MODULE_VERSION: &str = "1.0.0";

const FIELD_STREAM: u64 = 0xD150_0D3E;

/// Law of a single `alpha(x)`; all shipped laws are symmetric about 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DisorderLaw {
    ConstantZero,
    UniformSymmetric { bound: f64 },
    TwoPointSymmetric { bound: f64 },
}

impl DisorderLaw {
    /// `A`, the half-width of the support.
    pub fn bound(&self) -> f64 {
        match *self {
            DisorderLaw::ConstantZero => 0.0,
            DisorderLaw::UniformSymmetric { bound } | DisorderLaw::TwoPointSymmetric { bound } => bound,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DisorderLaw::ConstantZero => Ok(()),
            DisorderLaw::UniformSymmetric { bound } | DisorderLaw::TwoPointSymmetric { bound } => {
                if bound.is_finite() && bound > 0.0 {
                    Ok(())
                } else {
                    Err(Error::domain(format!("disorder bound must be finite and > 0, got {bound}")))
                }
            }
        }
    }

    /// Quantile transform of a uniform `u` in (0, 1).
    pub fn quantile(&self, u: f64) -> f64 {
        match *self {
            DisorderLaw::ConstantZero => 0.0,
            DisorderLaw::UniformSymmetric { bound } => bound * (2.0 * u - 1.0),
            DisorderLaw::TwoPointSymmetric { bound } => {
                if u < 0.5 {
                    -bound
                } else {
                    bound
                }
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            DisorderLaw::ConstantZero => {
                if x < 0.0 {
                    0.0
                } else {
                    1.0
                }
            }
            DisorderLaw::UniformSymmetric { bound } => ((x + bound) / (2.0 * bound)).clamp(0.0, 1.0),
            DisorderLaw::TwoPointSymmetric { bound } => {
                if x < -bound {
                    0.0
                } else if x < bound {
                    0.5
                } else {
                    1.0
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile(rng::open_unit(rng.next_u64()))
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, DisorderLaw::ConstantZero)
    }
}

/// One frozen realization of the field on a lattice.
#[derive(Clone, Debug)]
pub struct DisorderField {
    lattice: Arc<CylinderLattice>,
    values: Vec<f64>,
    law: DisorderLaw,
    seed: u64,
}

/// Reproduction data stored next to serialized fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldMetadata {
    pub law: DisorderLaw,
    pub seed: u64,
    pub dim: usize,
    pub half_length: usize,
    pub transverse_size: usize,
}

#[derive(Clone, Debug)]
pub struct FieldStatistics {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Equal-width bins over `[-A, A]` (a single bin for the zero law).
    pub histogram: Vec<usize>,
}

impl DisorderField {
    pub fn sample(lattice: Arc<CylinderLattice>, law: DisorderLaw, seed: u64) -> Result<Self> {
        law.validate()?;
        let mut stream = rng::stream(seed, &[FIELD_STREAM]);
        let values = (0..lattice.site_count())
            .map(|_| law.quantile(rng::open_unit(stream.next_u64())))
            .collect();
        Ok(DisorderField {
            lattice,
            values,
            law,
            seed,
        })
    }

    /// The value site `index` receives under `(law, seed)`, without sampling the whole field.
    pub fn value_at(law: DisorderLaw, seed: u64, index: usize) -> f64 {
        let mut stream = rng::stream(seed, &[FIELD_STREAM]);
        stream.set_word_pos(2 * index as u128);
        law.quantile(rng::open_unit(stream.next_u64()))
    }

    /// Field with explicit values; every value must lie in the law's support interval.
    pub fn from_values(
        lattice: Arc<CylinderLattice>,
        values: Vec<f64>,
        law: DisorderLaw,
        seed: u64,
    ) -> Result<Self> {
        if values.len() != lattice.site_count() {
            return Err(Error::domain(format!(
                "field has {} values for {} sites",
                values.len(),
                lattice.site_count()
            )));
        }
        let a = law.bound();
        if let Some(v) = values.iter().find(|v| !(v.abs() <= a)) {
            return Err(Error::domain(format!("field value {v} outside [-{a}, {a}]")));
        }
        Ok(DisorderField {
            lattice,
            values,
            law,
            seed,
        })
    }

    /// The zero field.
    pub fn zero(lattice: Arc<CylinderLattice>) -> Self {
        let n = lattice.site_count();
        DisorderField {
            lattice,
            values: vec![0.0; n],
            law: DisorderLaw::ConstantZero,
            seed: 0,
        }
    }

    pub fn lattice(&self) -> &Arc<CylinderLattice> {
        &self.lattice
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, index: usize) -> f64 {
        self.values[index]
    }

    pub fn law(&self) -> DisorderLaw {
        self.law
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn metadata(&self) -> FieldMetadata {
        FieldMetadata {
            law: self.law,
            seed: self.seed,
            dim: self.lattice.dim(),
            half_length: self.lattice.half_length(),
            transverse_size: self.lattice.transverse_size(),
        }
    }

    pub fn statistics(&self, bins: usize) -> FieldStatistics {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let a = self.law.bound();
        let bins = if a > 0.0 { bins.max(1) } else { 1 };
        let mut histogram = vec![0usize; bins];
        for &v in &self.values {
            let k = if a > 0.0 {
                (((v + a) / (2.0 * a)) * bins as f64).floor() as usize
            } else {
                0
            };
            histogram[k.min(bins - 1)] += 1;
        }
        FieldStatistics {
            mean,
            min,
            max,
            histogram,
        }
    }

    /// Kolmogorov-Smirnov distance between the empirical CDF and the law.
    pub fn ks_distance(&self) -> f64 {
        let mut sorted = self.values.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mut worst: f64 = 0.0;
        let mut i = 0;
        while i < sorted.len() {
            // Evaluate on both sides of each jump, ties grouped.
            let x = sorted[i];
            let mut j = i;
            while j < sorted.len() && sorted[j] == x {
                j += 1;
            }
            let before = i as f64 / n;
            let after = j as f64 / n;
            let cdf = self.law.cdf(x);
            let left = self.law.cdf(x - 1e-12 * (1.0 + x.abs()));
            worst = worst.max((after - cdf).abs()).max((before - left).abs());
            i = j;
        }
        worst
    }

    /// CSV with header `site,alpha`, one row per site in index order.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["site", "alpha"])?;
        for (i, v) in self.values.iter().enumerate() {
            w.serialize((i, v))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(lattice: Arc<CylinderLattice>, meta: &FieldMetadata, path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut values = vec![f64::NAN; lattice.site_count()];
        let mut count = 0;
        for row in r.deserialize() {
            let (site, value): (usize, f64) = row?;
            if site >= values.len() {
                return Err(Error::domain(format!("site {site} outside lattice")));
            }
            values[site] = value;
            count += 1;
        }
        if count != values.len() {
            return Err(Error::domain(format!("expected {} rows, read {count}", values.len())));
        }
        Self::from_values(lattice, values, meta.law, meta.seed)
    }

    /// Little-endian `f64` per site in index order, no header.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(lattice: Arc<CylinderLattice>, meta: &FieldMetadata, path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        if bytes.len() != 8 * lattice.site_count() {
            return Err(Error::domain(format!(
                "binary field has {} bytes, expected {}",
                bytes.len(),
                8 * lattice.site_count()
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::from_values(lattice, values, meta.law, meta.seed)
    }
}
