//! Annealed thermodynamics of the random-field lattice gas.
//!
//! A site with field `alpha` at chemical potential `lambda` is occupied with
//! probability `sigmoid(alpha + lambda)`. Averaging over the disorder law gives
//! the annealed density `rho(lambda)`, its inverse `lambda_0(rho)` and the
//! static compressibility `chi(rho) = E[p (1 - p)]`, which is also
//! `d rho / d lambda`.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::configuration::Configuration;
use crate::disorder::{DisorderField, DisorderLaw};
use crate::error::{Error, Result};
use crate::lattice::Face;
use crate::rng;

/// Behavioural revision recorded in run metadata.
pub const MODULE_VERSION: &str = "1.0.0";

const PROFILE_STREAM: u64 = 0x9F0F_11E5;

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Single-site occupation probability `e^(alpha + lambda) / (1 + e^(alpha + lambda))`.
#[inline]
pub fn occupation_probability(alpha: f64, lambda: f64) -> f64 {
    sigmoid(alpha + lambda)
}

/// Gauss-Legendre nodes and weights on [-1, 1] (Newton on the Legendre recurrence).
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out[i] = (-x, w);
        out[n - 1 - i] = (x, w);
    }
    out
}

#[derive(Clone, Debug)]
pub struct ThermoContext {
    law: DisorderLaw,
    nodes: Vec<(f64, f64)>,
    lambda_tolerance: f64,
}

impl ThermoContext {
    pub const DEFAULT_NODES: usize = 96;
    pub const DEFAULT_TOLERANCE: f64 = 1e-12;

    pub fn new(law: DisorderLaw) -> Result<Self> {
        Self::with_options(law, Self::DEFAULT_NODES, Self::DEFAULT_TOLERANCE)
    }

    pub fn with_options(law: DisorderLaw, quadrature_nodes: usize, lambda_tolerance: f64) -> Result<Self> {
        law.validate()?;
        if quadrature_nodes < 64 {
            return Err(Error::domain("at least 64 quadrature nodes are required"));
        }
        if !(lambda_tolerance > 0.0) {
            return Err(Error::domain("lambda tolerance must be positive"));
        }
        let nodes = match law {
            DisorderLaw::UniformSymmetric { bound } => gauss_legendre(quadrature_nodes)
                .into_iter()
                .map(|(x, w)| (bound * x, 0.5 * w))
                .collect(),
            DisorderLaw::TwoPointSymmetric { bound } => vec![(-bound, 0.5), (bound, 0.5)],
            DisorderLaw::ConstantZero => vec![(0.0, 1.0)],
        };
        Ok(ThermoContext {
            law,
            nodes,
            lambda_tolerance,
        })
    }

    pub fn law(&self) -> DisorderLaw {
        self.law
    }

    pub fn lambda_tolerance(&self) -> f64 {
        self.lambda_tolerance
    }

    /// `E[f(alpha)]` over the disorder law.
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().map(|&(a, w)| w * f(a)).sum()
    }

    /// Annealed density at chemical potential `lambda`.
    pub fn rho_of_lambda(&self, lambda: f64) -> f64 {
        self.expect(|a| sigmoid(a + lambda))
    }

    /// `d rho / d lambda = E[p (1 - p)]`.
    pub fn susceptibility(&self, lambda: f64) -> f64 {
        self.expect(|a| {
            let p = sigmoid(a + lambda);
            p * (1.0 - p)
        })
    }

    /// Annealed chemical potential: the root of `rho_of_lambda(.) = rho`.
    pub fn lambda0(&self, rho: f64) -> Result<f64> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::domain(format!("density {rho} outside (0, 1)")));
        }
        if self.law.is_degenerate() {
            return Ok(logit(rho));
        }
        let a = self.law.bound();
        let (mut lo, mut hi) = (-a - 40.0, a + 40.0);
        if self.rho_of_lambda(lo) > rho || self.rho_of_lambda(hi) < rho {
            return Err(Error::domain(format!("density {rho} not bracketed")));
        }
        // Newton from the logit guess, falling back to bisection when a step leaves the bracket.
        let mut lambda = logit(rho).clamp(lo, hi);
        for _ in 0..200 {
            let r = self.rho_of_lambda(lambda) - rho;
            if r.abs() <= self.lambda_tolerance {
                return Ok(lambda);
            }
            if r > 0.0 {
                hi = lambda;
            } else {
                lo = lambda;
            }
            let slope = self.susceptibility(lambda);
            let newton = lambda - r / slope;
            lambda = if slope > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo < 1e-15 * (1.0 + lambda.abs()) {
                break;
            }
        }
        let r = self.rho_of_lambda(lambda) - rho;
        if r.abs() <= self.lambda_tolerance {
            Ok(lambda)
        } else {
            Err(Error::Solver(format!("lambda0({rho}) residual {r:e}")))
        }
    }

    /// Static compressibility `E[p (1 - p)]` with `p = sigmoid(alpha + lambda_0(rho))`.
    pub fn chi(&self, rho: f64) -> Result<f64> {
        if self.law.is_degenerate() {
            if !(rho > 0.0 && rho < 1.0) {
                return Err(Error::domain(format!("density {rho} outside (0, 1)")));
            }
            return Ok(rho * (1.0 - rho));
        }
        let lambda = self.lambda0(rho)?;
        Ok(self.susceptibility(lambda))
    }
}

/// Macroscopic density profile on `[-1, 1] x T^(d-1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DensityProfile {
    Constant { value: f64 },
    /// Affine in `u_1`, from `minus` at `u_1 = -1` to `plus` at `u_1 = 1`.
    Linear { minus: f64, plus: f64 },
    /// `mean + amplitude * sin(pi (u_1 + 1) / 2)`.
    Sinusoid { mean: f64, amplitude: f64 },
}

impl DensityProfile {
    pub fn density(&self, u: &[f64]) -> f64 {
        let u1 = u[0];
        match *self {
            DensityProfile::Constant { value } => value,
            DensityProfile::Linear { minus, plus } => minus + (plus - minus) * (u1 + 1.0) / 2.0,
            DensityProfile::Sinusoid { mean, amplitude } => {
                mean + amplitude * (std::f64::consts::FRAC_PI_2 * (u1 + 1.0)).sin()
            }
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let (lo, hi) = match *self {
            DensityProfile::Constant { value } => (value, value),
            DensityProfile::Linear { minus, plus } => (minus.min(plus), minus.max(plus)),
            DensityProfile::Sinusoid { mean, amplitude } => {
                let ends = [mean, mean + amplitude];
                (ends[0].min(ends[1]), ends[0].max(ends[1]))
            }
        };
        if lo >= 0.0 && hi <= 1.0 {
            Ok(())
        } else {
            Err(Error::config(path, format!("profile leaves [0, 1]: range [{lo}, {hi}]")))
        }
    }
}

/// Reservoir density on one face, optionally modulated along the first transverse coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FaceDensity {
    Constant(f64),
    Cosine { mean: f64, amplitude: f64 },
}

impl FaceDensity {
    pub fn value(&self, transverse: &[f64]) -> f64 {
        match *self {
            FaceDensity::Constant(b) => b,
            FaceDensity::Cosine { mean, amplitude } => {
                let u2 = transverse.first().copied().unwrap_or(0.0);
                mean + amplitude * (2.0 * std::f64::consts::PI * u2).cos()
            }
        }
    }

    fn range(&self) -> (f64, f64) {
        match *self {
            FaceDensity::Constant(b) => (b, b),
            FaceDensity::Cosine { mean, amplitude } => (mean - amplitude.abs(), mean + amplitude.abs()),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, FaceDensity::Constant(_))
    }
}

/// Boundary data `b` on the two faces of the cylinder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryData {
    pub minus: FaceDensity,
    pub plus: FaceDensity,
}

impl BoundaryData {
    pub fn constant(minus: f64, plus: f64) -> Self {
        BoundaryData {
            minus: FaceDensity::Constant(minus),
            plus: FaceDensity::Constant(plus),
        }
    }

    pub fn face(&self, face: Face) -> FaceDensity {
        match face {
            Face::Minus => self.minus,
            Face::Plus => self.plus,
        }
    }

    pub fn value(&self, face: Face, transverse: &[f64]) -> f64 {
        self.face(face).value(transverse)
    }

    /// Reservoir densities must stay inside (0, 1).
    pub fn validate(&self, path: &str) -> Result<()> {
        for (name, f) in [("minus", self.minus), ("plus", self.plus)] {
            let (lo, hi) = f.range();
            if !(lo > 0.0 && hi < 1.0) {
                return Err(Error::config(
                    format!("{path}.{name}"),
                    format!("reservoir density must lie in (0, 1), got range [{lo}, {hi}]"),
                ));
            }
        }
        Ok(())
    }

    pub fn is_face_constant(&self) -> bool {
        self.minus.is_constant() && self.plus.is_constant()
    }
}

/// A macroscopic profile together with its reservoir data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSpec {
    pub density: DensityProfile,
    pub boundary: BoundaryData,
}

/// Draws a configuration from the product measure with site probabilities
/// `sigmoid(alpha(x) + lambda_0(rho(x / N)))`. Densities 0 and 1 give empty and
/// full sites.
pub fn sample_profile_configuration(
    field: &DisorderField,
    profile: impl Fn(&[f64]) -> f64,
    ctx: &ThermoContext,
    seed: u64,
) -> Result<Configuration> {
    let lattice = field.lattice();
    let mut stream = rng::stream(seed, &[PROFILE_STREAM]);
    let mut occupancy = Vec::with_capacity(lattice.site_count());
    let mut cache: Option<(f64, f64)> = None;
    for x in 0..lattice.site_count() {
        let rho = profile(&lattice.macro_position(x));
        let u = rng::open_unit(stream.next_u64());
        let occupied = if rho <= 0.0 {
            false
        } else if rho >= 1.0 {
            true
        } else {
            let lambda = match cache {
                Some((r, l)) if r == rho => l,
                _ => {
                    let l = ctx.lambda0(rho)?;
                    cache = Some((rho, l));
                    l
                }
            };
            u < occupation_probability(field.at(x), lambda)
        };
        occupancy.push(occupied as u8);
    }
    Ok(Configuration::from_occupancy(occupancy))
}
