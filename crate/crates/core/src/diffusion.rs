//! Diffusion matrix from its variational formula, restricted to a finite basis.
//!
//! For a basis `g_1..g_M` of local functions the objective
//! `sum_i E[C_i (a_i w_i - grad_i Gamma_g)^2]`, with `w_i = eta(e_i) - eta(0)`,
//! is a quadratic form in the coefficients. Its infimum is the Schur complement
//! `a . (Diag(P) - R G^+ R^T) a`, and `D = (Diag(P) - R G^+ R^T) / (2 chi)`.
//! `P`, `R`, `G` are Monte Carlo averages under the annealed product measure
//! at chemical potential `lambda_0(rho)`.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::disorder::DisorderLaw;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rng;
use crate::thermo::{sigmoid, ThermoContext};

/// Behavioural revision recorded in run metadata.
pub const MODULE_VERSION: &str = "1.0.0";

const SAMPLING_STREAM: u64 = 0xD1FF_0510;

/// Relative eigenvalue floor of the Gram pseudoinverse.
pub const PSEUDOINVERSE_FLOOR: f64 = 1e-8;

/// `prod eta(x) * prod alpha(y)` over offsets in `Z^d`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LocalFunction {
    pub eta: Vec<Vec<i64>>,
    pub alpha: Vec<Vec<i64>>,
}

impl LocalFunction {
    pub fn new(eta: Vec<Vec<i64>>, alpha: Vec<Vec<i64>>) -> Self {
        LocalFunction { eta, alpha }
    }

    pub fn dim(&self) -> Option<usize> {
        self.eta.iter().chain(&self.alpha).map(|v| v.len()).next()
    }

    /// Sup-norm radius of the support.
    pub fn radius(&self) -> i64 {
        self.eta
            .iter()
            .chain(&self.alpha)
            .flat_map(|v| v.iter().map(|c| c.abs()))
            .max()
            .unwrap_or(0)
    }

    /// Translation representative: smallest occupation site moved to the origin, sites sorted.
    fn canonical(&self) -> LocalFunction {
        let Some(base) = self.eta.iter().min().cloned() else {
            return self.clone();
        };
        let shift = |v: &Vec<i64>| v.iter().zip(&base).map(|(a, b)| a - b).collect::<Vec<_>>();
        let mut eta: Vec<_> = self.eta.iter().map(shift).collect();
        let mut alpha: Vec<_> = self.alpha.iter().map(shift).collect();
        eta.sort();
        alpha.sort();
        LocalFunction { eta, alpha }
    }

    /// Translates whose occupation support meets `{0, e}`; every other translate
    /// is unchanged by the exchange across `(0, e)`.
    fn touching_translates(&self, e: &[i64]) -> Vec<Vec<i64>> {
        let mut out = BTreeSet::new();
        for s in &self.eta {
            out.insert(s.iter().map(|c| -c).collect::<Vec<_>>());
            out.insert(e.iter().zip(s).map(|(a, c)| a - c).collect::<Vec<_>>());
        }
        out.into_iter().collect()
    }
}

/// How the shipped generator family is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    /// Radius `k` of the cube holding the occupation monomials.
    pub radius: usize,
    /// Also multiply each monomial by `alpha` at one of its own sites.
    #[serde(default = "default_true")]
    pub alpha_weights: bool,
    /// If set, add `eta(0) alpha(v)` and `eta(0) alpha(v) alpha(v + e_i)` for `v` in the cube of this radius.
    #[serde(default)]
    pub field_radius: Option<usize>,
}

fn default_true() -> bool {
    true
}

impl BasisSpec {
    pub fn monomials(radius: usize) -> Self {
        BasisSpec {
            radius,
            alpha_weights: true,
            field_radius: None,
        }
    }
}

/// A finite, translation-deduplicated list of local functions.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFunctionBasis {
    dim: usize,
    spec: Option<BasisSpec>,
    generators: Vec<LocalFunction>,
}

fn cube(dim: usize, radius: i64) -> Vec<Vec<i64>> {
    let side = 2 * radius + 1;
    let count = (side as usize).pow(dim as u32);
    (0..count)
        .map(|mut k| {
            let mut v = vec![0; dim];
            for c in v.iter_mut().rev() {
                *c = (k % side as usize) as i64 - radius;
                k /= side as usize;
            }
            v
        })
        .collect()
}

fn unit(dim: usize, i: usize) -> Vec<i64> {
    let mut e = vec![0; dim];
    e[i] = 1;
    e
}

impl LocalFunctionBasis {
    /// The shipped family. `eta(0)` alone is omitted since its gradient vanishes identically.
    pub fn from_spec(dim: usize, spec: &BasisSpec) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("dimension must be >= 1"));
        }
        let k = spec.radius as i64;
        let sites = cube(dim, k);
        let mut candidates = Vec::new();
        for (a, x) in sites.iter().enumerate() {
            if spec.alpha_weights {
                candidates.push(LocalFunction::new(vec![x.clone()], vec![x.clone()]));
            }
            for y in &sites[a + 1..] {
                let pair = vec![x.clone(), y.clone()];
                candidates.push(LocalFunction::new(pair.clone(), vec![]));
                if spec.alpha_weights {
                    candidates.push(LocalFunction::new(pair.clone(), vec![x.clone()]));
                    candidates.push(LocalFunction::new(pair, vec![y.clone()]));
                }
            }
        }
        if let Some(r) = spec.field_radius {
            let origin = vec![0; dim];
            for v in cube(dim, r as i64) {
                candidates.push(LocalFunction::new(vec![origin.clone()], vec![v.clone()]));
                for i in 0..dim {
                    let w: Vec<i64> = v.iter().zip(unit(dim, i)).map(|(a, b)| a + b).collect();
                    candidates.push(LocalFunction::new(vec![origin.clone()], vec![v.clone(), w]));
                }
            }
        }
        let mut seen = BTreeSet::new();
        let generators = candidates
            .into_iter()
            .filter(|g| seen.insert(g.canonical()))
            .collect();
        Ok(LocalFunctionBasis {
            dim,
            spec: Some(spec.clone()),
            generators,
        })
    }

    pub fn from_generators(dim: usize, generators: Vec<LocalFunction>) -> Result<Self> {
        if let Some(g) = generators.iter().find(|g| g.dim().is_some_and(|d| d != dim)) {
            return Err(Error::domain(format!("generator {g:?} is not {dim}-dimensional")));
        }
        Ok(LocalFunctionBasis {
            dim,
            spec: None,
            generators,
        })
    }

    pub fn empty(dim: usize) -> Self {
        LocalFunctionBasis {
            dim,
            spec: None,
            generators: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spec(&self) -> Option<&BasisSpec> {
        self.spec.as_ref()
    }

    pub fn generators(&self) -> &[LocalFunction] {
        &self.generators
    }

    pub fn len(&self) -> usize {
        self.generators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generators.is_empty()
    }

    /// Smallest cube radius around the origin holding every translate that
    /// touches `{0, e_i}` for some direction `i`.
    pub fn window_radius(&self) -> usize {
        let mut w = 1i64;
        for i in 0..self.dim {
            let e = unit(self.dim, i);
            for g in &self.generators {
                for x in g.touching_translates(&e) {
                    for s in g.eta.iter().chain(&g.alpha) {
                        let r = s.iter().zip(&x).map(|(a, b)| (a + b).abs()).max().unwrap_or(0);
                        w = w.max(r);
                    }
                }
            }
        }
        w as usize
    }
}

/// Values on the cube `[-radius, radius]^d` around the origin, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch<T> {
    dim: usize,
    radius: usize,
    values: Vec<T>,
}

impl<T: Copy> Patch<T> {
    pub fn new(dim: usize, radius: usize, values: Vec<T>) -> Result<Self> {
        let expect = (2 * radius + 1).pow(dim as u32);
        if values.len() != expect {
            return Err(Error::domain(format!("patch needs {expect} values, got {}", values.len())));
        }
        Ok(Patch { dim, radius, values })
    }

    pub fn filled(dim: usize, radius: usize, value: T) -> Self {
        Patch {
            dim,
            radius,
            values: vec![value; (2 * radius + 1).pow(dim as u32)],
        }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Flat index of `offset`, or `None` outside the cube.
    pub fn index(&self, offset: &[i64]) -> Option<usize> {
        let r = self.radius as i64;
        let side = 2 * r + 1;
        let mut k = 0i64;
        for &c in offset {
            if c.abs() > r {
                return None;
            }
            k = k * side + c + r;
        }
        Some(k as usize)
    }

    pub fn get(&self, offset: &[i64]) -> Option<T> {
        self.index(offset).map(|k| self.values[k])
    }

    pub fn set(&mut self, offset: &[i64], value: T) -> Result<()> {
        let k = self
            .index(offset)
            .ok_or_else(|| Error::domain(format!("offset {offset:?} outside patch")))?;
        self.values[k] = value;
        Ok(())
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

/// `grad_{0,e} Gamma_g`: the change of `sum_x g(tau_x eta, tau_x alpha)` when the
/// occupations at `0` and `e_direction` are exchanged.
pub fn grad_gamma(g: &LocalFunction, eta: &Patch<u8>, alpha: &Patch<f64>, direction: usize) -> Result<f64> {
    if direction >= eta.dim || eta.dim != alpha.dim {
        return Err(Error::domain(format!("direction {direction} invalid for the patches")));
    }
    let e = unit(eta.dim, direction);
    let origin = vec![0; eta.dim];
    let swapped = |y: &[i64]| -> Option<u8> {
        if y == origin.as_slice() {
            eta.get(&e)
        } else if y == e.as_slice() {
            eta.get(&origin)
        } else {
            eta.get(y)
        }
    };
    let mut total = 0.0;
    for x in g.touching_translates(&e) {
        let shifted = |s: &Vec<i64>| s.iter().zip(&x).map(|(a, b)| a + b).collect::<Vec<_>>();
        let missing = || Error::domain(format!("patch too small for translate {x:?} of {g:?}"));
        let mut before = 1.0;
        let mut after = 1.0;
        for s in &g.eta {
            let y = shifted(s);
            before *= eta.get(&y).ok_or_else(missing)? as f64;
            after *= swapped(&y).ok_or_else(missing)? as f64;
        }
        let mut weight = 1.0;
        for t in &g.alpha {
            weight *= alpha.get(&shifted(t)).ok_or_else(missing)?;
        }
        total += (after - before) * weight;
    }
    Ok(total)
}

/// One translate of one generator, as flat patch indices.
#[derive(Clone, Debug)]
struct Term {
    eta: Vec<usize>,
    alpha: Vec<usize>,
}

/// Precompiled gradients for a fixed window: `terms[i][m]` lists the translates
/// of generator `m` touched by an exchange in direction `i`.
#[derive(Clone, Debug)]
struct GradientPlan {
    radius: usize,
    origin: usize,
    targets: Vec<usize>,
    terms: Vec<Vec<Vec<Term>>>,
}

impl GradientPlan {
    fn new(basis: &LocalFunctionBasis) -> Self {
        let dim = basis.dim;
        let radius = basis.window_radius();
        let probe: Patch<u8> = Patch::filled(dim, radius, 0);
        let flat = |v: &[i64]| probe.index(v).expect("window covers every touching translate");
        let origin = flat(&vec![0; dim]);
        let mut targets = Vec::with_capacity(dim);
        let mut terms = Vec::with_capacity(dim);
        for i in 0..dim {
            let e = unit(dim, i);
            targets.push(flat(&e));
            terms.push(
                basis
                    .generators
                    .iter()
                    .map(|g| {
                        g.touching_translates(&e)
                            .into_iter()
                            .map(|x| {
                                let at = |s: &Vec<i64>| {
                                    flat(&s.iter().zip(&x).map(|(a, b)| a + b).collect::<Vec<_>>())
                                };
                                Term {
                                    eta: g.eta.iter().map(at).collect(),
                                    alpha: g.alpha.iter().map(at).collect(),
                                }
                            })
                            .collect()
                    })
                    .collect(),
            );
        }
        GradientPlan {
            radius,
            origin,
            targets,
            terms,
        }
    }

    #[inline]
    fn gradient(&self, direction: usize, m: usize, eta: &[u8], alpha: &[f64]) -> f64 {
        let (o, t) = (self.origin, self.targets[direction]);
        let swapped = |k: usize| {
            if k == o {
                eta[t]
            } else if k == t {
                eta[o]
            } else {
                eta[k]
            }
        };
        let mut total = 0.0;
        for term in &self.terms[direction][m] {
            let before = term.eta.iter().all(|&k| eta[k] == 1);
            let after = term.eta.iter().all(|&k| swapped(k) == 1);
            if before != after {
                let weight: f64 = term.alpha.iter().map(|&k| alpha[k]).product();
                total += if after { weight } else { -weight };
            }
        }
        total
    }
}

/// Raw sums over a batch of draws.
#[derive(Clone, Debug)]
struct Sums {
    draws: u64,
    p: Vec<f64>,
    /// Row-major `d x M`.
    r: Vec<f64>,
    /// Row-major `M x M`, upper triangle only until finalized.
    g: Vec<f64>,
}

impl Sums {
    fn zero(d: usize, m: usize) -> Self {
        Sums {
            draws: 0,
            p: vec![0.0; d],
            r: vec![0.0; d * m],
            g: vec![0.0; m * m],
        }
    }

    fn add(&mut self, other: &Sums) {
        self.draws += other.draws;
        for (a, b) in self.p.iter_mut().zip(&other.p) {
            *a += b;
        }
        for (a, b) in self.r.iter_mut().zip(&other.r) {
            *a += b;
        }
        for (a, b) in self.g.iter_mut().zip(&other.g) {
            *a += b;
        }
    }

    fn sub(&self, other: &Sums) -> Sums {
        let mut out = self.clone();
        out.draws -= other.draws;
        for (a, b) in out.p.iter_mut().zip(&other.p) {
            *a -= b;
        }
        for (a, b) in out.r.iter_mut().zip(&other.r) {
            *a -= b;
        }
        for (a, b) in out.g.iter_mut().zip(&other.g) {
            *a -= b;
        }
        out
    }

    fn blocks(&self, d: usize, m: usize) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let n = self.draws.max(1) as f64;
        let p = DVector::from_iterator(d, self.p.iter().map(|v| v / n));
        let r = DMatrix::from_row_iterator(d, m, self.r.iter().map(|v| v / n));
        let mut g = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in a..m {
                let v = self.g[a * m + b] / n;
                g[(a, b)] = v;
                g[(b, a)] = v;
            }
        }
        (p, r, g)
    }
}

/// Sampling controls for [`estimate_quadratic_blocks`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingOptions {
    pub samples: u64,
    pub seed: u64,
    /// Independent batches; also the jackknife blocks.
    pub batches: usize,
    pub execution: Execution,
}

impl SamplingOptions {
    pub const DEFAULT_BATCHES: usize = 32;

    pub fn new(samples: u64, seed: u64) -> Self {
        SamplingOptions {
            samples,
            seed,
            batches: Self::DEFAULT_BATCHES,
            execution: Execution::default(),
        }
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn with_batches(mut self, batches: usize) -> Self {
        self.batches = batches;
        self
    }
}

/// Monte Carlo estimates of `P`, `R`, `G` with per-entry standard errors.
#[derive(Clone, Debug)]
pub struct QuadraticBlocks {
    pub rho: f64,
    pub samples: u64,
    pub p: DVector<f64>,
    pub r: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub p_stderr: DVector<f64>,
    pub r_stderr: DMatrix<f64>,
    pub g_stderr: DMatrix<f64>,
    batches: Vec<Sums>,
}

fn sample_batch(
    plan: &GradientPlan,
    law: DisorderLaw,
    lambda: f64,
    d: usize,
    m: usize,
    draws: u64,
    seed: u64,
) -> Sums {
    let sites = (2 * plan.radius + 1).pow(d as u32);
    let mut rng = rng::stream(seed, &[]);
    let mut sums = Sums::zero(d, m);
    let mut alpha = vec![0.0; sites];
    let mut eta = vec![0u8; sites];
    let mut grad = vec![0.0; m];
    let mut support = Vec::with_capacity(m);
    for _ in 0..draws {
        for k in 0..sites {
            let a = law.quantile(rng::open_unit(rng.next_u64()));
            alpha[k] = a;
            eta[k] = (rng::open_unit(rng.next_u64()) < sigmoid(a + lambda)) as u8;
        }
        // Common random numbers: the same draw serves every direction.
        for i in 0..d {
            let (o, t) = (plan.origin, plan.targets[i]);
            let w = eta[t] as f64 - eta[o] as f64;
            if w == 0.0 {
                continue;
            }
            let c = ((alpha[t] - alpha[o]) * (eta[o] as f64 - eta[t] as f64) / 2.0).exp();
            sums.p[i] += c * w * w;
            support.clear();
            for (k, gk) in grad.iter_mut().enumerate() {
                *gk = plan.gradient(i, k, &eta, &alpha);
                if *gk != 0.0 {
                    support.push(k);
                }
            }
            for &a in &support {
                let cga = c * grad[a];
                sums.r[i * m + a] += cga * w;
                let row = &mut sums.g[a * m..(a + 1) * m];
                for &b in support.iter().filter(|&&b| b >= a) {
                    row[b] += cga * grad[b];
                }
            }
        }
    }
    sums.draws = draws;
    sums
}

/// Monte Carlo estimates of the quadratic-form blocks at density `rho`.
pub fn estimate_quadratic_blocks(
    basis: &LocalFunctionBasis,
    ctx: &ThermoContext,
    rho: f64,
    options: &SamplingOptions,
) -> Result<QuadraticBlocks> {
    if options.samples == 0 {
        return Err(Error::domain("at least one sample is required"));
    }
    let lambda = ctx.lambda0(rho)?;
    let (d, m) = (basis.dim, basis.len());
    let plan = GradientPlan::new(basis);
    let nb = options.batches.clamp(1, options.samples as usize);
    let law = ctx.law();
    let rho_tag = rho.to_bits();
    let batches = options.execution.map(nb, |b| {
        let draws = options.samples / nb as u64 + u64::from((b as u64) < options.samples % nb as u64);
        let seed = rng::derive_seed(options.seed, &[SAMPLING_STREAM, rho_tag, b as u64]);
        sample_batch(&plan, law, lambda, d, m, draws, seed)
    });
    let mut total = Sums::zero(d, m);
    for s in &batches {
        total.add(s);
    }
    let (p, r, g) = total.blocks(d, m);
    let means: Vec<_> = batches.iter().map(|s| s.blocks(d, m)).collect();
    let spread = |f: &dyn Fn(&(DVector<f64>, DMatrix<f64>, DMatrix<f64>)) -> f64, mean: f64| {
        if nb < 2 {
            return f64::NAN;
        }
        let var = means.iter().map(|x| (f(x) - mean).powi(2)).sum::<f64>() / (nb - 1) as f64;
        (var / nb as f64).sqrt()
    };
    let p_stderr = DVector::from_fn(d, |i, _| spread(&|x| x.0[i], p[i]));
    let r_stderr = DMatrix::from_fn(d, m, |i, a| spread(&|x| x.1[(i, a)], r[(i, a)]));
    let g_stderr = DMatrix::from_fn(m, m, |a, b| spread(&|x| x.2[(a, b)], g[(a, b)]));
    Ok(QuadraticBlocks {
        rho,
        samples: options.samples,
        p,
        r,
        g,
        p_stderr,
        r_stderr,
        g_stderr,
        batches,
    })
}

/// `G^+` with eigenvalues at or below `floor * lambda_max` discarded.
pub fn pseudoinverse(g: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let m = g.nrows();
    if m == 0 {
        return DMatrix::zeros(0, 0);
    }
    let sym = (g + g.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let cut = floor * top;
    let mut out = DMatrix::zeros(m, m);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cut && lam > 0.0 {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lam;
        }
    }
    out
}

/// `D = (Diag(P) - R G^+ R^T) / (2 chi)`, symmetrized.
pub fn assemble_diffusion(p: &DVector<f64>, r: &DMatrix<f64>, g: &DMatrix<f64>, chi: f64) -> Result<DMatrix<f64>> {
    if !(chi > 0.0) {
        return Err(Error::domain(format!("compressibility must be > 0, got {chi}")));
    }
    let mut a = DMatrix::from_diagonal(p);
    if g.nrows() > 0 {
        a -= r * pseudoinverse(g, PSEUDOINVERSE_FLOOR) * r.transpose();
    }
    let d = (&a + a.transpose()) * (0.25 / chi);
    Ok(d)
}

/// Minimizing coefficients `G^+ R^T`, one column per direction.
pub fn optimal_coefficients(blocks: &QuadraticBlocks) -> DMatrix<f64> {
    pseudoinverse(&blocks.g, PSEUDOINVERSE_FLOOR) * blocks.r.transpose()
}

/// `D` at one density with jackknife standard errors over the batches.
#[derive(Clone, Debug)]
pub struct DiffusionEstimate {
    pub rho: f64,
    pub chi: f64,
    pub matrix: DMatrix<f64>,
    pub stderr: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl DiffusionEstimate {
    pub fn condition_number(&self) -> f64 {
        let lo = self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        hi / lo
    }

    pub fn is_positive_definite(&self) -> bool {
        self.eigenvalues.iter().all(|&l| l > 0.0)
    }
}

fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

impl QuadraticBlocks {
    pub fn assemble(&self, chi: f64) -> Result<DiffusionEstimate> {
        let matrix = assemble_diffusion(&self.p, &self.r, &self.g, chi)?;
        let (d, m) = (self.p.len(), self.r.ncols());
        let nb = self.batches.len();
        let mut stderr = DMatrix::from_element(d, d, f64::NAN);
        if nb >= 2 {
            let mut total = Sums::zero(d, m);
            for s in &self.batches {
                total.add(s);
            }
            let leave_out: Vec<DMatrix<f64>> = self
                .batches
                .iter()
                .map(|s| {
                    let (p, r, g) = total.sub(s).blocks(d, m);
                    assemble_diffusion(&p, &r, &g, chi)
                })
                .collect::<Result<_>>()?;
            let mean = leave_out.iter().fold(DMatrix::zeros(d, d), |acc, x| acc + x) / nb as f64;
            let var = leave_out
                .iter()
                .fold(DMatrix::zeros(d, d), |acc, x| acc + (x - &mean).map(|v| v * v));
            stderr = var.map(|v| (v * (nb - 1) as f64 / nb as f64).sqrt());
        }
        let eigenvalues = sorted_eigenvalues(&matrix);
        Ok(DiffusionEstimate {
            rho: self.rho,
            chi,
            matrix,
            stderr,
            eigenvalues,
        })
    }
}

/// Blocks and assembled `D` at one density.
pub fn estimate_diffusion(
    basis: &LocalFunctionBasis,
    ctx: &ThermoContext,
    rho: f64,
    options: &SamplingOptions,
) -> Result<(QuadraticBlocks, DiffusionEstimate)> {
    let blocks = estimate_quadratic_blocks(basis, ctx, rho, options)?;
    let estimate = blocks.assemble(ctx.chi(rho)?)?;
    Ok((blocks, estimate))
}

/// Reproduction data for a table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableMetadata {
    /// `"identity"` or `"variational"`.
    pub source: String,
    pub dim: usize,
    pub law: DisorderLaw,
    pub basis: Option<BasisSpec>,
    pub basis_size: usize,
    pub samples: u64,
    pub seed: u64,
    pub batches: usize,
    /// Smallest `C >= 1` with `rho(1-rho)/C <= eig(2 D chi) <= C rho(1-rho)` on the grid.
    pub einstein_constant: f64,
    pub condition_numbers: Vec<f64>,
}

/// `D(rho)` on a grid, piecewise-linear in between, clamped outside.
#[derive(Clone, Debug)]
pub struct DiffusionTensorTable {
    rho: Vec<f64>,
    matrices: Vec<DMatrix<f64>>,
    stderr: Vec<DMatrix<f64>>,
    metadata: TableMetadata,
}

/// `max(lambda / (rho(1-rho)), rho(1-rho) / lambda)` over the eigenvalues `lambda` of `2 D chi`.
pub fn einstein_ratio(matrix: &DMatrix<f64>, rho: f64, chi: f64) -> f64 {
    let s = rho * (1.0 - rho);
    sorted_eigenvalues(&(matrix * (2.0 * chi)))
        .into_iter()
        .map(|l| if l > 0.0 { (l / s).max(s / l) } else { f64::INFINITY })
        .fold(1.0, f64::max)
}

impl DiffusionTensorTable {
    pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

    /// Validates grid and matrices: grid increasing inside (0, 1), matrices symmetric and positive-definite.
    pub fn new(
        rho: Vec<f64>,
        matrices: Vec<DMatrix<f64>>,
        stderr: Vec<DMatrix<f64>>,
        metadata: TableMetadata,
    ) -> Result<Self> {
        let d = metadata.dim;
        if rho.is_empty() || rho.len() != matrices.len() || rho.len() != stderr.len() {
            return Err(Error::Estimation("table grid and matrices differ in length".into()));
        }
        if rho.iter().any(|&r| !(r > 0.0 && r < 1.0)) || rho.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Estimation(format!("grid {rho:?} must be increasing inside (0, 1)")));
        }
        for (r, m) in rho.iter().zip(&matrices) {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::Estimation(format!("matrix at rho={r} is not {d}x{d}")));
            }
            let asym = (m - m.transpose()).amax();
            if asym > Self::SYMMETRY_TOLERANCE {
                return Err(Error::Estimation(format!("matrix at rho={r} asymmetric by {asym:e}")));
            }
            let ev = sorted_eigenvalues(m);
            if !(ev[0] > 0.0) {
                return Err(Error::Estimation(format!(
                    "matrix at rho={r} not positive-definite: eigenvalues {ev:?}, matrix {m}"
                )));
            }
        }
        Ok(DiffusionTensorTable {
            rho,
            matrices,
            stderr,
            metadata,
        })
    }

    /// `D = 1` at every density.
    pub fn identity(dim: usize) -> Self {
        DiffusionTensorTable {
            rho: vec![0.5],
            matrices: vec![DMatrix::identity(dim, dim)],
            stderr: vec![DMatrix::zeros(dim, dim)],
            metadata: TableMetadata {
                source: "identity".into(),
                dim,
                law: DisorderLaw::ConstantZero,
                basis: None,
                basis_size: 0,
                samples: 0,
                seed: 0,
                batches: 0,
                einstein_constant: 1.0,
                condition_numbers: vec![1.0],
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.metadata.dim
    }

    pub fn grid(&self) -> &[f64] {
        &self.rho
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    pub fn stderr(&self) -> &[DMatrix<f64>] {
        &self.stderr
    }

    pub fn metadata(&self) -> &TableMetadata {
        &self.metadata
    }

    /// Piecewise-linear interpolation, clamped to the end matrices.
    pub fn interpolate(&self, rho: f64) -> DMatrix<f64> {
        let n = self.rho.len();
        if rho <= self.rho[0] {
            return self.matrices[0].clone();
        }
        if rho >= self.rho[n - 1] {
            return self.matrices[n - 1].clone();
        }
        let k = self.rho.partition_point(|&r| r <= rho) - 1;
        let (r0, r1) = (self.rho[k], self.rho[k + 1]);
        if rho == r0 {
            return self.matrices[k].clone();
        }
        let t = (rho - r0) / (r1 - r0);
        &self.matrices[k] * (1.0 - t) + &self.matrices[k + 1] * t
    }

    /// Entry `(i, j)` of [`interpolate`](Self::interpolate) without building the matrix.
    pub fn entry(&self, rho: f64, i: usize, j: usize) -> f64 {
        let n = self.rho.len();
        if rho <= self.rho[0] {
            return self.matrices[0][(i, j)];
        }
        if rho >= self.rho[n - 1] {
            return self.matrices[n - 1][(i, j)];
        }
        let k = self.rho.partition_point(|&r| r <= rho) - 1;
        let t = (rho - self.rho[k]) / (self.rho[k + 1] - self.rho[k]);
        self.matrices[k][(i, j)] * (1.0 - t) + self.matrices[k + 1][(i, j)] * t
    }

    /// Largest `|D_ij| / |D_ii|` ratio over the grid, `i != j`.
    pub fn off_diagonal_ratio(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for m in &self.matrices {
            let diag = (0..m.nrows()).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    if i != j {
                        worst = worst.max(m[(i, j)].abs() / diag);
                    }
                }
            }
        }
        worst
    }

    /// Rows `rho,i,j,D_ij,stderr_ij`; indices are 1-based axis numbers.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["rho", "i", "j", "D_ij", "stderr_ij"])?;
        for ((r, m), s) in self.rho.iter().zip(&self.matrices).zip(&self.stderr) {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    w.serialize((r, i + 1, j + 1, m[(i, j)], s[(i, j)]))?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_metadata(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.metadata)? + "\n")?;
        Ok(())
    }

    /// Reads a table written by [`write_csv`](Self::write_csv) and [`write_metadata`](Self::write_metadata).
    pub fn read(csv_path: &Path, metadata_path: &Path) -> Result<Self> {
        let metadata: TableMetadata = serde_json::from_str(&std::fs::read_to_string(metadata_path)?)?;
        let d = metadata.dim;
        let mut r = csv::Reader::from_path(csv_path)?;
        let mut rho: Vec<f64> = Vec::new();
        let mut matrices: Vec<DMatrix<f64>> = Vec::new();
        let mut stderr: Vec<DMatrix<f64>> = Vec::new();
        for row in r.deserialize() {
            let (x, i, j, v, s): (f64, usize, usize, f64, f64) = row?;
            if !(1..=d).contains(&i) || !(1..=d).contains(&j) {
                return Err(Error::Estimation(format!("entry ({i}, {j}) outside a {d}x{d} table")));
            }
            if rho.last() != Some(&x) {
                rho.push(x);
                matrices.push(DMatrix::from_element(d, d, f64::NAN));
                stderr.push(DMatrix::from_element(d, d, f64::NAN));
            }
            let k = rho.len() - 1;
            matrices[k][(i - 1, j - 1)] = v;
            stderr[k][(i - 1, j - 1)] = s;
        }
        if matrices.iter().any(|m| m.iter().any(|v| v.is_nan())) {
            return Err(Error::Estimation("table has missing entries".into()));
        }
        Self::new(rho, matrices, stderr, metadata)
    }
}

/// Estimates `D` on every grid point and checks the table invariants.
pub fn build_table(
    basis: &LocalFunctionBasis,
    ctx: &ThermoContext,
    grid: &[f64],
    options: &SamplingOptions,
) -> Result<(DiffusionTensorTable, Vec<DiffusionEstimate>)> {
    let mut estimates = Vec::with_capacity(grid.len());
    for &rho in grid {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::domain(format!("grid point {rho} outside (0, 1)")));
        }
        let (_, est) = estimate_diffusion(basis, ctx, rho, options)?;
        estimates.push(est);
    }
    let einstein_constant = estimates
        .iter()
        .map(|e| einstein_ratio(&e.matrix, e.rho, e.chi))
        .fold(1.0, f64::max);
    let metadata = TableMetadata {
        source: "variational".into(),
        dim: basis.dim(),
        law: ctx.law(),
        basis: basis.spec().cloned(),
        basis_size: basis.len(),
        samples: options.samples,
        seed: options.seed,
        batches: options.batches,
        einstein_constant,
        condition_numbers: estimates.iter().map(|e| e.condition_number()).collect(),
    };
    let table = DiffusionTensorTable::new(
        grid.to_vec(),
        estimates.iter().map(|e| e.matrix.clone()).collect(),
        estimates.iter().map(|e| e.stderr.clone()).collect(),
        metadata,
    )?;
    Ok((table, estimates))
}
