//! Exact computations on the full state space of a tiny lattice.
//!
//! States are bitmasks: bit `x` is the occupation of site `x`. The generator
//! is never stored as a matrix. Every move (an exchange across a bond or a
//! boundary flip) is an involution on states, so both the row and the column
//! of a state are enumerated by applying each move to that state.

use std::sync::Arc;

use crate::configuration::Configuration;
use crate::disorder::DisorderField;
use crate::dynamics::RateModel;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::lattice::CylinderLattice;
use crate::thermo::{sigmoid, BoundaryData, ThermoContext};

/// Behavioural revision recorded in run metadata.
pub const MODULE_VERSION: &str = "1.0.0";

/// Largest lattice the oracle accepts.
pub const MAX_SITES: usize = 22;

/// Target of `max |nu Q|` for the stationary solve.
pub const STATIONARY_RESIDUAL: f64 = 1e-12;

/// All `2^n` configurations of a lattice.
#[derive(Clone, Debug)]
pub struct StateSpace {
    lattice: Arc<CylinderLattice>,
}

impl StateSpace {
    pub fn new(lattice: Arc<CylinderLattice>) -> Result<Self> {
        let n = lattice.site_count();
        if n > MAX_SITES {
            return Err(Error::Capacity(format!("{n} sites exceed the oracle limit of {MAX_SITES}")));
        }
        Ok(StateSpace { lattice })
    }

    pub fn lattice(&self) -> &Arc<CylinderLattice> {
        &self.lattice
    }

    pub fn sites(&self) -> usize {
        self.lattice.site_count()
    }

    pub fn len(&self) -> usize {
        1usize << self.sites()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn configuration(&self, state: usize) -> Configuration {
        Configuration::from_bitmask(state as u64, self.sites())
    }

    pub fn state(&self, eta: &Configuration) -> usize {
        eta.to_bitmask() as usize
    }
}

#[derive(Clone, Copy, Debug)]
enum Move {
    Exchange { bond: usize, x: u32, y: u32 },
    Flip { slot: usize, x: u32 },
}

/// Which parts of the dynamics a generator contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Parts {
    pub bulk: bool,
    pub boundary: bool,
}

impl Parts {
    pub const ALL: Parts = Parts {
        bulk: true,
        boundary: true,
    };
    pub const BULK: Parts = Parts {
        bulk: true,
        boundary: false,
    };
    pub const BOUNDARY: Parts = Parts {
        bulk: false,
        boundary: true,
    };
}

/// The generator `L_bulk + L_boundary` (unscaled) on a [`StateSpace`].
#[derive(Clone, Debug)]
pub struct GeneratorMatrix {
    space: StateSpace,
    model: Arc<RateModel>,
    moves: Vec<Move>,
    exit: Vec<f64>,
    execution: Execution,
}

/// Builds the unscaled generator for one disorder sample and boundary profile.
pub fn build_generator(field: &DisorderField, ctx: &ThermoContext, boundary: &BoundaryData) -> Result<GeneratorMatrix> {
    GeneratorMatrix::new(field, ctx, boundary, Parts::ALL)
}

const ROWS_PER_TASK: usize = 1 << 12;

impl GeneratorMatrix {
    pub fn new(field: &DisorderField, ctx: &ThermoContext, boundary: &BoundaryData, parts: Parts) -> Result<Self> {
        let space = StateSpace::new(field.lattice().clone())?;
        let model = Arc::new(RateModel::with_scale(field, ctx, boundary, 1.0)?);
        let lattice = field.lattice();
        let mut moves = Vec::new();
        if parts.bulk {
            for (k, b) in lattice.bonds().iter().enumerate() {
                moves.push(Move::Exchange {
                    bond: k,
                    x: b.from as u32,
                    y: b.to as u32,
                });
            }
        }
        if parts.boundary {
            for (slot, &x) in model.boundary_sites().iter().enumerate() {
                moves.push(Move::Flip { slot, x: x as u32 });
            }
        }
        let mut q = GeneratorMatrix {
            space,
            model,
            moves,
            exit: Vec::new(),
            execution: Execution::default(),
        };
        q.exit = q.execution.map(q.space.len(), |s| q.moves.iter().map(|m| q.move_rate(m, s).1).sum());
        Ok(q)
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn model(&self) -> &Arc<RateModel> {
        &self.model
    }

    pub fn dimension(&self) -> usize {
        self.space.len()
    }

    /// Target state and rate of `m` from `state`; the rate is 0 for a no-op.
    #[inline]
    fn move_rate(&self, m: &Move, state: usize) -> (usize, f64) {
        match *m {
            Move::Exchange { bond, x, y } => {
                let (ox, oy) = ((state >> x) & 1 == 1, (state >> y) & 1 == 1);
                let target = state ^ (1 << x) ^ (1 << y);
                (target, self.model.exchange_rate(bond, ox, oy))
            }
            Move::Flip { slot, x } => (state ^ (1 << x), self.model.slot_flip_rate(slot, (state >> x) & 1 == 1)),
        }
    }

    /// Exit rate `-Q(s, s)`.
    pub fn exit_rate(&self, state: usize) -> f64 {
        self.exit[state]
    }

    pub fn max_exit_rate(&self) -> f64 {
        self.exit.iter().copied().fold(0.0, f64::max)
    }

    /// Row `state` as `(column, value)` pairs, diagonal last; off-diagonal targets are distinct.
    pub fn row(&self, state: usize) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = self
            .moves
            .iter()
            .map(|m| self.move_rate(m, state))
            .filter(|&(_, r)| r > 0.0)
            .collect();
        out.push((state, -self.exit[state]));
        out
    }

    /// `Q h`.
    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        self.blocks(|s| {
            let mut acc = -self.exit[s] * h[s];
            for m in &self.moves {
                let (t, r) = self.move_rate(m, s);
                acc += r * h[t];
            }
            acc
        })
    }

    /// `mu Q`. Uses that the only states leading into `s` are its images under the moves.
    pub fn apply_left(&self, mu: &[f64]) -> Vec<f64> {
        self.blocks(|s| {
            let mut acc = -self.exit[s] * mu[s];
            for m in &self.moves {
                let (t, _) = self.move_rate(m, s);
                let (_, r) = self.move_rate(m, t);
                acc += mu[t] * r;
            }
            acc
        })
    }

    fn blocks(&self, f: impl Fn(usize) -> f64 + Sync + Send) -> Vec<f64> {
        let n = self.dimension();
        let tasks = n.div_ceil(ROWS_PER_TASK);
        self.execution
            .map(tasks, |b| {
                let lo = b * ROWS_PER_TASK;
                (lo..(lo + ROWS_PER_TASK).min(n)).map(&f).collect::<Vec<f64>>()
            })
            .concat()
    }

    /// Whether every state reaches every other (forward and backward search from state 0).
    pub fn is_irreducible(&self) -> bool {
        let n = self.dimension();
        for backward in [false, true] {
            let mut seen = vec![false; n];
            let mut stack = vec![0usize];
            seen[0] = true;
            let mut count = 1;
            while let Some(s) = stack.pop() {
                for m in &self.moves {
                    let (t, r) = self.move_rate(m, s);
                    let r = if backward { self.move_rate(m, t).1 } else { r };
                    if r > 0.0 && !seen[t] {
                        seen[t] = true;
                        count += 1;
                        stack.push(t);
                    }
                }
            }
            if count != n {
                return false;
            }
        }
        true
    }
}

/// Result of [`stationary_exact`].
#[derive(Clone, Debug)]
pub struct Stationary {
    pub probabilities: Vec<f64>,
    /// `max |nu Q|`.
    pub residual: f64,
    pub iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Restarted GMRES with right preconditioning by `inv_diag`. Returns the number of inner iterations.
fn gmres(
    apply: &dyn Fn(&[f64]) -> Vec<f64>,
    inv_diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    restart: usize,
    max_restarts: usize,
    tol: f64,
) -> usize {
    let n = b.len();
    let bnorm = norm(b).max(f64::MIN_POSITIVE);
    let mut iterations = 0;
    for _ in 0..max_restarts {
        let ax = apply(x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let beta = norm(&r);
        if beta <= tol * bnorm {
            break;
        }
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut h = vec![vec![0.0; restart]; restart + 1];
        let (mut cs, mut sn) = (vec![0.0; restart], vec![0.0; restart]);
        let mut g = vec![0.0; restart + 1];
        g[0] = beta;
        let mut k = 0;
        for j in 0..restart {
            iterations += 1;
            let z: Vec<f64> = v[j].iter().zip(inv_diag).map(|(a, d)| a * d).collect();
            let mut w = apply(&z);
            for (i, vi) in v.iter().enumerate() {
                let hij = dot(&w, vi);
                h[i][j] = hij;
                for (wk, vk) in w.iter_mut().zip(vi) {
                    *wk -= hij * vk;
                }
            }
            let wn = norm(&w);
            h[j + 1][j] = wn;
            for i in 0..j {
                let t = cs[i] * h[i][j] + sn[i] * h[i + 1][j];
                h[i + 1][j] = -sn[i] * h[i][j] + cs[i] * h[i + 1][j];
                h[i][j] = t;
            }
            let denom = h[j][j].hypot(h[j + 1][j]);
            cs[j] = h[j][j] / denom;
            sn[j] = h[j + 1][j] / denom;
            h[j][j] = denom;
            h[j + 1][j] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            k = j + 1;
            if g[j + 1].abs() <= tol * bnorm || wn == 0.0 {
                break;
            }
            v.push(w.iter().map(|x| x / wn).collect());
        }
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let s: f64 = (i + 1..k).map(|l| h[i][l] * y[l]).sum();
            y[i] = (g[i] - s) / h[i][i];
        }
        for idx in 0..n {
            let c: f64 = (0..k).map(|i| y[i] * v[i][idx]).sum();
            x[idx] += inv_diag[idx] * c;
        }
    }
    iterations
}

/// The unique `nu` with `nu Q = 0`, `sum nu = 1`.
///
/// Solves `Q^T nu = 0` with the first equation replaced by the normalization,
/// by preconditioned GMRES followed by iterative refinement.
pub fn stationary_exact(q: &GeneratorMatrix) -> Result<Stationary> {
    let n = q.dimension();
    let op = |x: &[f64]| {
        let mut y = q.apply_left(x);
        y[0] = x.iter().sum();
        y
    };
    let inv_diag: Vec<f64> = (0..n)
        .map(|s| {
            if s == 0 {
                1.0
            } else if q.exit_rate(s) > 0.0 {
                -1.0 / q.exit_rate(s)
            } else {
                1.0
            }
        })
        .collect();
    let mut b = vec![0.0; n];
    b[0] = 1.0;
    let restart = (1usize << 26).checked_div(n).unwrap_or(1).clamp(8, 80).min(n.max(1));
    let mut x = vec![1.0 / n as f64; n];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    for _ in 0..4 {
        let ax = op(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let mut dx = vec![0.0; n];
        iterations += gmres(&op, &inv_diag, &r, &mut dx, restart, 400, 1e-15);
        for (a, d) in x.iter_mut().zip(&dx) {
            *a += d;
        }
        let total: f64 = x.iter().sum();
        let nu: Vec<f64> = x.iter().map(|v| v / total).collect();
        residual = q.apply_left(&nu).iter().fold(0.0, |m, v| m.max(v.abs()));
        if residual <= STATIONARY_RESIDUAL * 1e-2 {
            break;
        }
    }
    let total: f64 = x.iter().sum();
    let probabilities: Vec<f64> = x.iter().map(|v| v / total).collect();
    let floor = probabilities.iter().copied().fold(f64::INFINITY, f64::min);
    if residual > STATIONARY_RESIDUAL || floor < -STATIONARY_RESIDUAL {
        return Err(Error::Solver(format!(
            "stationary solve stalled: residual {residual:e}, smallest entry {floor:e}"
        )));
    }
    Ok(Stationary {
        probabilities,
        residual,
        iterations,
    })
}

/// Chunk size `Lambda tau` of the uniformization series.
const UNIFORMIZATION_CHUNK: f64 = 30.0;

/// `mu_0 exp(t Q)` by uniformization.
pub fn evolve(q: &GeneratorMatrix, mu0: &[f64], t: f64) -> Result<Vec<f64>> {
    if mu0.len() != q.dimension() {
        return Err(Error::domain(format!("distribution has {} entries, expected {}", mu0.len(), q.dimension())));
    }
    if !(t >= 0.0) {
        return Err(Error::domain(format!("time must be >= 0, got {t}")));
    }
    let lambda = q.max_exit_rate() * 1.02;
    if t == 0.0 || lambda == 0.0 {
        return Ok(mu0.to_vec());
    }
    let chunks = (lambda * t / UNIFORMIZATION_CHUNK).ceil().max(1.0) as usize;
    let lt = lambda * t / chunks as f64;
    let mut mu = mu0.to_vec();
    for _ in 0..chunks {
        // Poisson(lt) weights by recursion; sum until the tail is below 1e-17.
        let mut weight = (-lt).exp();
        let mut term = mu.clone();
        let mut acc: Vec<f64> = term.iter().map(|v| v * weight).collect();
        let mut cumulative = weight;
        let mut k = 0usize;
        while 1.0 - cumulative > 1e-17 && k < 10_000 {
            k += 1;
            let qt = q.apply_left(&term);
            for (a, b) in term.iter_mut().zip(&qt) {
                *a += b / lambda;
            }
            weight *= lt / k as f64;
            cumulative += weight;
            for (a, b) in acc.iter_mut().zip(&term) {
                *a += weight * b;
            }
            if k as f64 > lt && weight < 1e-18 {
                break;
            }
        }
        mu = acc;
    }
    Ok(mu)
}

/// `sum mu log(mu / nu)`; `+inf` when `nu` vanishes where `mu` does not.
pub fn relative_entropy(mu: &[f64], nu: &[f64]) -> f64 {
    let mut h = 0.0;
    for (&m, &n) in mu.iter().zip(nu) {
        if m > 0.0 {
            if n <= 0.0 {
                return f64::INFINITY;
            }
            h += m * (m / n).ln();
        }
    }
    h
}

/// Product Bernoulli measure with occupation probability `p[x]` at site `x`.
pub fn product_measure(space: &StateSpace, p: &[f64]) -> Vec<f64> {
    let n = space.sites();
    (0..space.len())
        .map(|s| {
            (0..n)
                .map(|x| if (s >> x) & 1 == 1 { p[x] } else { 1.0 - p[x] })
                .product()
        })
        .collect()
}

/// Site probabilities `sigmoid(alpha(x) + lambda_0(b))` of the reversible product measure.
pub fn reservoir_probabilities(field: &DisorderField, ctx: &ThermoContext, b: f64) -> Result<Vec<f64>> {
    let lambda = ctx.lambda0(b)?;
    Ok(field.values().iter().map(|&a| sigmoid(a + lambda)).collect())
}

/// `P(eta(x) = 1)` for every site.
pub fn occupation_marginals(space: &StateSpace, nu: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; space.sites()];
    for (s, &p) in nu.iter().enumerate() {
        for (x, o) in out.iter_mut().enumerate() {
            if (s >> x) & 1 == 1 {
                *o += p;
            }
        }
    }
    out
}

/// `Cov(eta(x), eta(y))` under `nu`.
pub fn covariance(nu: &[f64], x: usize, y: usize) -> f64 {
    let (mut ex, mut ey, mut exy) = (0.0, 0.0, 0.0);
    for (s, &p) in nu.iter().enumerate() {
        let a = ((s >> x) & 1) as f64;
        let b = ((s >> y) & 1) as f64;
        ex += p * a;
        ey += p * b;
        exy += p * a * b;
    }
    exy - ex * ey
}

/// Restricts Dirichlet forms to some bonds and boundary sites.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FormMask {
    pub bonds: Vec<bool>,
    pub boundary_slots: Vec<bool>,
}

impl FormMask {
    /// Bonds with both ends in `block(center, radius)` and boundary sites inside it.
    pub fn block(model: &RateModel, center: usize, radius: usize) -> Self {
        let lattice = model.lattice();
        let mut inside = vec![false; lattice.site_count()];
        for x in lattice.block(center, radius) {
            inside[x] = true;
        }
        FormMask {
            bonds: lattice.bonds().iter().map(|b| inside[b.from] && inside[b.to]).collect(),
            boundary_slots: model.boundary_sites().iter().map(|&x| inside[x]).collect(),
        }
    }
}

/// `(bulk, boundary)` Dirichlet forms of `h` under `nu`:
/// `1/2 sum_moves sum_eta nu(eta) c(eta) (h(eta') - h(eta))^2`.
pub fn dirichlet_forms(q: &GeneratorMatrix, h: &[f64], nu: &[f64], mask: Option<&FormMask>) -> Result<(f64, f64)> {
    let n = q.dimension();
    if h.len() != n || nu.len() != n {
        return Err(Error::domain("function and measure must live on the state space"));
    }
    let (mut bulk, mut boundary) = (0.0, 0.0);
    for m in &q.moves {
        let keep = match (m, mask) {
            (_, None) => true,
            (Move::Exchange { bond, .. }, Some(mk)) => mk.bonds[*bond],
            (Move::Flip { slot, .. }, Some(mk)) => mk.boundary_slots[*slot],
        };
        if !keep {
            continue;
        }
        let mut acc = 0.0;
        for s in 0..n {
            let (t, r) = q.move_rate(m, s);
            if r > 0.0 {
                acc += nu[s] * r * (h[t] - h[s]).powi(2);
            }
        }
        match m {
            Move::Exchange { .. } => bulk += 0.5 * acc,
            Move::Flip { .. } => boundary += 0.5 * acc,
        }
    }
    Ok((bulk, boundary))
}

/// `<Q h, h>_nu`.
pub fn generator_inner(q: &GeneratorMatrix, h: &[f64], nu: &[f64]) -> f64 {
    let qh = q.apply(h);
    nu.iter().zip(&qh).zip(h).map(|((n, a), b)| n * a * b).sum()
}
