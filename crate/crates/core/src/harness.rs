//! Experiment configuration, the two convergence experiments, the Fick
//! cross-check and their file outputs.
//!
//! Artifacts are written to `{output}/{experiment}/{slot}/{kind}.csv`, where
//! `slot` is the half-length `N` for per-size artifacts, `pde` for the
//! standalone solver and `diffusion` for estimated tables. Every JSON report
//! embeds the SHA-256 of the canonical config and the module versions.
//!
//! Seeds: the field for `(N, sample)` uses `derive_seed(disorder.seed, [N, sample])`;
//! replica `r` of sample `s` draws its initial configuration and its
//! trajectory from independent streams of `schedule.seed` tagged by `(N, s, r)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{self, BasisSpec, DiffusionTensorTable, LocalFunctionBasis, SamplingOptions};
use crate::disorder::{self, DisorderField, DisorderLaw};
use crate::dynamics::{self, coarse_grain_values, run_until, Kmc, RateModel, Recording, TrajectoryRecorder};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::lattice::{self, CylinderLattice, Face};
use crate::oracle;
use crate::pde::{self, FluxFunction, Layout, MacroField, MacroGrid, StepPolicy};
use crate::rng::derive_seed;
use crate::thermo::{self, logit, sample_profile_configuration, BoundaryData, DensityProfile, ThermoContext};

/// Behavioural revision recorded in run metadata.
pub const MODULE_VERSION: &str = "1.0.0";

/// Largest `max |nu_exact - nu_product|` accepted by the oracle run with equal reservoirs.
pub const ORACLE_PRODUCT_TOLERANCE: f64 = 1e-10;

const INITIAL_STREAM: u64 = 0x1417_1A15;
const DYNAMICS_STREAM: u64 = 0xD7A3_1C55;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// One experiment, read from a single JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory name under `output`; a single path component.
    pub experiment: String,
    pub lattice: LatticeSpec,
    #[serde(default)]
    pub disorder: DisorderSpec,
    pub boundary: BoundaryData,
    /// Macroscopic initial profile `rho_0`.
    pub initial: DensityProfile,
    #[serde(default)]
    pub diffusion: DiffusionSource,
    pub schedule: Schedule,
    #[serde(default)]
    pub pde: PdeSpec,
    #[serde(default)]
    pub coarse_graining: CoarseGraining,
    #[serde(default)]
    pub hydrostatic: HydrostaticSpec,
    #[serde(default)]
    pub fick: FickSpec,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Root of all artifacts; relative paths resolve against the working directory.
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub dim: usize,
    /// Half-lengths `N`, strictly increasing.
    pub sizes: Vec<usize>,
    /// Side of the transverse torus; `N` when absent. Ignored for `d = 1`.
    #[serde(default)]
    pub transverse_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisorderSpec {
    pub law: DisorderLaw,
    pub seed: u64,
}

impl Default for DisorderSpec {
    fn default() -> Self {
        DisorderSpec {
            law: DisorderLaw::ConstantZero,
            seed: 0,
        }
    }
}

/// Where `D(rho)` comes from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DiffusionSource {
    /// `D = 1`; only valid without disorder.
    #[default]
    Identity,
    /// A table written by `estimate-diffusion`.
    Table { csv: PathBuf, metadata: PathBuf },
    /// Estimate the table before running.
    Estimate {
        basis: BasisSpec,
        grid: Vec<f64>,
        samples: u64,
        seed: u64,
        #[serde(default = "default_batches")]
        batches: usize,
    },
}

fn default_batches() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub t_end: f64,
    /// Observation times inside `[0, t_end]`, nondecreasing.
    #[serde(default)]
    pub checkpoints: Vec<f64>,
    pub replicas: usize,
    #[serde(default = "one")]
    pub disorder_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

/// Grid for the standalone `pde-solve` run. Comparisons with the lattice use a
/// node grid matched to the sites instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdeSpec {
    pub axial_cells: usize,
    pub transverse_cells: usize,
    pub layout: Layout,
    /// Fraction of the stability limit used as time step.
    pub step_fraction: f64,
}

impl Default for PdeSpec {
    fn default() -> Self {
        PdeSpec {
            axial_cells: 256,
            transverse_cells: 16,
            layout: Layout::Cell,
            step_fraction: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoarseGraining {
    /// Macroscopic box size `a`: boxes hold `floor(a N)` sites per axis, rounded down to odd.
    pub box_fraction: f64,
}

impl Default for CoarseGraining {
    fn default() -> Self {
        CoarseGraining { box_fraction: 0.125 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HydrostaticSpec {
    /// Initial burn-in, macroscopic time.
    pub burn_in: f64,
    /// Burn-in is extended in steps of `burn_in` while the flux test fails, up to this total.
    pub max_burn_in: f64,
    /// Length of the flux-stationarity probe closing each burn-in stage.
    pub probe: f64,
    /// Section fluxes must agree within this many standard errors.
    pub sigmas: f64,
    /// Length of the time-averaging window after burn-in.
    pub window: f64,
}

impl Default for HydrostaticSpec {
    fn default() -> Self {
        HydrostaticSpec {
            burn_in: 10.0,
            max_burn_in: 40.0,
            probe: 1.0,
            sigmas: 3.0,
            window: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FickSpec {
    /// Degree of the polynomial fitted to the local chemical potential profile.
    pub degree: usize,
    /// Density at which the Fick-fitted `D_11` is read off; mean of the reservoirs when absent.
    pub mid_density: Option<f64>,
}

impl Default for FickSpec {
    fn default() -> Self {
        FickSpec {
            degree: 5,
            mid_density: None,
        }
    }
}

/// Optional pass/fail thresholds on the disorder-averaged distances.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Bound on every L1 distance at the largest `N`.
    pub l1_max: Option<f64>,
    /// Require L1 strictly decreasing in `N` at every time.
    pub decreasing: bool,
    /// Bound on `|fitted D_11 / variational D_11 - 1|`.
    pub fick_band: Option<f64>,
}

impl ExperimentConfig {
    /// Parses and validates; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { "<root>".to_string() } else { path };
            Error::config(path, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.is_empty()
            || self.experiment.contains(['/', '\\'])
            || self.experiment == "."
            || self.experiment == ".."
        {
            return Err(Error::config("experiment", "must be a single nonempty path component"));
        }
        let l = &self.lattice;
        if l.dim == 0 {
            return Err(Error::config("lattice.dim", "dimension must be at least 1"));
        }
        if l.sizes.is_empty() {
            return Err(Error::config("lattice.sizes", "needs at least one half-length"));
        }
        if l.sizes[0] == 0 {
            return Err(Error::config("lattice.sizes[0]", "half-lengths must be positive"));
        }
        if let Some(k) = l.sizes.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::config(
                format!("lattice.sizes[{}]", k + 1),
                format!("sizes must be strictly increasing, got {:?}", l.sizes),
            ));
        }
        if l.transverse_size == Some(0) {
            return Err(Error::config("lattice.transverse_size", "must be positive"));
        }
        self.disorder
            .law
            .validate()
            .map_err(|e| Error::config("disorder.law", e.to_string()))?;
        self.boundary.validate("boundary")?;
        self.initial.validate("initial")?;
        match &self.diffusion {
            DiffusionSource::Identity if !self.disorder.law.is_degenerate() => {
                return Err(Error::config(
                    "diffusion",
                    "a diffusion table (kind `table` or `estimate`) is required when the disorder is not zero",
                ));
            }
            DiffusionSource::Estimate {
                grid, samples, batches, ..
            } => {
                if grid.is_empty() || grid.iter().any(|&r| !(r > 0.0 && r < 1.0)) || grid.windows(2).any(|w| w[1] <= w[0])
                {
                    return Err(Error::config(
                        "diffusion.grid",
                        format!("grid must be nonempty and increasing inside (0, 1), got {grid:?}"),
                    ));
                }
                if *samples == 0 {
                    return Err(Error::config("diffusion.samples", "must be positive"));
                }
                if *batches < 2 || (*batches as u64) > *samples {
                    return Err(Error::config("diffusion.batches", "must lie in [2, samples]"));
                }
            }
            _ => {}
        }
        let s = &self.schedule;
        if !(s.t_end.is_finite() && s.t_end >= 0.0) {
            return Err(Error::config("schedule.t_end", format!("must be finite and >= 0, got {}", s.t_end)));
        }
        for (k, &t) in s.checkpoints.iter().enumerate() {
            if !(0.0..=s.t_end).contains(&t) {
                return Err(Error::config(
                    format!("schedule.checkpoints[{k}]"),
                    format!("{t} lies outside [0, {}]", s.t_end),
                ));
            }
            if k > 0 && t < s.checkpoints[k - 1] {
                return Err(Error::config(format!("schedule.checkpoints[{k}]"), "checkpoints must be nondecreasing"));
            }
        }
        if s.replicas == 0 {
            return Err(Error::config("schedule.replicas", "must be positive"));
        }
        if s.disorder_samples == 0 {
            return Err(Error::config("schedule.disorder_samples", "must be positive"));
        }
        let p = &self.pde;
        if p.axial_cells == 0 {
            return Err(Error::config("pde.axial_cells", "must be positive"));
        }
        if p.transverse_cells == 0 {
            return Err(Error::config("pde.transverse_cells", "must be positive"));
        }
        if !(p.step_fraction > 0.0 && p.step_fraction <= 1.0) {
            return Err(Error::config("pde.step_fraction", "must lie in (0, 1]"));
        }
        if !(self.coarse_graining.box_fraction > 0.0 && self.coarse_graining.box_fraction <= 2.0) {
            return Err(Error::config("coarse_graining.box_fraction", "must lie in (0, 2]"));
        }
        let h = &self.hydrostatic;
        for (name, v) in [("burn_in", h.burn_in), ("probe", h.probe), ("sigmas", h.sigmas)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("hydrostatic.{name}"), "must be finite and >= 0"));
            }
        }
        if !(h.window.is_finite() && h.window > 0.0) {
            return Err(Error::config("hydrostatic.window", "must be finite and > 0"));
        }
        if !(h.max_burn_in >= h.burn_in) {
            return Err(Error::config("hydrostatic.max_burn_in", "must be at least burn_in"));
        }
        if let Some(m) = self.fick.mid_density {
            if !(m > 0.0 && m < 1.0) {
                return Err(Error::config("fick.mid_density", "must lie in (0, 1)"));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn transverse_size(&self, n: usize) -> usize {
        if self.lattice.dim == 1 {
            1
        } else {
            self.lattice.transverse_size.unwrap_or(n)
        }
    }

    pub fn lattice_for(&self, n: usize) -> Result<Arc<CylinderLattice>> {
        Ok(Arc::new(CylinderLattice::new(self.lattice.dim, n, self.transverse_size(n))?))
    }

    /// Radius `l` of the comparison boxes at size `N`.
    pub fn box_radius(&self, n: usize) -> usize {
        (self.coarse_graining.box_fraction * n as f64).floor() as usize / 2
    }

    pub fn field_for(&self, lattice: &Arc<CylinderLattice>, sample: usize) -> Result<DisorderField> {
        let seed = derive_seed(self.disorder.seed, &[lattice.half_length() as u64, sample as u64]);
        DisorderField::sample(lattice.clone(), self.disorder.law, seed)
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.output.join(&self.experiment)
    }

    /// `{output}/{experiment}/{slot}/{kind}.{ext}`, creating the directory.
    pub fn artifact(&self, slot: &str, kind: &str, ext: &str) -> Result<PathBuf> {
        let dir = self.experiment_dir().join(slot);
        fs::create_dir_all(&dir)?;
        Ok(dir.join(format!("{kind}.{ext}")))
    }

    fn replica_seeds(&self, n: usize, sample: usize, replica: usize) -> (u64, u64) {
        let tags = [n as u64, sample as u64, replica as u64];
        (
            derive_seed(self.schedule.seed, &[INITIAL_STREAM, tags[0], tags[1], tags[2]]),
            derive_seed(self.schedule.seed, &[DYNAMICS_STREAM, tags[0], tags[1], tags[2]]),
        )
    }
}

// ---------------------------------------------------------------------------
// Metadata
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub experiment: String,
    pub command: String,
    pub config_hash: String,
    pub crate_version: String,
    pub modules: BTreeMap<String, String>,
}

pub fn module_versions() -> BTreeMap<String, String> {
    [
        ("lattice", lattice::MODULE_VERSION),
        ("disorder", disorder::MODULE_VERSION),
        ("thermo", thermo::MODULE_VERSION),
        ("dynamics", dynamics::MODULE_VERSION),
        ("diffusion", diffusion::MODULE_VERSION),
        ("pde", pde::MODULE_VERSION),
        ("oracle", oracle::MODULE_VERSION),
        ("harness", MODULE_VERSION),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

impl RunMetadata {
    pub fn new(config: &ExperimentConfig, command: &str) -> Self {
        RunMetadata {
            experiment: config.experiment.clone(),
            command: command.to_string(),
            config_hash: config.hash(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            modules: module_versions(),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared setup
// ---------------------------------------------------------------------------

/// Thermodynamics, diffusion table and its antiderivative for one config.
#[derive(Clone, Debug)]
pub struct Setup {
    pub ctx: ThermoContext,
    pub table: DiffusionTensorTable,
    pub flux: FluxFunction,
    pub notes: Vec<String>,
}

/// Loads or estimates the diffusion table named by the config.
pub fn load_table(config: &ExperimentConfig, ctx: &ThermoContext, execution: Execution) -> Result<DiffusionTensorTable> {
    let dim = config.lattice.dim;
    let table = match &config.diffusion {
        DiffusionSource::Identity => DiffusionTensorTable::identity(dim),
        DiffusionSource::Table { csv, metadata } => {
            let table = DiffusionTensorTable::read(csv, metadata)?;
            if table.dim() != dim {
                return Err(Error::config(
                    "diffusion.metadata",
                    format!("table is {}-dimensional, lattice {dim}-dimensional", table.dim()),
                ));
            }
            if table.metadata().law != config.disorder.law {
                return Err(Error::config(
                    "diffusion.metadata",
                    format!(
                        "table was estimated for {:?}, the run uses {:?}",
                        table.metadata().law,
                        config.disorder.law
                    ),
                ));
            }
            table
        }
        DiffusionSource::Estimate {
            basis,
            grid,
            samples,
            seed,
            batches,
        } => {
            let basis = LocalFunctionBasis::from_spec(dim, basis)?;
            let options = SamplingOptions::new(*samples, *seed)
                .with_batches(*batches)
                .with_execution(execution);
            diffusion::build_table(&basis, ctx, grid, &options)?.0
        }
    };
    Ok(table)
}

impl Setup {
    pub fn new(config: &ExperimentConfig, execution: Execution) -> Result<Self> {
        let ctx = ThermoContext::new(config.disorder.law)?;
        let table = load_table(config, &ctx, execution)?;
        let flux = pde::antiderivative(&table)?;
        let notes = flux.off_diagonal_warning().into_iter().collect();
        Ok(Setup {
            ctx,
            table,
            flux,
            notes,
        })
    }
}

/// Node grid whose unknowns sit on the sites with `|x_1| < N`; the faces carry the data.
pub fn matched_grid(lattice: &CylinderLattice) -> Result<MacroGrid> {
    let n = lattice.half_length();
    MacroGrid::with_layout(lattice.dim(), 2 * n - 1, lattice.transverse_size(), Layout::Node)
}

/// Values of a matched-grid field on every site, with the reservoir data on the faces.
pub fn site_values(lattice: &CylinderLattice, field: &MacroField) -> Vec<f64> {
    let n = lattice.half_length() as i64;
    let slice = lattice.slice_len();
    (0..lattice.site_count())
        .map(|x| {
            let x1 = lattice.axial(x);
            if x1.abs() == n {
                let face = if x1 < 0 { Face::Minus } else { Face::Plus };
                field.boundary().value(face, &lattice.macro_position(x)[1..])
            } else {
                field.values()[(x1 + n - 1) as usize * slice + lattice.transverse_offset(x)]
            }
        })
        .collect()
}

/// `(1/N) (1/T)^(d-1)`: the macroscopic volume represented by one site.
fn site_weight(lattice: &CylinderLattice) -> f64 {
    1.0 / (lattice.half_length() as f64 * lattice.slice_len() as f64)
}

/// L1 distance of the ensemble mean to `target`, its jackknife standard error and the
/// expected distance if the mean were `target` plus Gaussian noise of the observed size.
fn ensemble_l1(members: &[&[f64]], target: &[f64], weight: f64) -> (f64, Option<f64>, Option<f64>) {
    let r = members.len();
    let sites = target.len();
    let mut mean = vec![0.0; sites];
    for m in members {
        for (a, v) in mean.iter_mut().zip(m.iter()) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= r as f64);
    let l1 = weight * mean.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>();
    if r < 2 {
        return (l1, None, None);
    }
    let rf = r as f64;
    let leave_out: Vec<f64> = members
        .iter()
        .map(|m| {
            weight
                * mean
                    .iter()
                    .zip(m.iter())
                    .zip(target)
                    .map(|((a, v), b)| ((rf * a - v) / (rf - 1.0) - b).abs())
                    .sum::<f64>()
        })
        .collect();
    let lo_mean = leave_out.iter().sum::<f64>() / rf;
    let stderr = ((rf - 1.0) / rf * leave_out.iter().map(|l| (l - lo_mean).powi(2)).sum::<f64>()).sqrt();
    let mut floor = 0.0;
    for (x, &a) in mean.iter().enumerate() {
        let var = members.iter().map(|m| (m[x] - a).powi(2)).sum::<f64>() / (rf - 1.0);
        floor += (var / rf).sqrt();
    }
    let floor = weight * floor * (2.0 / std::f64::consts::PI).sqrt();
    (l1, Some(stderr), Some(floor))
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub n: usize,
    /// Disorder sample, or `None` for the disorder average.
    pub sample: Option<usize>,
    pub time: f64,
    pub l1: f64,
    /// Jackknife standard error over replicas.
    pub stderr: Option<f64>,
    /// Expected L1 from sampling noise alone.
    pub noise_floor: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    /// Observation time; `None` for stationary comparisons.
    pub time: Option<f64>,
    pub l1_by_n: Vec<(usize, f64)>,
    pub strictly_decreasing: bool,
}

/// Outcome of the flux-stationarity test closing the burn-in at one size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurnIn {
    pub n: usize,
    pub burn_in: f64,
    pub stages: usize,
    /// `None` when untestable (fewer than two trajectories or no probe window).
    pub flux_stationary: Option<bool>,
    /// Largest `|deviation| / stderr` over sections in the last probe.
    pub worst_z: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub kind: String,
    pub metadata: RunMetadata,
    pub rows: Vec<ComparisonRow>,
    pub trends: Vec<Trend>,
    pub burn_in: Vec<BurnIn>,
    pub fick: Vec<FickFit>,
    /// `None` when no tolerance is configured.
    pub passed: Option<bool>,
    pub failures: Vec<String>,
    pub notes: Vec<String>,
}

impl ComparisonReport {
    fn new(kind: &str, metadata: RunMetadata, rows: Vec<ComparisonRow>, notes: Vec<String>) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| !(r.l1 >= 0.0 && r.l1.is_finite())) {
            return Err(Error::Estimation(format!("invalid L1 distance {} at N={} t={}", r.l1, r.n, r.time)));
        }
        let mut times: Vec<f64> = Vec::new();
        for r in rows.iter().filter(|r| r.sample.is_none()) {
            if !times.contains(&r.time) {
                times.push(r.time);
            }
        }
        let stationary = kind == "hydrostatic";
        let trends = if stationary {
            vec![Self::trend(None, rows.iter().filter(|r| r.sample.is_none()))]
        } else {
            times
                .iter()
                .map(|&t| Self::trend(Some(t), rows.iter().filter(|r| r.sample.is_none() && r.time == t)))
                .collect()
        };
        Ok(ComparisonReport {
            kind: kind.to_string(),
            metadata,
            rows,
            trends,
            burn_in: Vec::new(),
            fick: Vec::new(),
            passed: None,
            failures: Vec::new(),
            notes,
        })
    }

    fn trend<'a>(time: Option<f64>, rows: impl Iterator<Item = &'a ComparisonRow>) -> Trend {
        let l1_by_n: Vec<(usize, f64)> = rows.map(|r| (r.n, r.l1)).collect();
        let strictly_decreasing = l1_by_n.windows(2).all(|w| w[1].1 < w[0].1);
        Trend {
            time,
            l1_by_n,
            strictly_decreasing,
        }
    }

    /// Disorder-averaged rows.
    pub fn averaged(&self) -> impl Iterator<Item = &ComparisonRow> {
        self.rows.iter().filter(|r| r.sample.is_none())
    }

    fn apply_tolerances(&mut self, tol: &Tolerances) {
        let mut checked = false;
        if let Some(limit) = tol.l1_max {
            checked = true;
            let largest = self.averaged().map(|r| r.n).max();
            let worst: Vec<String> = self
                .averaged()
                .filter(|r| Some(r.n) == largest && r.l1 > limit)
                .map(|r| format!("L1 {} > {limit} at N={} t={}", r.l1, r.n, r.time))
                .collect();
            self.failures.extend(worst);
        }
        if tol.decreasing {
            checked = true;
            let bad: Vec<String> = self
                .trends
                .iter()
                .filter(|t| !t.strictly_decreasing)
                .map(|t| format!("L1 not strictly decreasing in N at t={:?}: {:?}", t.time, t.l1_by_n))
                .collect();
            self.failures.extend(bad);
        }
        if let Some(band) = tol.fick_band {
            checked = true;
            for f in &self.fick {
                match &f.pooled {
                    Some(p) if p.d11_ratio.is_finite() && (p.d11_ratio - 1.0).abs() <= band => {}
                    Some(p) => self.failures.push(format!(
                        "fitted/variational D_11 = {} outside 1 +- {band} at N={}",
                        p.d11_ratio, f.n
                    )),
                    None if f.skipped => {}
                    None => self.failures.push(format!("no Fick estimate at N={}", f.n)),
                }
            }
        }
        if checked {
            self.passed = Some(self.failures.is_empty());
        }
    }

    /// Rows `n,sample,time,l1,stderr,noise_floor`; the average has an empty sample.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["n", "sample", "time", "l1", "stderr", "noise_floor"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.n.to_string(),
                r.sample.map(|s| s.to_string()).unwrap_or_default(),
                r.time.to_string(),
                r.l1.to_string(),
                opt(r.stderr),
                opt(r.noise_floor),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Hydrodynamics
// ---------------------------------------------------------------------------

/// Everything computed at one size of a hydrodynamic run.
#[derive(Clone, Debug)]
pub struct HydrodynamicSize {
    pub n: usize,
    pub lattice: Arc<CylinderLattice>,
    pub box_radius: usize,
    /// Matched-grid PDE solution at each checkpoint.
    pub pde: Vec<MacroField>,
    /// Recordings in `(sample, replica)` order.
    pub recordings: Vec<Recording>,
}

#[derive(Clone, Debug)]
pub struct HydrodynamicRun {
    pub report: ComparisonReport,
    pub sizes: Vec<HydrodynamicSize>,
}

fn checkpoints_of(config: &ExperimentConfig) -> Vec<f64> {
    if config.schedule.checkpoints.is_empty() {
        vec![config.schedule.t_end]
    } else {
        config.schedule.checkpoints.clone()
    }
}

fn models_for(
    config: &ExperimentConfig,
    lattice: &Arc<CylinderLattice>,
    ctx: &ThermoContext,
) -> Result<(Vec<DisorderField>, Vec<Arc<RateModel>>)> {
    let fields: Vec<DisorderField> = (0..config.schedule.disorder_samples)
        .map(|s| config.field_for(lattice, s))
        .collect::<Result<_>>()?;
    let models = fields
        .iter()
        .map(|f| RateModel::new(f, ctx, &config.boundary).map(Arc::new))
        .collect::<Result<_>>()?;
    Ok((fields, models))
}

/// Simulates every `(N, sample, replica)` to the checkpoints and compares the
/// coarse-grained empirical density with the PDE solution from the same `rho_0`.
pub fn run_hydrodynamic(config: &ExperimentConfig, execution: Execution) -> Result<HydrodynamicRun> {
    config.validate()?;
    let setup = Setup::new(config, execution)?;
    let times = checkpoints_of(config);
    let replicas = config.schedule.replicas;
    let samples = config.schedule.disorder_samples;
    let mut rows = Vec::new();
    let mut sizes = Vec::new();
    for &n in &config.lattice.sizes {
        let lattice = config.lattice_for(n)?;
        let radius = config.box_radius(n);
        let weight = site_weight(&lattice);
        let grid = matched_grid(&lattice)?;
        let start = MacroField::from_profile(grid, |u| config.initial.density(u), config.boundary)?;
        let policy = StepPolicy::Stable {
            fraction: config.pde.step_fraction,
        };
        let solution = pde::solve(&start, &setup.flux, config.schedule.t_end, policy, &times)?;
        let targets: Vec<Vec<f64>> = solution
            .checkpoints
            .iter()
            .map(|f| coarse_grain_values(&lattice, &site_values(&lattice, f), radius))
            .collect();

        let (fields, models) = models_for(config, &lattice, &setup.ctx)?;
        let recorder = TrajectoryRecorder::new(times.clone(), radius);
        let recordings: Vec<Recording> = execution
            .map(samples * replicas, |k| {
                let (s, r) = (k / replicas, k % replicas);
                let (init_seed, dyn_seed) = config.replica_seeds(n, s, r);
                let eta = sample_profile_configuration(&fields[s], |u| config.initial.density(u), &setup.ctx, init_seed)?;
                run_until(models[s].clone(), eta, config.schedule.t_end, &recorder, dyn_seed)
            })
            .into_iter()
            .collect::<Result<_>>()?;

        for (k, &t) in times.iter().enumerate() {
            for s in 0..samples {
                let members: Vec<&[f64]> = recordings[s * replicas..(s + 1) * replicas]
                    .iter()
                    .map(|rec| rec.snapshots[k].density.as_slice())
                    .collect();
                let (l1, stderr, noise_floor) = ensemble_l1(&members, &targets[k], weight);
                rows.push(ComparisonRow {
                    n,
                    sample: Some(s),
                    time: t,
                    l1,
                    stderr,
                    noise_floor,
                });
            }
            let members: Vec<&[f64]> = recordings.iter().map(|rec| rec.snapshots[k].density.as_slice()).collect();
            let (l1, stderr, noise_floor) = ensemble_l1(&members, &targets[k], weight);
            rows.push(ComparisonRow {
                n,
                sample: None,
                time: t,
                l1,
                stderr,
                noise_floor,
            });
        }
        sizes.push(HydrodynamicSize {
            n,
            lattice,
            box_radius: radius,
            pde: solution.checkpoints,
            recordings,
        });
    }
    let mut report = ComparisonReport::new("hydrodynamic", RunMetadata::new(config, "simulate"), rows, setup.notes)?;
    report.apply_tolerances(&config.tolerances);
    Ok(HydrodynamicRun { report, sizes })
}

fn coord_header(dim: usize) -> Vec<String> {
    (1..=dim).map(|i| format!("x{i}")).collect()
}

/// Writes `trajectory.csv`, `flux.csv`, `pde.csv` and `comparison.csv` per size and `simulate.json`.
pub fn write_hydrodynamic(config: &ExperimentConfig, run: &HydrodynamicRun) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for size in &run.sizes {
        let slot = size.n.to_string();
        let lattice = &size.lattice;
        let coords: Vec<Vec<String>> = (0..lattice.site_count())
            .map(|x| lattice.site(x).coords.iter().map(|c| c.to_string()).collect())
            .collect();

        let path = config.artifact(&slot, "trajectory", "csv")?;
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["replica".to_string(), "macro_time".to_string()];
        header.extend(coord_header(lattice.dim()));
        header.push("density".into());
        w.write_record(&header)?;
        for (replica, rec) in size.recordings.iter().enumerate() {
            for snap in &rec.snapshots {
                for (x, v) in snap.density.iter().enumerate() {
                    let mut row = vec![replica.to_string(), snap.time.to_string()];
                    row.extend(coords[x].iter().cloned());
                    row.push(v.to_string());
                    w.write_record(&row)?;
                }
            }
        }
        w.flush()?;
        written.push(path);

        let path = config.artifact(&slot, "flux", "csv")?;
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["replica", "section_x1", "cumulative_flux", "elapsed_time"])?;
        let n = size.n as i64;
        for (replica, rec) in size.recordings.iter().enumerate() {
            for snap in &rec.snapshots {
                for (j, c) in snap.crossings.iter().enumerate() {
                    w.write_record([
                        replica.to_string(),
                        (j as i64 - n).to_string(),
                        c.to_string(),
                        snap.time.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        written.push(path);

        let path = config.artifact(&slot, "pde", "csv")?;
        pde::write_checkpoints_csv(&path, &size.pde)?;
        written.push(path);

        let path = config.artifact(&slot, "comparison", "csv")?;
        let sub = ComparisonReport {
            rows: run.report.rows.iter().filter(|r| r.n == size.n).cloned().collect(),
            ..run.report.clone()
        };
        sub.write_csv(&path)?;
        written.push(path);
    }
    let path = config.experiment_dir().join("simulate.json");
    fs::create_dir_all(config.experiment_dir())?;
    write_json(&path, &run.report)?;
    written.push(path);
    Ok(written)
}

// ---------------------------------------------------------------------------
// Hydrostatics
// ---------------------------------------------------------------------------

/// Time-averaged stationary data at one size.
#[derive(Clone, Debug)]
pub struct StationaryRun {
    pub n: usize,
    pub lattice: Arc<CylinderLattice>,
    pub box_radius: usize,
    pub fields: Vec<DisorderField>,
    pub replicas: usize,
    pub burn_in: BurnIn,
    pub window: f64,
    /// Raw time-averaged occupation per trajectory, `(sample, replica)` order.
    pub occupation: Vec<Vec<f64>>,
    /// Net crossings per section during the averaging window, per trajectory.
    pub window_crossings: Vec<Vec<i64>>,
    /// Stationary PDE solution on every site (reservoir values on the faces).
    pub stationary: Vec<f64>,
}

impl StationaryRun {
    /// Macroscopic flux per section per trajectory: crossings per unit time per `N` per cross-section site.
    pub fn section_flux(&self) -> Vec<Vec<f64>> {
        let scale = 1.0 / (self.window * self.n as f64 * self.lattice.slice_len() as f64);
        self.window_crossings
            .iter()
            .map(|c| c.iter().map(|&v| v as f64 * scale).collect())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct HydrostaticRun {
    pub report: ComparisonReport,
    pub sizes: Vec<StationaryRun>,
}

/// Whether per-trajectory section fluxes agree across sections: the deviation of each
/// section from its trajectory's mean must average to zero within `sigmas` standard errors.
pub fn flux_uniformity(fluxes: &[Vec<f64>], sigmas: f64) -> (Option<bool>, Option<f64>) {
    let k = fluxes.len();
    if k < 2 || fluxes[0].is_empty() {
        return (None, None);
    }
    let sections = fluxes[0].len();
    let means: Vec<f64> = fluxes.iter().map(|f| f.iter().sum::<f64>() / sections as f64).collect();
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for j in 0..sections {
        let dev: Vec<f64> = fluxes.iter().zip(&means).map(|(f, m)| f[j] - m).collect();
        let mean = dev.iter().sum::<f64>() / k as f64;
        let var = dev.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
        let se = (var / k as f64).sqrt();
        if se > 0.0 {
            let z = mean.abs() / se;
            worst = worst.max(z);
            ok &= z <= sigmas;
        } else if mean.abs() > 1e-12 {
            worst = f64::INFINITY;
            ok = false;
        }
    }
    (Some(ok), Some(worst))
}

fn run_all(execution: Execution, kmcs: &mut [Kmc], t: f64) -> Result<()> {
    execution.map_mut(kmcs, |_, k| k.run_to(t)).into_iter().collect()
}

/// Burn-in with the flux-stationarity test, then time-averages the occupation and
/// compares the coarse-grained average with the stationary PDE profile.
pub fn run_hydrostatic(config: &ExperimentConfig, execution: Execution) -> Result<HydrostaticRun> {
    config.validate()?;
    if !config.boundary.is_face_constant() {
        return Err(Error::config(
            "boundary",
            "the stationary comparison needs reservoir densities constant on each face",
        ));
    }
    let setup = Setup::new(config, execution)?;
    let spec = &config.hydrostatic;
    let replicas = config.schedule.replicas;
    let samples = config.schedule.disorder_samples;
    let mut rows = Vec::new();
    let mut sizes = Vec::new();
    for &n in &config.lattice.sizes {
        let lattice = config.lattice_for(n)?;
        let radius = config.box_radius(n);
        let weight = site_weight(&lattice);
        let stationary_field = pde::stationary_1d(&setup.flux, matched_grid(&lattice)?, &config.boundary)?;
        let stationary = site_values(&lattice, &stationary_field);
        let target = coarse_grain_values(&lattice, &stationary, radius);

        let (fields, models) = models_for(config, &lattice, &setup.ctx)?;
        let mut kmcs: Vec<Kmc> = execution
            .map(samples * replicas, |k| {
                let (s, r) = (k / replicas, k % replicas);
                let (init_seed, dyn_seed) = config.replica_seeds(n, s, r);
                let eta = sample_profile_configuration(&fields[s], |u| config.initial.density(u), &setup.ctx, init_seed)?;
                Kmc::new(models[s].clone(), eta, dyn_seed)
            })
            .into_iter()
            .collect::<Result<_>>()?;

        let mut t_b = spec.burn_in;
        let mut stages = 0;
        let (stationary_flux, worst_z) = loop {
            stages += 1;
            let probe = spec.probe.min(t_b);
            if probe <= 0.0 {
                run_all(execution, &mut kmcs, t_b)?;
                break (None, None);
            }
            run_all(execution, &mut kmcs, t_b - probe)?;
            let before: Vec<Vec<i64>> = kmcs.iter().map(|k| k.section_crossings().to_vec()).collect();
            run_all(execution, &mut kmcs, t_b)?;
            let scale = 1.0 / (probe * n as f64 * lattice.slice_len() as f64);
            let fluxes: Vec<Vec<f64>> = kmcs
                .iter()
                .zip(&before)
                .map(|(k, b)| {
                    k.section_crossings()
                        .iter()
                        .zip(b)
                        .map(|(&a, &b)| (a - b) as f64 * scale)
                        .collect()
                })
                .collect();
            let (ok, z) = flux_uniformity(&fluxes, spec.sigmas);
            if ok != Some(false) || t_b + spec.burn_in > spec.max_burn_in || spec.burn_in <= 0.0 {
                break (ok, z);
            }
            t_b += spec.burn_in;
        };
        let burn_in = BurnIn {
            n,
            burn_in: t_b,
            stages,
            flux_stationary: stationary_flux,
            worst_z,
        };

        let start: Vec<Vec<i64>> = kmcs
            .iter_mut()
            .map(|k| {
                k.start_occupation_average();
                k.section_crossings().to_vec()
            })
            .collect();
        let t_end = t_b + spec.window;
        run_all(execution, &mut kmcs, t_end)?;
        let occupation: Vec<Vec<f64>> = kmcs
            .iter()
            .map(|k| k.occupation_average().expect("averaging started"))
            .collect();
        let window_crossings: Vec<Vec<i64>> = kmcs
            .iter()
            .zip(&start)
            .map(|(k, s)| k.section_crossings().iter().zip(s).map(|(a, b)| a - b).collect())
            .collect();

        let coarse: Vec<Vec<f64>> = occupation
            .iter()
            .map(|o| coarse_grain_values(&lattice, o, radius))
            .collect();
        for s in 0..samples {
            let members: Vec<&[f64]> = coarse[s * replicas..(s + 1) * replicas].iter().map(|v| v.as_slice()).collect();
            let (l1, stderr, noise_floor) = ensemble_l1(&members, &target, weight);
            rows.push(ComparisonRow {
                n,
                sample: Some(s),
                time: t_end,
                l1,
                stderr,
                noise_floor,
            });
        }
        let members: Vec<&[f64]> = coarse.iter().map(|v| v.as_slice()).collect();
        let (l1, stderr, noise_floor) = ensemble_l1(&members, &target, weight);
        rows.push(ComparisonRow {
            n,
            sample: None,
            time: t_end,
            l1,
            stderr,
            noise_floor,
        });
        sizes.push(StationaryRun {
            n,
            lattice,
            box_radius: radius,
            fields,
            replicas,
            burn_in,
            window: spec.window,
            occupation,
            window_crossings,
            stationary,
        });
    }
    let mut report = ComparisonReport::new("hydrostatic", RunMetadata::new(config, "hydrostatic"), rows, setup.notes.clone())?;
    report.burn_in = sizes.iter().map(|s| s.burn_in.clone()).collect();
    for b in &report.burn_in {
        if b.flux_stationary == Some(false) {
            report.notes.push(format!(
                "N={}: section fluxes still nonuniform after burn-in {} (worst z = {:?})",
                b.n, b.burn_in, b.worst_z
            ));
        }
    }
    report.fick = sizes
        .iter()
        .map(|s| fit_fick(s, &setup.table, &setup.ctx, &config.fick, &config.boundary))
        .collect();
    report.apply_tolerances(&config.tolerances);
    Ok(HydrostaticRun { report, sizes })
}

/// Writes `profile.csv`, `flux.csv` and `fick.csv` per size and `hydrostatic.json`.
pub fn write_hydrostatic(config: &ExperimentConfig, run: &HydrostaticRun) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (size, fick) in run.sizes.iter().zip(&run.report.fick) {
        let slot = size.n.to_string();
        let lattice = &size.lattice;
        let samples = size.fields.len();
        let target = coarse_grain_values(lattice, &size.stationary, size.box_radius);
        let coarse: Vec<Vec<f64>> = size
            .occupation
            .iter()
            .map(|o| coarse_grain_values(lattice, o, size.box_radius))
            .collect();
        let mean_of = |range: std::ops::Range<usize>| -> Vec<f64> {
            let k = range.len() as f64;
            let mut m = vec![0.0; lattice.site_count()];
            for c in &coarse[range] {
                for (a, v) in m.iter_mut().zip(c) {
                    *a += v;
                }
            }
            m.iter_mut().for_each(|a| *a /= k);
            m
        };

        let path = config.artifact(&slot, "profile", "csv")?;
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["sample".to_string()];
        header.extend(coord_header(lattice.dim()));
        header.extend(["empirical".to_string(), "stationary".to_string()]);
        w.write_record(&header)?;
        let mut blocks: Vec<(String, Vec<f64>)> = (0..samples)
            .map(|s| (s.to_string(), mean_of(s * size.replicas..(s + 1) * size.replicas)))
            .collect();
        blocks.push((String::new(), mean_of(0..coarse.len())));
        for (label, values) in &blocks {
            for x in 0..lattice.site_count() {
                let mut row = vec![label.clone()];
                row.extend(lattice.site(x).coords.iter().map(|c| c.to_string()));
                row.extend([values[x].to_string(), target[x].to_string()]);
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        written.push(path);

        let path = config.artifact(&slot, "flux", "csv")?;
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["replica", "section_x1", "cumulative_flux", "elapsed_time"])?;
        let n = size.n as i64;
        for (replica, c) in size.window_crossings.iter().enumerate() {
            for (j, v) in c.iter().enumerate() {
                w.write_record([
                    replica.to_string(),
                    (j as i64 - n).to_string(),
                    v.to_string(),
                    size.window.to_string(),
                ])?;
            }
        }
        w.flush()?;
        written.push(path);

        let path = config.artifact(&slot, "fick", "csv")?;
        fick.write_csv(&path)?;
        written.push(path);
    }
    fs::create_dir_all(config.experiment_dir())?;
    let path = config.experiment_dir().join("hydrostatic.json");
    write_json(&path, &run.report)?;
    written.push(path);
    Ok(written)
}

// ---------------------------------------------------------------------------
// Fick cross-check
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FickSection {
    pub section_x1: i64,
    pub u: f64,
    pub rho: f64,
    pub measured: f64,
    pub measured_stderr: Option<f64>,
    pub predicted: f64,
    pub ratio: f64,
    pub ratio_stderr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FickSummary {
    /// Disorder sample, or `None` for the pooled estimate.
    pub sample: Option<usize>,
    pub sections: Vec<FickSection>,
    pub median_ratio: f64,
    pub mid_density: f64,
    /// `u` where the fitted profile crosses `mid_density`, if it does.
    pub mid_position: Option<f64>,
    /// Mean measured flux divided by `-d rho/du` at `mid_position`.
    pub fitted_d11: f64,
    pub variational_d11: f64,
    pub d11_ratio: f64,
    pub d11_ratio_stderr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FickFit {
    pub n: usize,
    pub skipped: bool,
    pub reason: Option<String>,
    pub samples: Vec<FickSummary>,
    pub pooled: Option<FickSummary>,
}

impl FickFit {
    fn skipped(n: usize, reason: String) -> Self {
        FickFit {
            n,
            skipped: true,
            reason: Some(reason),
            samples: Vec::new(),
            pooled: None,
        }
    }

    /// Rows `sample,section_x1,u,rho,measured,measured_stderr,predicted,ratio,ratio_stderr`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "sample",
            "section_x1",
            "u",
            "rho",
            "measured",
            "measured_stderr",
            "predicted",
            "ratio",
            "ratio_stderr",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for summary in self.samples.iter().chain(self.pooled.iter()) {
            let label = summary.sample.map(|s| s.to_string()).unwrap_or_default();
            for s in &summary.sections {
                w.write_record([
                    label.clone(),
                    s.section_x1.to_string(),
                    s.u.to_string(),
                    s.rho.to_string(),
                    s.measured.to_string(),
                    opt(s.measured_stderr),
                    s.predicted.to_string(),
                    s.ratio.to_string(),
                    opt(s.ratio_stderr),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Least-squares polynomial of `degree` through `(u, y)`, coefficients lowest first.
pub fn polynomial_fit(u: &[f64], y: &[f64], degree: usize) -> Option<Vec<f64>> {
    if u.len() != y.len() || u.len() <= degree {
        return None;
    }
    let v = DMatrix::from_fn(u.len(), degree + 1, |i, k| u[i].powi(k as i32));
    let rhs = DVector::from_column_slice(y);
    let coef = v.svd(true, true).solve(&rhs, 1e-12).ok()?;
    Some(coef.iter().copied().collect())
}

fn poly_eval(c: &[f64], u: f64) -> (f64, f64) {
    let mut value = 0.0;
    let mut slope = 0.0;
    for (k, &a) in c.iter().enumerate().rev() {
        slope = slope * u + value;
        value = value * u + a;
        let _ = k;
    }
    (value, slope)
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

fn mean_and_stderr(values: &[f64]) -> (f64, Option<f64>) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, Some((var / k).sqrt()))
}

/// Local chemical potential per axial layer: `logit(occupation) - alpha`, averaged over the cross-section.
fn layer_potential(lattice: &CylinderLattice, field: &DisorderField, occupation: &[f64]) -> Vec<f64> {
    let slice = lattice.slice_len();
    let mut out = vec![0.0; lattice.axial_len()];
    for x in 0..lattice.site_count() {
        let p = occupation[x].clamp(1e-9, 1.0 - 1e-9);
        out[x / slice] += logit(p) - field.at(x);
    }
    out.iter_mut().for_each(|v| *v /= slice as f64);
    out
}

/// Fitted `rho(u)` and `d rho/du` from polynomial coefficients of `lambda(u)`.
fn fitted_profile(coef: &[f64], ctx: &ThermoContext, u: f64) -> (f64, f64) {
    let (lam, dlam) = poly_eval(coef, u);
    (ctx.rho_of_lambda(lam), ctx.susceptibility(lam) * dlam)
}

/// Where the fitted profile crosses `level`, by bisection on `[-1, 1]`.
fn crossing(coef: &[f64], ctx: &ThermoContext, level: f64) -> Option<f64> {
    let g = |u: f64| fitted_profile(coef, ctx, u).0 - level;
    if g(-1.0) * g(1.0) > 0.0 {
        return None;
    }
    let (mut lo, mut hi) = (-1.0, 1.0);
    for _ in 0..100 {
        let m = 0.5 * (lo + hi);
        if g(lo) * g(m) <= 0.0 {
            hi = m;
        } else {
            lo = m;
        }
    }
    Some(0.5 * (lo + hi))
}

/// `current / (-d rho/du)` where the fitted profile crosses `level`.
fn fitted_d11(u: &[f64], potential: &[f64], current: f64, ctx: &ThermoContext, degree: usize, level: f64) -> Option<(f64, f64)> {
    let coef = polynomial_fit(u, potential, degree)?;
    let um = crossing(&coef, ctx, level)?;
    Some((um, -current / fitted_profile(&coef, ctx, um).1))
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, v) in out.iter_mut().zip(r) {
            *a += v;
        }
    }
    out.iter_mut().for_each(|a| *a /= rows.len() as f64);
    out
}

/// Summary over the trajectories `members`; `potentials` holds one layer profile per trajectory.
#[allow(clippy::too_many_arguments)]
fn fick_summary(
    run: &StationaryRun,
    sample: Option<usize>,
    members: std::ops::Range<usize>,
    potentials: &[Vec<f64>],
    table: &DiffusionTensorTable,
    ctx: &ThermoContext,
    spec: &FickSpec,
    mid_density: f64,
) -> Option<FickSummary> {
    let n = run.n as i64;
    let u: Vec<f64> = (-n..=n).map(|x| x as f64 / n as f64).collect();
    let potentials = &potentials[members.clone()];
    let potential = mean_rows(potentials);
    let coef = polynomial_fit(&u, &potential, spec.degree)?;
    let fluxes = run.section_flux();
    let fluxes = &fluxes[members];
    let mut sections = Vec::with_capacity(2 * run.n);
    for j in 0..2 * run.n {
        let x1 = j as i64 - n;
        let uj = (x1 as f64 + 0.5) / n as f64;
        let (rho, drho) = fitted_profile(&coef, ctx, uj);
        let predicted = -table.entry(rho, 0, 0) * drho;
        let column: Vec<f64> = fluxes.iter().map(|f| f[j]).collect();
        let (measured, measured_stderr) = mean_and_stderr(&column);
        sections.push(FickSection {
            section_x1: x1,
            u: uj,
            rho,
            measured,
            measured_stderr,
            predicted,
            ratio: measured / predicted,
            ratio_stderr: measured_stderr.map(|s| s / predicted.abs()),
        });
    }
    let mut ratios: Vec<f64> = sections.iter().map(|s| s.ratio).collect();
    let median_ratio = median(&mut ratios);

    // Stationary current is section-independent, so average it over sections first.
    let per_member: Vec<f64> = fluxes.iter().map(|f| f.iter().sum::<f64>() / f.len() as f64).collect();
    let k = per_member.len();
    let current = per_member.iter().sum::<f64>() / k as f64;
    let variational_d11 = table.entry(mid_density, 0, 0);
    let estimate = fitted_d11(&u, &potential, current, ctx, spec.degree, mid_density);
    let (mid_position, d11) = match estimate {
        Some((um, d)) => (Some(um), d),
        None => (None, f64::NAN),
    };
    // Jackknife over trajectories, refitting the profile each time.
    let mut d11_stderr = None;
    if k >= 2 && estimate.is_some() {
        let kf = k as f64;
        let leave_out: Option<Vec<f64>> = (0..k)
            .map(|i| {
                let pot: Vec<f64> = potential
                    .iter()
                    .zip(&potentials[i])
                    .map(|(m, p)| (kf * m - p) / (kf - 1.0))
                    .collect();
                let cur = (kf * current - per_member[i]) / (kf - 1.0);
                fitted_d11(&u, &pot, cur, ctx, spec.degree, mid_density).map(|(_, d)| d)
            })
            .collect();
        if let Some(lo) = leave_out {
            let m = lo.iter().sum::<f64>() / kf;
            d11_stderr = Some(((kf - 1.0) / kf * lo.iter().map(|d| (d - m).powi(2)).sum::<f64>()).sqrt());
        }
    }
    Some(FickSummary {
        sample,
        sections,
        median_ratio,
        mid_density,
        mid_position,
        fitted_d11: d11,
        variational_d11,
        d11_ratio: d11 / variational_d11,
        d11_ratio_stderr: d11_stderr.map(|s| s / variational_d11),
    })
}

/// Compares measured section fluxes with `-D_11(rho(u)) d rho/du` for the fitted
/// stationary profile. The profile is fitted in chemical-potential space,
/// `lambda(x) = logit(occupation(x)) - alpha(x)`, which removes the site-to-site
/// modulation of the density by the field.
pub fn fit_fick(
    run: &StationaryRun,
    table: &DiffusionTensorTable,
    ctx: &ThermoContext,
    spec: &FickSpec,
    boundary: &BoundaryData,
) -> FickFit {
    let lattice = &run.lattice;
    let mid = |face: Face| {
        let probe: Vec<f64> = (0..lattice.slice_len())
            .map(|t| boundary.value(face, &lattice.macro_position(t)[1..]))
            .collect();
        probe.iter().sum::<f64>() / probe.len() as f64
    };
    let (bm, bp) = (mid(Face::Minus), mid(Face::Plus));
    if (bp - bm).abs() < 1e-9 {
        return FickFit::skipped(run.n, format!("flat profile: equal reservoir densities {bm}"));
    }
    let mid_density = spec.mid_density.unwrap_or(0.5 * (bm + bp));
    let r = run.replicas;
    let potentials: Vec<Vec<f64>> = run
        .occupation
        .iter()
        .enumerate()
        .map(|(k, o)| layer_potential(lattice, &run.fields[k / r], o))
        .collect();
    let samples = (0..run.fields.len())
        .filter_map(|s| fick_summary(run, Some(s), s * r..(s + 1) * r, &potentials, table, ctx, spec, mid_density))
        .collect();
    let pooled = fick_summary(run, None, 0..potentials.len(), &potentials, table, ctx, spec, mid_density);
    let reason = pooled.is_none().then(|| format!("polynomial fit of degree {} failed", spec.degree));
    FickFit {
        n: run.n,
        skipped: false,
        reason,
        samples,
        pooled,
    }
}

// ---------------------------------------------------------------------------
// Standalone PDE run
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct PdeSummary {
    pub metadata: RunMetadata,
    pub grid: MacroGrid,
    pub steps: u64,
    pub time_step: f64,
    pub checkpoints: Vec<f64>,
    /// `(time, ||upper - lower||_1)` for the trajectories from `rho_0 = 0` and `rho_0 = 1`.
    pub envelope_gaps: Vec<(f64, f64)>,
    pub envelope_order_violation: f64,
    pub envelope_lower_decrease: f64,
    pub envelope_upper_increase: f64,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct PdeRun {
    pub summary: PdeSummary,
    pub checkpoints: Vec<MacroField>,
    pub stationary: Option<MacroField>,
}

pub fn pde_grid(config: &ExperimentConfig) -> Result<MacroGrid> {
    let transverse = if config.lattice.dim > 1 { config.pde.transverse_cells } else { 1 };
    MacroGrid::with_layout(config.lattice.dim, config.pde.axial_cells, transverse, config.pde.layout)
}

/// Solves from `rho_0`, runs the monotone envelope and, for face-constant data, the steady state.
pub fn run_pde(config: &ExperimentConfig, execution: Execution) -> Result<PdeRun> {
    config.validate()?;
    let setup = Setup::new(config, execution)?;
    let grid = pde_grid(config)?;
    let times = checkpoints_of(config);
    let policy = StepPolicy::Stable {
        fraction: config.pde.step_fraction,
    };
    let start = MacroField::from_profile(grid, |u| config.initial.density(u), config.boundary)?;
    let solution = pde::solve(&start, &setup.flux, config.schedule.t_end, policy, &times)?;
    let envelope = pde::monotone_envelope(&setup.flux, grid, &config.boundary, config.schedule.t_end, &times, policy)?;
    let stationary = if config.boundary.is_face_constant() {
        Some(pde::stationary_1d(&setup.flux, grid, &config.boundary)?)
    } else {
        None
    };
    let summary = PdeSummary {
        metadata: RunMetadata::new(config, "pde-solve"),
        grid,
        steps: solution.steps,
        time_step: config.pde.step_fraction * pde::max_stable_step(&grid, &setup.flux)?,
        checkpoints: times,
        envelope_gaps: envelope.gaps.clone(),
        envelope_order_violation: envelope.order_violation,
        envelope_lower_decrease: envelope.lower_decrease,
        envelope_upper_increase: envelope.upper_increase,
        notes: setup.notes,
    };
    Ok(PdeRun {
        summary,
        checkpoints: solution.checkpoints,
        stationary,
    })
}

/// Writes `pde/checkpoints.csv`, `pde/gap.csv`, `pde/stationary.csv` (when defined) and `pde/pde-solve.json`.
pub fn write_pde(config: &ExperimentConfig, run: &PdeRun) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let path = config.artifact("pde", "checkpoints", "csv")?;
    pde::write_checkpoints_csv(&path, &run.checkpoints)?;
    written.push(path);
    let path = config.artifact("pde", "gap", "csv")?;
    pde::write_gap_csv(&path, &run.summary.envelope_gaps)?;
    written.push(path);
    if let Some(s) = &run.stationary {
        let path = config.artifact("pde", "stationary", "csv")?;
        pde::write_checkpoints_csv(&path, std::slice::from_ref(s))?;
        written.push(path);
    }
    let path = config.artifact("pde", "pde-solve", "json")?;
    write_json(&path, &run.summary)?;
    written.push(path);
    Ok(written)
}

// ---------------------------------------------------------------------------
// Oracle, disorder and diffusion artifacts
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub metadata: RunMetadata,
    pub n: usize,
    pub sites: usize,
    pub states: usize,
    pub residual: f64,
    pub iterations: usize,
    /// `max |nu_exact - nu_product|` when both reservoirs share one constant density.
    pub product_error: Option<f64>,
    pub marginals: Vec<f64>,
    #[serde(skip)]
    pub probabilities: Vec<f64>,
}

/// Exact stationary law on the smallest configured lattice, disorder sample 0.
pub fn run_oracle(config: &ExperimentConfig, execution: Execution) -> Result<OracleReport> {
    config.validate()?;
    let n = config.lattice.sizes[0];
    let lattice = config.lattice_for(n)?;
    let ctx = ThermoContext::new(config.disorder.law)?;
    let field = config.field_for(&lattice, 0)?;
    let q = oracle::build_generator(&field, &ctx, &config.boundary)?.with_execution(execution);
    let stationary = oracle::stationary_exact(&q)?;
    let product_error = match (config.boundary.minus, config.boundary.plus) {
        (thermo::FaceDensity::Constant(a), thermo::FaceDensity::Constant(b)) if a == b => {
            let p = oracle::reservoir_probabilities(&field, &ctx, a)?;
            let nu = oracle::product_measure(q.space(), &p);
            Some(
                stationary
                    .probabilities
                    .iter()
                    .zip(&nu)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max),
            )
        }
        _ => None,
    };
    Ok(OracleReport {
        metadata: RunMetadata::new(config, "oracle"),
        n,
        sites: lattice.site_count(),
        states: q.dimension(),
        residual: stationary.residual,
        iterations: stationary.iterations,
        product_error,
        marginals: oracle::occupation_marginals(q.space(), &stationary.probabilities),
        probabilities: stationary.probabilities,
    })
}

/// Writes `{N}/stationary.csv` (`state,probability`), `{N}/marginals.csv` and `oracle.json`.
pub fn write_oracle(config: &ExperimentConfig, report: &OracleReport) -> Result<Vec<PathBuf>> {
    let slot = report.n.to_string();
    let path = config.artifact(&slot, "stationary", "csv")?;
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["state", "probability"])?;
    for (s, p) in report.probabilities.iter().enumerate() {
        w.write_record([s.to_string(), p.to_string()])?;
    }
    w.flush()?;
    let mut written = vec![path];
    let lattice = config.lattice_for(report.n)?;
    let path = config.artifact(&slot, "marginals", "csv")?;
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = coord_header(lattice.dim());
    header.push("occupation".into());
    w.write_record(&header)?;
    for (x, m) in report.marginals.iter().enumerate() {
        let mut row: Vec<String> = lattice.site(x).coords.iter().map(|c| c.to_string()).collect();
        row.push(m.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    written.push(path);
    let path = config.experiment_dir().join("oracle.json");
    write_json(&path, report)?;
    written.push(path);
    Ok(written)
}

#[derive(Clone, Debug, Serialize)]
struct DisorderSampleInfo {
    sample: usize,
    field: disorder::FieldMetadata,
    mean: f64,
    min: f64,
    max: f64,
    histogram: Vec<usize>,
    ks_distance: f64,
}

/// Writes every field as `{N}/disorder-{s}.csv` and `.bin`, plus `{N}/disorder.json`.
pub fn write_disorder(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let mut written = Vec::new();
    for &n in &config.lattice.sizes {
        let lattice = config.lattice_for(n)?;
        let slot = n.to_string();
        let mut infos = Vec::new();
        for s in 0..config.schedule.disorder_samples {
            let field = config.field_for(&lattice, s)?;
            let csv_path = config.artifact(&slot, &format!("disorder-{s}"), "csv")?;
            field.write_csv(&csv_path)?;
            let bin_path = config.artifact(&slot, &format!("disorder-{s}"), "bin")?;
            field.write_binary(&bin_path)?;
            written.extend([csv_path, bin_path]);
            let stats = field.statistics(16);
            infos.push(DisorderSampleInfo {
                sample: s,
                field: field.metadata(),
                mean: stats.mean,
                min: stats.min,
                max: stats.max,
                histogram: stats.histogram,
                ks_distance: field.ks_distance(),
            });
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            metadata: RunMetadata,
            n: usize,
            samples: &'a [DisorderSampleInfo],
        }
        let path = config.artifact(&slot, "disorder", "json")?;
        write_json(
            &path,
            &Doc {
                metadata: RunMetadata::new(config, "gen-disorder"),
                n,
                samples: &infos,
            },
        )?;
        written.push(path);
    }
    Ok(written)
}

/// Writes `diffusion/table.csv`, `diffusion/table.json` and `diffusion/estimate-diffusion.json`.
pub fn write_diffusion(config: &ExperimentConfig, execution: Execution) -> Result<(DiffusionTensorTable, Vec<PathBuf>)> {
    config.validate()?;
    let ctx = ThermoContext::new(config.disorder.law)?;
    let table = load_table(config, &ctx, execution)?;
    let csv_path = config.artifact("diffusion", "table", "csv")?;
    table.write_csv(&csv_path)?;
    let meta_path = config.artifact("diffusion", "table", "json")?;
    table.write_metadata(&meta_path)?;
    #[derive(Serialize)]
    struct Doc<'a> {
        metadata: RunMetadata,
        table: &'a diffusion::TableMetadata,
        off_diagonal_ratio: f64,
    }
    let path = config.artifact("diffusion", "estimate-diffusion", "json")?;
    write_json(
        &path,
        &Doc {
            metadata: RunMetadata::new(config, "estimate-diffusion"),
            table: table.metadata(),
            off_diagonal_ratio: table.off_diagonal_ratio(),
        },
    )?;
    Ok((table, vec![csv_path, meta_path, path]))
}

// ---------------------------------------------------------------------------
// Comparing two runs
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub n: usize,
    pub time: f64,
    pub l1: f64,
}

type TrajectoryMeans = BTreeMap<(u64, Vec<i64>), (f64, usize)>;

fn read_trajectory_means(path: &Path, dim: usize) -> Result<TrajectoryMeans> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: TrajectoryMeans = BTreeMap::new();
    for record in r.records() {
        let record = record?;
        if record.len() != dim + 3 {
            return Err(Error::domain(format!(
                "{}: expected {} columns, found {}",
                path.display(),
                dim + 3,
                record.len()
            )));
        }
        let parse = |k: usize| -> Result<f64> {
            record[k]
                .parse::<f64>()
                .map_err(|e| Error::domain(format!("{}: {e}", path.display())))
        };
        let time = parse(1)?;
        let coords = (0..dim).map(|k| parse(2 + k).map(|v| v as i64)).collect::<Result<Vec<_>>>()?;
        let density = parse(2 + dim)?;
        let e = out.entry((time.to_bits(), coords)).or_insert((0.0, 0));
        e.0 += density;
        e.1 += 1;
    }
    Ok(out)
}

/// L1 distance between the replica-averaged trajectories of two `simulate` runs,
/// at every size and time they share.
pub fn compare_runs(a: &ExperimentConfig, b: &ExperimentConfig) -> Result<Vec<CompareRow>> {
    if a.lattice.dim != b.lattice.dim {
        return Err(Error::config(
            "lattice.dim",
            format!(
                "runs disagree on the lattice dimension: `{}` has d = {}, `{}` has d = {}",
                a.experiment, a.lattice.dim, b.experiment, b.lattice.dim
            ),
        ));
    }
    let mut rows = Vec::new();
    for &n in a.lattice.sizes.iter().filter(|n| b.lattice.sizes.contains(n)) {
        if a.transverse_size(n) != b.transverse_size(n) {
            return Err(Error::config(
                "lattice.transverse_size",
                format!(
                    "runs disagree at N = {n}: `{}` has T = {}, `{}` has T = {}",
                    a.experiment,
                    a.transverse_size(n),
                    b.experiment,
                    b.transverse_size(n)
                ),
            ));
        }
        let slot = n.to_string();
        let pa = a.experiment_dir().join(&slot).join("trajectory.csv");
        let pb = b.experiment_dir().join(&slot).join("trajectory.csv");
        let ma = read_trajectory_means(&pa, a.lattice.dim)?;
        let mb = read_trajectory_means(&pb, b.lattice.dim)?;
        let weight = 1.0 / (n as f64 * (a.transverse_size(n) as f64).powi(a.lattice.dim as i32 - 1));
        let mut by_time: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for ((t, coords), (sa, ka)) in &ma {
            if let Some((sb, kb)) = mb.get(&(*t, coords.clone())) {
                let e = by_time.entry(*t).or_insert((0.0, 0));
                e.0 += (sa / *ka as f64 - sb / *kb as f64).abs();
                e.1 += 1;
            }
        }
        let mut times: Vec<(f64, f64)> = by_time
            .into_iter()
            .map(|(t, (sum, _))| (f64::from_bits(t), weight * sum))
            .collect();
        times.sort_by(|x, y| x.0.total_cmp(&y.0));
        rows.extend(times.into_iter().map(|(time, l1)| CompareRow { n, time, l1 }));
    }
    if rows.is_empty() {
        return Err(Error::domain(format!(
            "runs `{}` and `{}` share no (N, time) observations",
            a.experiment, b.experiment
        )));
    }
    Ok(rows)
}

/// Writes `{N}/compare.csv` under the first run and `compare.json`.
pub fn write_compare(a: &ExperimentConfig, b: &ExperimentConfig, rows: &[CompareRow]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.n).collect();
    sizes.dedup();
    for n in sizes {
        let path = a.artifact(&n.to_string(), "compare", "csv")?;
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["time", "l1"])?;
        for r in rows.iter().filter(|r| r.n == n) {
            w.write_record([r.time.to_string(), r.l1.to_string()])?;
        }
        w.flush()?;
        written.push(path);
    }
    #[derive(Serialize)]
    struct Doc<'a> {
        metadata: RunMetadata,
        other: RunMetadata,
        rows: &'a [CompareRow],
    }
    let path = a.experiment_dir().join("compare.json");
    write_json(
        &path,
        &Doc {
            metadata: RunMetadata::new(a, "compare"),
            other: RunMetadata::new(b, "compare"),
            rows,
        },
    )?;
    written.push(path);
    Ok(written)
}
