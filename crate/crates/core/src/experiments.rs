//! Monte Carlo drivers, finite-box crossing scans and file outputs.
//!
//! All estimates are finite-box quantities labelled by `(N, M)`. Trial `t`
//! uses the environment seed `trial_seed(base, t)` at every parameter value,
//! so curves and model comparisons are coupled through shared uniforms.

use std::io::Write;

use radix_heap::RadixHeapMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::enhancement::{mean_se, russo_estimates, target_set, RussoEstimate};
use crate::environment::{
    check_probability, mix64, trial_seed, uniform, EnvironmentField, ModelKind, ModelSpec,
};
use crate::error::{Error, Result};
use crate::lattice::{LatticeBox, Point, SiteMask, VdLattice, MAX_DIM};
use crate::reachability::Search;
use crate::terrace::{extract_terrace, write_ply, Extraction};

/// Box sizes, trial count and base seed shared by an experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentGeometry {
    pub d: usize,
    /// Outer half-width: `R = Q_N`.
    #[serde(rename = "N")]
    pub big_n: i32,
    /// Target offset: `S = (-M·1)_- ∩ R`.
    #[serde(rename = "M")]
    pub m: i32,
    /// Modification window half-width, when modification runs are enabled.
    pub n: Option<i32>,
    pub trials: u64,
    pub seed: u64,
}

impl ExperimentGeometry {
    pub fn new(d: usize, big_n: i32, m: i32, trials: u64, seed: u64) -> Result<Self> {
        let g = ExperimentGeometry {
            d,
            big_n,
            m,
            n: None,
            trials,
            seed,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_window(mut self, n: i32) -> Result<Self> {
        self.n = Some(n);
        self.validate()?;
        Ok(self)
    }

    pub fn with_trials(mut self, trials: u64) -> Result<Self> {
        self.trials = trials;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_DIM).contains(&self.d) {
            return Err(Error::UnsupportedDimension(self.d));
        }
        if self.m < 1 || self.big_n <= self.m {
            return Err(Error::Precondition(format!(
                "need N > M >= 1, got N = {}, M = {}",
                self.big_n, self.m
            )));
        }
        if self.trials == 0 {
            return Err(Error::Precondition("need at least one trial".into()));
        }
        if let Some(n) = self.n {
            let rho = VdLattice::new(self.d)?.rho() as i32;
            if !(n > rho + 4 && self.m > n) {
                return Err(Error::Precondition(format!(
                    "need N > M > n > {}, got N = {}, M = {}, n = {n}",
                    rho + 4,
                    self.big_n,
                    self.m
                )));
            }
        }
        Ok(())
    }
}

/// The box, start site and target of a connection experiment.
#[derive(Debug, Clone)]
pub struct Domain {
    pub region: LatticeBox,
    pub start: usize,
    pub target: SiteMask,
}

impl Domain {
    /// For the slab, `R = [-N, N]^d × {1, 2}`, the start is `(o, 1)` and the
    /// target is every site whose first `d` coordinates are all at most `-M`.
    pub fn new(kind: ModelKind, geom: &ExperimentGeometry) -> Result<Self> {
        geom.validate()?;
        let d = geom.d;
        if kind == ModelKind::Slab {
            let mut lo = vec![-geom.big_n; d + 1];
            let mut hi = vec![geom.big_n; d + 1];
            let mut start = vec![0; d + 1];
            lo[d] = 1;
            hi[d] = 2;
            start[d] = 1;
            let region = LatticeBox::new(Point::new(lo), Point::new(hi))?;
            let target = SiteMask::from_fn(&region, |i| (0..d).all(|a| region.coord_of(i, a) <= -geom.m));
            let start = region.index_checked(&Point::new(start))?;
            Ok(Domain { region, start, target })
        } else {
            let region = LatticeBox::cube(d, geom.big_n)?;
            let target = target_set(&region, geom.m)?;
            let start = region.index_checked(&Point::origin(d))?;
            Ok(Domain { region, start, target })
        }
    }

    fn lower_face(&self, idx: usize, axes: usize) -> bool {
        (0..axes).any(|a| self.region.offset(idx, a) == 0)
    }
}

/// What an [`EstimateRecord`] estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Beta,
    ThetaProxy,
    Crossing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub kind: EstimatorKind,
    pub model: ModelKind,
    pub p: f64,
    /// Only set for the disturbed model.
    pub q: Option<f64>,
    pub value: f64,
    pub se: f64,
    pub trials: u64,
    pub geometry: ExperimentGeometry,
}

fn check_spec(spec: &ModelSpec, geom: &ExperimentGeometry) -> Result<()> {
    geom.validate()?;
    if spec.dim != geom.d {
        return Err(Error::DimensionMismatch {
            expected: geom.d,
            found: spec.dim,
        });
    }
    Ok(())
}

fn record(kind: EstimatorKind, spec: &ModelSpec, geom: &ExperimentGeometry, xs: &[f64]) -> EstimateRecord {
    let (value, se) = mean_se(xs);
    EstimateRecord {
        kind,
        model: spec.kind,
        p: spec.p,
        q: (spec.kind == ModelKind::Disturbed).then_some(spec.q),
        value,
        se,
        trials: geom.trials,
        geometry: geom.clone(),
    }
}

/// Per-trial indicator that `o` fails to reach `S` inside `R`.
pub fn blocking_indicators(spec: &ModelSpec, geom: &ExperimentGeometry) -> Result<Vec<bool>> {
    check_spec(spec, geom)?;
    let dom = Domain::new(spec.kind, geom)?;
    (0..geom.trials)
        .into_par_iter()
        .map_init(Search::new, |search, t| {
            let env = EnvironmentField::new(*spec, dom.region.clone(), trial_seed(geom.seed, t))?;
            let cfg = env.configuration(&dom.region)?;
            Ok(!search.reaches(&cfg, dom.start, &dom.target))
        })
        .collect()
}

/// Monte Carlo estimate of `β^N_M(p, q)`.
pub fn estimate_beta(spec: &ModelSpec, geom: &ExperimentGeometry) -> Result<EstimateRecord> {
    let xs: Vec<f64> = blocking_indicators(spec, geom)?
        .into_iter()
        .map(|b| f64::from(u8::from(b)))
        .collect();
    Ok(record(EstimatorKind::Beta, spec, geom, &xs))
}

/// Probability that `C^R_o` reaches a lower face of `R`, the finite-box
/// stand-in for the cluster not being bounded below.
pub fn estimate_theta_proxy(spec: &ModelSpec, geom: &ExperimentGeometry) -> Result<EstimateRecord> {
    check_spec(spec, geom)?;
    let dom = Domain::new(spec.kind, geom)?;
    let faces = SiteMask::from_fn(&dom.region, |i| dom.lower_face(i, geom.d));
    let xs: Vec<f64> = (0..geom.trials)
        .into_par_iter()
        .map_init(Search::new, |search, t| {
            let env = EnvironmentField::new(*spec, dom.region.clone(), trial_seed(geom.seed, t))?;
            let cfg = env.configuration(&dom.region)?;
            Ok(f64::from(u8::from(search.reaches(&cfg, dom.start, &faces))))
        })
        .collect::<Result<_>>()?;
    Ok(record(EstimatorKind::ThetaProxy, spec, geom, &xs))
}

/// How `q` follows `p` along a scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum QRule {
    Equal,
    F,
}

/// `f(p) = p (1 - (1 - p)^{d+1})` without the range check.
fn f_raw(p: f64, d: usize) -> f64 {
    p * (1.0 - (1.0 - p).powi(d as i32 + 1))
}

/// The `p` at which `f(p) = u`, by bisection.
fn f_inverse(u: f64, d: usize) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if f_raw(mid, d) < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// A one-parameter family of monotone models indexed by `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFamily {
    pub kind: ModelKind,
    pub dim: usize,
    pub rule: QRule,
}

impl ModelFamily {
    pub fn new(kind: ModelKind, dim: usize, rule: QRule) -> Result<Self> {
        if kind == ModelKind::Orthant {
            return Err(Error::Precondition(
                "the orthant model is not monotone in p; scans need E ⊂ F".into(),
            ));
        }
        ModelSpec::new(kind, dim, 0.5, 0.5)?;
        Ok(ModelFamily { kind, dim, rule })
    }

    pub fn half_orthant(dim: usize) -> Result<Self> {
        Self::new(ModelKind::HalfOrthant, dim, QRule::Equal)
    }

    pub fn disturbed(dim: usize) -> Result<Self> {
        Self::new(ModelKind::Disturbed, dim, QRule::F)
    }

    pub fn slab(dim: usize) -> Result<Self> {
        Self::new(ModelKind::Slab, dim, QRule::Equal)
    }

    pub fn q_at(&self, p: f64) -> f64 {
        match self.rule {
            QRule::Equal => p,
            QRule::F => f_raw(p, self.dim),
        }
    }

    pub fn at(&self, p: f64) -> Result<ModelSpec> {
        check_probability(p)?;
        ModelSpec::new(self.kind, self.dim, p, self.q_at(p))
    }

    fn label(&self) -> String {
        match (self.kind, self.rule) {
            (ModelKind::Disturbed, QRule::F) => format!("disturbed d={} q=f(p)", self.dim),
            (k, _) => format!("{k} d={}", self.dim),
        }
    }
}

/// Reusable buffers for [`blocking_threshold`].
#[derive(Default)]
pub struct ThresholdSearch {
    best: Vec<u64>,
    heap: RadixHeapMap<u64, u32>,
}

impl ThresholdSearch {
    pub fn new() -> Self {
        Self::default()
    }
}

/// The largest `θ` such that `o` reaches `S` for every `p < θ`; the trial is
/// blocked at `p` exactly when `θ ≤ p`.
///
/// A down-step from `x` is open iff `x ∈ Ω_0`, i.e. iff `p` lies below the
/// site threshold `τ_x`, so `θ` is the max-min value of `τ` over paths.
pub fn blocking_threshold(family: &ModelFamily, dom: &Domain, seed: u64, buf: &mut ThresholdSearch) -> f64 {
    let r = &dom.region;
    let d = r.dim();
    let vd = (family.kind == ModelKind::Disturbed && family.rule == QRule::F)
        .then(|| VdLattice::new(family.dim).expect("dimension checked"));
    buf.best.clear();
    buf.best.resize(r.len(), 0);
    buf.heap.clear();
    let inf = f64::INFINITY.to_bits();
    buf.best[dom.start] = inf;
    buf.heap.push(inf, dom.start as u32);
    let (lo, hi) = (r.lo().coords(), r.hi().coords());
    let mut coords = [0i32; MAX_DIM];
    while let Some((v, i)) = buf.heap.pop() {
        let i = i as usize;
        if v < buf.best[i] {
            continue;
        }
        if dom.target.get(i) {
            return f64::from_bits(v);
        }
        for (a, c) in coords.iter_mut().enumerate().take(d) {
            *c = r.coord_of(i, a);
        }
        for a in 0..d {
            if coords[a] < hi[a] {
                let j = i + r.stride(a);
                if v > buf.best[j] {
                    buf.best[j] = v;
                    buf.heap.push(v, j as u32);
                }
            }
        }
        let u = uniform(seed, &coords[..d]);
        let tau = match &vd {
            Some(vd) if vd.contains_coords(&coords[..d]) => f_inverse(u, family.dim),
            _ => u,
        };
        let w = v.min(tau.to_bits());
        for a in 0..d {
            if coords[a] > lo[a] {
                let j = i - r.stride(a);
                if w > buf.best[j] {
                    buf.best[j] = w;
                    buf.heap.push(w, j as u32);
                }
            }
        }
    }
    0.0
}

/// One blocking threshold per trial, in trial order.
pub fn theta_samples(family: &ModelFamily, geom: &ExperimentGeometry) -> Result<Vec<f64>> {
    if family.dim != geom.d {
        return Err(Error::DimensionMismatch {
            expected: geom.d,
            found: family.dim,
        });
    }
    let dom = Domain::new(family.kind, geom)?;
    Ok((0..geom.trials)
        .into_par_iter()
        .map_init(ThresholdSearch::new, |buf, t| {
            blocking_threshold(family, &dom, trial_seed(geom.seed, t), buf)
        })
        .collect())
}

/// Grid or bisection over `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMethod {
    Grid(Vec<f64>),
    Bisection { lo: f64, hi: f64, tol: f64 },
}

impl ScanMethod {
    /// Parses `p0:p1:step` into an inclusive grid.
    pub fn parse_grid(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("grid {s:?}: {e}")))?;
        let [p0, p1, step] = parts[..] else {
            return Err(Error::Format(format!("grid {s:?} is not p0:p1:step")));
        };
        if !(step > 0.0) || p1 < p0 {
            return Err(Error::Format(format!("grid {s:?} is empty")));
        }
        let k = ((p1 - p0) / step + 1e-9).floor() as usize;
        let grid = (0..=k).map(|i| round_grid(p0 + i as f64 * step)).collect();
        Ok(ScanMethod::Grid(grid))
    }
}

fn round_grid(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub p: f64,
    pub q: f64,
    pub beta_hat: f64,
    pub se: f64,
}

/// Finite-box ½-crossing of `β̂`, with its curve and a bootstrap interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingReport {
    pub family: ModelFamily,
    pub geometry: ExperimentGeometry,
    pub curve: Vec<CurvePoint>,
    /// Adjacent evaluated points with `β̂ < ½ ≤ β̂`.
    pub bracket: (f64, f64),
    /// Smallest `p` with `β̂(p) ≥ ½`.
    pub estimate: f64,
    pub ci: (f64, f64),
    pub bootstrap_se: f64,
}

impl CrossingReport {
    pub fn record(&self) -> EstimateRecord {
        EstimateRecord {
            kind: EstimatorKind::Crossing,
            model: self.family.kind,
            p: self.estimate,
            q: (self.family.kind == ModelKind::Disturbed).then(|| self.family.q_at(self.estimate)),
            value: self.estimate,
            se: self.bootstrap_se,
            trials: self.geometry.trials,
            geometry: self.geometry.clone(),
        }
    }

    pub fn ci_disjoint_below(&self, other: &CrossingReport) -> bool {
        self.ci.1 < other.ci.0
    }

    /// `self ≤ other` up to overlap of the intervals.
    pub fn le_within_ci(&self, other: &CrossingReport) -> bool {
        self.estimate <= other.estimate || self.ci.0 <= other.ci.1
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        write_curve_csv(&self.curve, &self.geometry, w)
    }
}

pub const BOOTSTRAP_RESAMPLES: u64 = 1000;

/// Empirical `β̂(p) = #{θ_t ≤ p} / T` from sorted thresholds.
fn beta_from_sorted(sorted: &[f64], p: f64) -> (f64, f64) {
    let t = sorted.len() as f64;
    let k = sorted.partition_point(|&x| x <= p) as f64;
    let b = k / t;
    let se = if sorted.len() > 1 {
        (b * (1.0 - b) / (t - 1.0)).sqrt()
    } else {
        0.0
    };
    (b, se)
}

fn median_crossing(xs: &mut [f64]) -> f64 {
    let k = xs.len().div_ceil(2) - 1;
    let (_, v, _) = xs.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
    *v
}

/// Builds a crossing report from precomputed per-trial thresholds.
pub fn crossing_from_samples(
    family: &ModelFamily,
    geom: &ExperimentGeometry,
    thetas: &[f64],
    method: &ScanMethod,
) -> Result<CrossingReport> {
    if thetas.is_empty() {
        return Err(Error::Precondition("no samples".into()));
    }
    let mut sorted = thetas.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let point = |p: f64| {
        let (beta_hat, se) = beta_from_sorted(&sorted, p);
        CurvePoint {
            p,
            q: family.q_at(p),
            beta_hat,
            se,
        }
    };
    let straddle_err = || Error::Precondition("bracket does not straddle 1/2".into());
    let (curve, bracket) = match method {
        ScanMethod::Grid(grid) => {
            let mut grid = grid.clone();
            grid.sort_by(|a, b| a.total_cmp(b));
            grid.dedup();
            for &p in &grid {
                check_probability(p)?;
            }
            let curve: Vec<CurvePoint> = grid.iter().map(|&p| point(p)).collect();
            let hi = curve.iter().position(|c| c.beta_hat >= 0.5).ok_or_else(straddle_err)?;
            if hi == 0 {
                return Err(straddle_err());
            }
            let bracket = (curve[hi - 1].p, curve[hi].p);
            (curve, bracket)
        }
        &ScanMethod::Bisection { lo, hi, tol } => {
            check_probability(lo)?;
            check_probability(hi)?;
            if !(tol > 0.0) || lo >= hi {
                return Err(Error::Precondition(format!("invalid bracket [{lo}, {hi}] with tol {tol}")));
            }
            let (a, b) = (point(lo), point(hi));
            if a.beta_hat >= 0.5 || b.beta_hat < 0.5 {
                return Err(straddle_err());
            }
            let mut curve = vec![a, b];
            let (mut lo, mut hi) = (lo, hi);
            while hi - lo > tol {
                let c = point(0.5 * (lo + hi));
                if c.beta_hat >= 0.5 {
                    hi = c.p;
                } else {
                    lo = c.p;
                }
                curve.push(c);
            }
            curve.sort_by(|x, y| x.p.total_cmp(&y.p));
            (curve, (lo, hi))
        }
    };
    let estimate = median_crossing(&mut sorted.clone());
    let n = thetas.len();
    let boot_seed = mix64(geom.seed ^ 0xb007_57a9_0000_0001);
    let mut meds: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .into_par_iter()
        .map_init(Vec::new, |buf: &mut Vec<f64>, b| {
            let s = trial_seed(boot_seed, b);
            buf.clear();
            buf.extend((0..n as u64).map(|i| thetas[(mix64(s ^ mix64(i)) % n as u64) as usize]));
            median_crossing(buf)
        })
        .collect();
    meds.sort_by(|a, b| a.total_cmp(b));
    let q = |f: f64| meds[((f * (meds.len() - 1) as f64).round()) as usize];
    let (_, bootstrap_se) = mean_se(&meds);
    let bootstrap_se = bootstrap_se * (meds.len() as f64).sqrt();
    Ok(CrossingReport {
        family: *family,
        geometry: geom.clone(),
        curve,
        bracket,
        estimate,
        ci: (q(0.025), q(0.975)),
        bootstrap_se,
    })
}

/// Locates the ½-crossing of the finite-box blocking probability.
pub fn scan_critical(family: &ModelFamily, geom: &ExperimentGeometry, method: &ScanMethod) -> Result<CrossingReport> {
    let thetas = theta_samples(family, geom)?;
    crossing_from_samples(family, geom, &thetas, method)
}

/// Disturbed (`q = f(p)`) against undisturbed scans on shared seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbedReport {
    pub disturbed: CrossingReport,
    pub undisturbed: CrossingReport,
    /// Trials whose disturbed threshold is below the undisturbed one.
    pub coupling_violations: u64,
    /// `β̂(p, f(p)) ≤ β̂(p, p)` at every grid point.
    pub pointwise_ok: bool,
    /// Disturbed crossing strictly larger with disjoint intervals.
    pub ordinal_ok: bool,
}

pub fn disturbed_curve(d: usize, geom: &ExperimentGeometry, grid: &[f64]) -> Result<DisturbedReport> {
    for &p in grid {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidProbability(p));
        }
    }
    let geom = ExperimentGeometry { d, ..geom.clone() };
    let fam_f = ModelFamily::disturbed(d)?;
    let fam_eq = ModelFamily::half_orthant(d)?;
    let th_f = theta_samples(&fam_f, &geom)?;
    let th_eq = theta_samples(&fam_eq, &geom)?;
    let coupling_violations = th_f.iter().zip(&th_eq).filter(|(a, b)| a < b).count() as u64;
    let method = ScanMethod::Grid(grid.to_vec());
    let disturbed = crossing_from_samples(&fam_f, &geom, &th_f, &method)?;
    let undisturbed = crossing_from_samples(&fam_eq, &geom, &th_eq, &method)?;
    let pointwise_ok = disturbed
        .curve
        .iter()
        .zip(&undisturbed.curve)
        .all(|(a, b)| a.beta_hat <= b.beta_hat);
    let ordinal_ok = undisturbed.estimate < disturbed.estimate && undisturbed.ci_disjoint_below(&disturbed);
    Ok(DisturbedReport {
        disturbed,
        undisturbed,
        coupling_violations,
        pointwise_ok,
        ordinal_ok,
    })
}

impl DisturbedReport {
    /// One row per grid point: `p, f(p), beta_disturbed, se, beta_undisturbed, se`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let g = &self.disturbed.geometry;
        writeln!(w, "p,q,N,M,trials,beta_hat,se,beta_hat_undisturbed,se_undisturbed")?;
        for (a, b) in self.disturbed.curve.iter().zip(&self.undisturbed.curve) {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                a.p, a.q, g.big_n, g.m, g.trials, a.beta_hat, a.se, b.beta_hat, b.se
            )?;
        }
        Ok(())
    }
}

/// Slab crossing and its comparison with the `d` and `d+1` scans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlabScanReport {
    pub lower: CrossingReport,
    pub slab: CrossingReport,
    pub upper: CrossingReport,
    /// `p̂_c(d) ≤ p̂_c^{1,2}(d) ≤ p̂_c(d+1)` within intervals.
    pub sandwich_ok: bool,
}

pub fn slab_scan(d: usize, geom: &ExperimentGeometry, grid: &[f64]) -> Result<SlabScanReport> {
    let method = ScanMethod::Grid(grid.to_vec());
    let base = ExperimentGeometry { d, ..geom.clone() };
    let lower = scan_critical(&ModelFamily::half_orthant(d)?, &base, &method)?;
    let slab = scan_critical(&ModelFamily::slab(d)?, &base, &method)?;
    let up_geom = ExperimentGeometry { d: d + 1, ..base.clone() };
    let upper = scan_critical(&ModelFamily::half_orthant(d + 1)?, &up_geom, &method)?;
    Ok(slab_report(lower, slab, upper))
}

/// Assembles a [`SlabScanReport`] from existing scans.
pub fn slab_report(lower: CrossingReport, slab: CrossingReport, upper: CrossingReport) -> SlabScanReport {
    let sandwich_ok = lower.le_within_ci(&slab) && slab.le_within_ci(&upper);
    SlabScanReport {
        lower,
        slab,
        upper,
        sandwich_ok,
    }
}

/// Pivotal-count derivative estimates beside coupled centered differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RussoCheck {
    pub russo: RussoEstimate,
    pub h: f64,
    pub fd_dp: f64,
    pub se_fd_dp: f64,
    pub fd_dq: f64,
    pub se_fd_dq: f64,
}

impl RussoCheck {
    /// `|Russo − difference|` in units of the combined standard error.
    pub fn z_scores(&self) -> (f64, f64) {
        let z = |a: f64, sa: f64, b: f64, sb: f64| (a - b).abs() / (sa * sa + sb * sb).sqrt();
        (
            z(self.russo.d_dp, self.russo.se_dp, self.fd_dp, self.se_fd_dp),
            z(self.russo.d_dq, self.russo.se_dq, self.fd_dq, self.se_fd_dq),
        )
    }

    pub fn within(&self, k: f64) -> bool {
        let (a, b) = self.z_scores();
        a <= k && b <= k
    }
}

/// Compares pivotal counts with `(β̂(p+h) − β̂(p−h)) / 2h` in each parameter.
pub fn russo_check(d: usize, p: f64, q: f64, geom: &ExperimentGeometry, h: f64) -> Result<RussoCheck> {
    let spec = ModelSpec::disturbed(d, p, q)?;
    check_spec(&spec, geom)?;
    for x in [p - h, p + h, q - h, q + h] {
        check_probability(x)?;
    }
    let russo = russo_estimates(&spec, geom.big_n, geom.m, geom.trials, geom.seed)?;
    let blocked = |p: f64, q: f64| -> Result<Vec<f64>> {
        let spec = ModelSpec::disturbed(d, p, q)?;
        Ok(blocking_indicators(&spec, geom)?
            .into_iter()
            .map(|b| f64::from(u8::from(b)))
            .collect())
    };
    let diff = |a: Vec<f64>, b: Vec<f64>| -> Vec<f64> {
        a.iter().zip(&b).map(|(x, y)| (x - y) / (2.0 * h)).collect()
    };
    let dp = diff(blocked(p + h, q)?, blocked(p - h, q)?);
    let dq = diff(blocked(p, q + h)?, blocked(p, q - h)?);
    let (fd_dp, se_fd_dp) = mean_se(&dp);
    let (fd_dq, se_fd_dq) = mean_se(&dq);
    Ok(RussoCheck {
        russo,
        h,
        fd_dp,
        se_fd_dp,
        fd_dq,
        se_fd_dq,
    })
}

/// Writes the terrace of `C^Q_x` as PLY (three dimensions only).
pub fn export_surface(env: &EnvironmentField, q: &LatticeBox, x: &Point, w: impl Write) -> Result<Extraction> {
    if q.dim() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            found: q.dim(),
        });
    }
    let cfg = env.configuration(q)?;
    let e = extract_terrace(&cfg, q, x)?;
    write_ply(&e, w)?;
    Ok(e)
}

pub const BETA_CSV_HEADER: &str = "p,q,N,M,trials,beta_hat,se";

/// Curve rows in the fixed column order `p, q, N, M, trials, beta_hat, se`.
pub fn write_curve_csv(curve: &[CurvePoint], geom: &ExperimentGeometry, mut w: impl Write) -> Result<()> {
    writeln!(w, "{BETA_CSV_HEADER}")?;
    for c in curve {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            c.p, c.q, geom.big_n, geom.m, geom.trials, c.beta_hat, c.se
        )?;
    }
    Ok(())
}

/// Beta estimates in the same column order; `q` defaults to `p`.
pub fn write_beta_csv(records: &[EstimateRecord], mut w: impl Write) -> Result<()> {
    writeln!(w, "{BETA_CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.p,
            r.q.unwrap_or(r.p),
            r.geometry.big_n,
            r.geometry.m,
            r.trials,
            r.value,
            r.se
        )?;
    }
    Ok(())
}

/// Run manifest: the full configuration and a content hash of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    /// `sha256("blob <len>\0" ++ canonical config JSON)`, hex encoded.
    pub content_hash: String,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: &impl Serialize, outputs: Vec<String>) -> Result<Self> {
        let config = serde_json::to_value(config).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            content_hash: content_hash(&config),
            config,
            outputs,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Hash of a JSON value with sorted keys, framed like a git blob.
pub fn content_hash(v: &serde_json::Value) -> String {
    let body = v.to_string();
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(body.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl std::fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(d: usize, n: i32, m: i32, trials: u64) -> ExperimentGeometry {
        ExperimentGeometry::new(d, n, m, trials, 7).unwrap()
    }

    #[test]
    fn geometry_validation() {
        assert!(ExperimentGeometry::new(2, 3, 3, 10, 0).is_err());
        assert!(ExperimentGeometry::new(2, 4, 0, 10, 0).is_err());
        assert!(ExperimentGeometry::new(2, 4, 2, 0, 0).is_err());
        let g = geom(2, 12, 10, 5);
        assert!(g.clone().with_window(8).is_ok());
        assert!(g.clone().with_window(7).is_err());
        assert!(g.with_window(10).is_err());
    }

    #[test]
    fn beta_extremes() {
        let g = geom(2, 4, 2, 50);
        let one = estimate_beta(&ModelSpec::half_orthant(2, 1.0).unwrap(), &g).unwrap();
        assert_eq!((one.value, one.se), (1.0, 0.0));
        let zero = estimate_beta(&ModelSpec::half_orthant(2, 0.0).unwrap(), &g).unwrap();
        assert_eq!((zero.value, zero.se), (0.0, 0.0));
        let slab = ModelSpec::new(ModelKind::Slab, 2, 1.0, 1.0).unwrap();
        assert_eq!(estimate_beta(&slab, &g).unwrap().value, 1.0);
        let slab = ModelSpec::new(ModelKind::Slab, 2, 0.0, 0.0).unwrap();
        assert_eq!(estimate_beta(&slab, &g).unwrap().value, 0.0);
    }

    #[test]
    fn f_inverse_roundtrip() {
        for d in [2, 3, 5] {
            for k in 1..100 {
                let p = k as f64 / 100.0;
                assert!((f_inverse(f_raw(p, d), d) - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn threshold_matches_bfs() {
        for (fam, d) in [
            (ModelFamily::half_orthant(2).unwrap(), 2),
            (ModelFamily::disturbed(2).unwrap(), 2),
            (ModelFamily::slab(2).unwrap(), 2),
            (ModelFamily::half_orthant(3).unwrap(), 3),
        ] {
            let g = geom(d, 5, 2, 60);
            let thetas = theta_samples(&fam, &g).unwrap();
            for p in [0.2, 0.35, 0.5, 0.65, 0.8] {
                let blocked = blocking_indicators(&fam.at(p).unwrap(), &g).unwrap();
                for (t, (&th, &b)) in thetas.iter().zip(&blocked).enumerate() {
                    assert_eq!(th <= p, b, "{fam} trial {t} p {p} theta {th}");
                }
            }
        }
    }

    #[test]
    fn degenerate_grid_bracket() {
        let g = geom(2, 4, 2, 40);
        let fam = ModelFamily::half_orthant(2).unwrap();
        let r = scan_critical(&fam, &g, &ScanMethod::Grid(vec![0.0, 1.0])).unwrap();
        assert_eq!(r.bracket, (0.0, 1.0));
        assert!(r.ci.0 <= r.estimate && r.estimate <= r.ci.1);
        let err = scan_critical(&fam, &g, &ScanMethod::Grid(vec![0.9, 1.0]));
        assert!(err.is_err());
    }

    #[test]
    fn bisection_agrees_with_grid() {
        let g = geom(2, 6, 3, 300);
        let fam = ModelFamily::half_orthant(2).unwrap();
        let th = theta_samples(&fam, &g).unwrap();
        let b = crossing_from_samples(&fam, &g, &th, &ScanMethod::Bisection { lo: 0.0, hi: 1.0, tol: 1e-4 }).unwrap();
        assert!(b.bracket.1 - b.bracket.0 <= 1e-4);
        assert!(b.bracket.0 < b.estimate + 1e-12 && b.estimate <= b.bracket.1);
        let grid = ScanMethod::parse_grid("0:1:0.05").unwrap();
        let r = crossing_from_samples(&fam, &g, &th, &grid).unwrap();
        assert_eq!(r.estimate, b.estimate);
        assert!(r.bracket.0 < r.estimate && r.estimate <= r.bracket.1);
    }

    #[test]
    fn parse_grid_inclusive() {
        let ScanMethod::Grid(g) = ScanMethod::parse_grid("0.3:0.5:0.1").unwrap() else {
            unreachable!()
        };
        assert_eq!(g, vec![0.3, 0.4, 0.5]);
        assert!(ScanMethod::parse_grid("0.5:0.3:0.1").is_err());
        assert!(ScanMethod::parse_grid("a:b").is_err());
    }

    #[test]
    fn csv_is_deterministic() {
        let g = geom(2, 5, 2, 100);
        let fam = ModelFamily::half_orthant(2).unwrap();
        let grid = ScanMethod::parse_grid("0.2:0.8:0.1").unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        scan_critical(&fam, &g, &grid).unwrap().write_csv(&mut a).unwrap();
        scan_critical(&fam, &g, &grid).unwrap().write_csv(&mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("p,q,N,M,trials,beta_hat,se\n"));
        assert_eq!(text.lines().count(), 8);
    }

    #[test]
    fn manifest_hash_is_stable() {
        let g = geom(2, 5, 2, 100);
        let a = Manifest::new("beta", &g, vec![]).unwrap();
        let b = Manifest::new("beta", &g, vec!["x.csv".into()]).unwrap();
        assert_eq!(a.content_hash, b.content_hash);
        assert_eq!(a.content_hash.len(), 64);
        let c = Manifest::new("beta", &g.with_trials(101).unwrap(), vec![]).unwrap();
        assert_ne!(a.content_hash, c.content_hash);
    }

    #[test]
    fn orthant_family_rejected() {
        assert!(ModelFamily::new(ModelKind::Orthant, 2, QRule::Equal).is_err());
    }

    #[test]
    fn export_surface_needs_three_dims() {
        let spec = ModelSpec::half_orthant(2, 0.9).unwrap();
        let q = LatticeBox::cube(2, 3).unwrap();
        let env = EnvironmentField::new(spec, q.clone(), 1).unwrap();
        assert!(export_surface(&env, &q, &Point::origin(2), Vec::new()).is_err());
    }
}
