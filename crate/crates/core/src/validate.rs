//! Randomized validation suites with brute-force oracles.
//!
//! Each suite draws independent instances from a seeded RNG, runs them in
//! parallel and merges the per-check tallies in instance order, so reports
//! are reproducible for a given seed.

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enhancement::{
    find_pivotal, is_pivotal, local_modify, pivotal_corner_conditions, pivotal_indices, slab_terraces,
    target_set, verify_certificate, PivotalMode,
};
use crate::environment::{
    derive_eta_zeta, trial_seed, Configuration, EnvironmentField, ModelKind, ModelSpec, StepSet,
};
use crate::error::Result;
use crate::lattice::{relative_boundary, LatticeBox, Point, SiteMask, VdLattice};
use crate::reachability::{forward_cluster, LatticePath, Search};
use crate::terrace::{extract_terrace, lambda_q, trichotomy, window_interior, Extraction, QTerrace, TerraceEditor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Geometry,
    Terrace,
    Pivotal,
    Modify,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckTally {
    pub name: String,
    pub checked: u64,
    pub violations: u64,
    pub first_violation: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub cases: u64,
    pub seed: u64,
    /// Instances drawn to reach `cases` applicable instances per check.
    pub instances: u64,
    pub checks: Vec<CheckTally>,
}

impl SuiteReport {
    /// Every check ran at least `cases` times without a violation.
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.violations == 0 && c.checked >= self.cases)
    }

    pub fn check(&self, name: &str) -> Option<&CheckTally> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Default)]
struct Tally {
    map: BTreeMap<&'static str, (u64, u64, Option<String>)>,
}

impl Tally {
    fn record(&mut self, name: &'static str, ok: bool, detail: impl FnOnce() -> String) {
        let e = self.map.entry(name).or_default();
        e.0 += 1;
        if !ok {
            e.1 += 1;
            if e.2.is_none() {
                e.2 = Some(detail());
            }
        }
    }

    fn record_many(&mut self, name: &'static str, checked: u64, violations: u64, first: Option<String>) {
        let e = self.map.entry(name).or_default();
        e.0 += checked;
        e.1 += violations;
        if e.2.is_none() {
            e.2 = first;
        }
    }

    fn merge(&mut self, other: Tally) {
        for (k, (c, v, f)) in other.map {
            self.record_many(k, c, v, f);
        }
    }

    fn min_checked(&self, names: &[&'static str]) -> u64 {
        names.iter().map(|n| self.map.get(n).map_or(0, |e| e.0)).min().unwrap_or(0)
    }

    fn into_checks(self) -> Vec<CheckTally> {
        self.map
            .into_iter()
            .map(|(name, (checked, violations, first_violation))| CheckTally {
                name: name.to_string(),
                checked,
                violations,
                first_violation,
            })
            .collect()
    }
}

const GEOMETRY_CHECKS: &[&str] = &[
    "up_closure",
    "down_closure",
    "solid_above",
    "lambda_mask",
    "relative_boundary",
    "window_interior",
    "cluster",
    "vd_line_coverage",
    "vd_separation",
    "zeta_dependency_disjoint",
];

const TERRACE_CHECKS: &[&str] = &[
    "cluster_terrace",
    "lambda_upset",
    "lambda_is_q_terrace",
    "plus_minus_intersection",
    "upset_minus_terrace_solid",
    "rectangle_property",
    "decreasing_chain",
    "terrace_path",
    "complement_path",
    "solid_restriction",
    "strip_solid_after_push",
    "h_descent",
    "push_sandwich",
    "h_corner_push",
    "descending_path",
    "stabilize_off_window",
    "stabilize_minimal",
    "stabilize_cover",
    "trichotomy",
    "blocking",
    "increasing_event",
    "slab_clauses",
    "eta_within_zeta",
];

const PIVOTAL_CHECKS: &[&str] = &[
    "fast_matches_naive",
    "naive_matches_brute",
    "vd_partition",
    "corner_conditions",
    "blocking_terrace_membership",
    "witness_path",
];

const MODIFY_CHECKS: &[&str] = &["certificate_verifies", "terrace_properties", "diff_in_window", "u_bar_pivotal"];

/// Run `suite` until every check has at least `cases` applicable instances,
/// giving up after `50 * cases` instances.
pub fn run_suite(suite: Suite, cases: u64, seed: u64) -> Result<SuiteReport> {
    let (names, case_fn): (&[&'static str], fn(u64, u64) -> Result<Tally>) = match suite {
        Suite::Geometry => (GEOMETRY_CHECKS, geometry_case),
        Suite::Terrace => (TERRACE_CHECKS, terrace_case),
        Suite::Pivotal => (PIVOTAL_CHECKS, pivotal_case),
        Suite::Modify => (MODIFY_CHECKS, modify_case),
    };
    let cap = cases.max(1).saturating_mul(50);
    let mut tally = Tally::default();
    let mut next = 0u64;
    while next < cap && tally.min_checked(names) < cases.max(1) {
        let batch = cases.max(16).min(cap - next);
        let parts: Vec<Result<Tally>> = (next..next + batch).into_par_iter().map(|k| case_fn(k, seed)).collect();
        for part in parts {
            tally.merge(part?);
        }
        next += batch;
    }
    for n in names {
        tally.map.entry(n).or_default();
    }
    Ok(SuiteReport {
        suite,
        cases,
        seed,
        instances: next,
        checks: tally.into_checks(),
    })
}

fn case_rng(seed: u64, k: u64) -> StdRng {
    StdRng::seed_from_u64(trial_seed(seed, k))
}

const P_MIX: [f64; 3] = [0.3, 0.6, 0.9];

fn random_box(rng: &mut StdRng, d: usize, max_side: i32) -> LatticeBox {
    let mut lo = Vec::with_capacity(d);
    let mut hi = Vec::with_capacity(d);
    for _ in 0..d {
        let side = rng.gen_range(2..=max_side);
        let l = -rng.gen_range(0..side);
        lo.push(l);
        hi.push(l + side - 1);
    }
    LatticeBox::new(Point::new(lo), Point::new(hi)).expect("valid random box")
}

fn random_subbox(rng: &mut StdRng, r: &LatticeBox) -> LatticeBox {
    let d = r.dim();
    let mut lo = Vec::with_capacity(d);
    let mut hi = Vec::with_capacity(d);
    for a in 0..d {
        let mut x = rng.gen_range(r.lo().coord(a)..=r.hi().coord(a));
        let mut y = rng.gen_range(r.lo().coord(a)..=r.hi().coord(a));
        if x > y {
            std::mem::swap(&mut x, &mut y);
        }
        lo.push(x);
        hi.push(y);
    }
    LatticeBox::new(Point::new(lo), Point::new(hi)).expect("valid sub-box")
}

fn random_point(rng: &mut StdRng, r: &LatticeBox) -> Point {
    r.point(rng.gen_range(0..r.len()))
}

fn pick(rng: &mut StdRng, pts: &[Point]) -> Option<Point> {
    pts.choose(rng).cloned()
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

/// `A_+ ∩ R` by pairwise comparison.
pub fn brute_up_closure(a: &SiteMask) -> SiteMask {
    let r = a.region();
    let pts = a.points();
    SiteMask::from_fn(r, |i| {
        let x = r.point(i);
        pts.iter().any(|y| y.le(&x))
    })
}

/// `A_- ∩ R` by pairwise comparison.
pub fn brute_down_closure(a: &SiteMask) -> SiteMask {
    let r = a.region();
    let pts = a.points();
    SiteMask::from_fn(r, |i| {
        let x = r.point(i);
        pts.iter().any(|y| x.le(y))
    })
}

/// Every `x + e_i` inside the box stays in the set.
pub fn brute_solid_above(a: &SiteMask) -> bool {
    let r = a.region();
    a.points()
        .iter()
        .all(|x| (0..r.dim()).all(|i| !r.contains(&x.step(i, 1)) || a.contains(&x.step(i, 1))))
}

/// Sites of `g` with a lower neighbour in the box outside `g`.
pub fn brute_lambda(g: &SiteMask) -> SiteMask {
    let r = g.region();
    SiteMask::from_fn(r, |i| {
        let x = r.point(i);
        g.contains(&x)
            && (0..r.dim()).any(|a| {
                let y = x.step(a, -1);
                r.contains(&y) && !g.contains(&y)
            })
    })
}

fn moves(steps: StepSet, d: usize) -> Vec<(usize, i32)> {
    let mut out = Vec::new();
    for a in 0..d {
        if steps.has_plus() {
            out.push((a, 1));
        }
        if steps.has_minus() {
            out.push((a, -1));
        }
    }
    out
}

/// Forward cluster of `start` by a depth-first worklist over points.
pub fn brute_cluster(cfg: &Configuration, start: &Point) -> SiteMask {
    let r = cfg.region();
    let d = r.dim();
    let mut reach = SiteMask::empty(r);
    reach.insert(r.index(start).expect("start inside the box"));
    let mut stack = vec![start.clone()];
    while let Some(x) = stack.pop() {
        let i = r.index(&x).unwrap();
        for (a, s) in moves(cfg.steps(i), d) {
            let y = x.step(a, s);
            if let Some(j) = r.index(&y) {
                if !reach.get(j) {
                    reach.insert(j);
                    stack.push(y);
                }
            }
        }
    }
    reach
}

/// Pivotal sites by recomputing both flipped clusters from scratch.
pub fn brute_pivotal(cfg: &Configuration, m: i32) -> Vec<usize> {
    let r = cfg.region();
    let d = r.dim();
    let o = Point::origin(d);
    let corner = Point::diagonal(d, -m);
    let hits = |c: &SiteMask| c.points().iter().any(|x| x.le(&corner));
    (0..r.len())
        .filter(|&u| !hits(&brute_cluster(&cfg.with_site(u, true), &o)) && hits(&brute_cluster(&cfg.with_site(u, false), &o)))
        .collect()
}

/// Whether `delta` is the restriction of the terrace of a good
/// configuration on the box extended one step below.
///
/// With `A = Δ_+ ∩ Q` and `B = {w - e_i : w ∈ A ∖ Δ on the lower face i}`,
/// the up-set `A_+ ∪ B_+` together with everything below the extended box
/// is solid above, saturated and bounded below; its terrace restricted to
/// `Q` must be `delta`.
pub fn q_terrace_witness(delta: &SiteMask) -> bool {
    let q = delta.region();
    let d = q.dim();
    let a = brute_up_closure(delta);
    let a_pts = a.points();
    let lambda_c = |x: &Point| {
        a.contains(x)
            && (0..d).any(|i| {
                let y = x.step(i, -1);
                if q.contains(&y) {
                    !a.contains(&y)
                } else {
                    !a_pts
                        .iter()
                        .any(|w| w.coord(i) == q.lo().coord(i) && !delta.contains(w) && w.le(x))
                }
            })
    };
    q.points().all(|x| lambda_c(&x) == delta.contains(&x))
}

fn corners_of(g: &SiteMask) -> Vec<Point> {
    let r = g.region();
    g.points()
        .into_iter()
        .filter(|x| (0..r.dim()).all(|a| !g.contains(&x.step(a, -1))))
        .collect()
}

fn h_sites(t: &SiteMask) -> Vec<Point> {
    let r = t.region();
    t.points()
        .into_iter()
        .filter(|x| (0..r.dim()).all(|a| !r.contains(&x.step(a, 1)) || t.contains(&x.step(a, 1))))
        .collect()
}

fn interior_of_box(r: &LatticeBox, x: &Point) -> bool {
    (0..r.dim()).all(|a| r.contains(&x.step(a, -1)) && r.contains(&x.step(a, 1)))
}

fn on_relative_face(w: &LatticeBox, r: &LatticeBox, x: &Point) -> bool {
    (0..r.dim()).any(|a| {
        [-1, 1].iter().any(|&s| {
            let y = x.step(a, s);
            r.contains(&y) && !w.contains(&y)
        })
    })
}

/// Smallest up-set containing `A` that agrees with `g` off the interior.
pub fn minimal_upset_closure(g: &SiteMask, interior: &SiteMask, protected: &[Point]) -> SiteMask {
    let mut base = g.difference(interior);
    for a in protected {
        base.insert(g.region().index(a).expect("protected site inside the box"));
    }
    brute_up_closure(&base)
}

/// Greedy removal of removable interior sites until none remain.
pub fn minimal_upset_greedy(g: &SiteMask, interior: &SiteMask, protected: &[Point]) -> SiteMask {
    let r = g.region();
    let mut u = g.clone();
    let prot = SiteMask::from_points(r, protected).expect("protected sites inside the box");
    loop {
        let removable: Vec<usize> = u
            .iter()
            .filter(|&i| interior.get(i) && !prot.get(i))
            .filter(|&i| {
                let x = r.point(i);
                (0..r.dim()).all(|a| !u.contains(&x.step(a, -1)))
            })
            .collect();
        if removable.is_empty() {
            return u;
        }
        for i in removable {
            u.remove(i);
        }
    }
}

fn is_nn_path(p: &LatticePath) -> bool {
    p.points.windows(2).all(|w| w[0].l1_dist(&w[1]) == 1)
}

fn terrace_increment_ok(a: &Point, b: &Point) -> bool {
    let diff = b.sub(a);
    let plus = diff.coords().iter().filter(|&&c| c == 1).count();
    let minus = diff.coords().iter().filter(|&&c| c == -1).count();
    let zero = diff.coords().iter().filter(|&&c| c == 0).count();
    zero + plus + minus == diff.dim() && plus <= 1 && minus <= 1 && plus + minus >= 1
}

// ---------------------------------------------------------------------------
// Geometry suite
// ---------------------------------------------------------------------------

fn geometry_case(k: u64, seed: u64) -> Result<Tally> {
    let mut t = Tally::default();
    if k < 4 {
        let d = 2 + k as usize;
        vd_line_coverage(&mut t, d)?;
        vd_separation(&mut t, d)?;
    }
    let mut rng = case_rng(seed, k);
    let d = [2, 3, 4][(k % 3) as usize];
    let r = random_box(&mut rng, d, [7, 5, 3][d - 2]);
    let density = rng.gen_range(0.02..0.5);
    let mask = SiteMask::from_fn(&r, |_| rng.gen_bool(density));
    let up = mask.up_closure();
    t.record("up_closure", up == brute_up_closure(&mask), || format!("{mask:?}"));
    t.record("down_closure", mask.down_closure() == brute_down_closure(&mask), || format!("{mask:?}"));
    t.record("solid_above", mask.is_solid_above() == brute_solid_above(&mask) && up.is_solid_above(), || {
        format!("{mask:?}")
    });
    let lam = lambda_q(&up)?;
    t.record("lambda_mask", *lam.sites() == brute_lambda(&up), || format!("{up:?}"));

    let q = random_subbox(&mut rng, &r);
    let split = relative_boundary(&q, &r)?;
    let bd_ok = q.points().enumerate().all(|(i, x)| split.boundary.get(i) == on_relative_face(&q, &r, &x));
    t.record("relative_boundary", bd_ok, || format!("{q:?} in {r:?}"));
    let wi = window_interior(&q, &r)?;
    let wi_ok = r.points().all(|x| wi.contains(&x) == (q.contains(&x) && !on_relative_face(&q, &r, &x)));
    t.record("window_interior", wi_ok, || format!("{q:?} in {r:?}"));

    let sets = [StepSet::Plus, StepSet::Minus, StepSet::All];
    let e = *sets.choose(&mut rng).unwrap();
    let f = *sets.choose(&mut rng).unwrap();
    let omega = SiteMask::from_fn(&r, |_| rng.gen_bool(0.5));
    let cfg = Configuration::new(omega, e, f);
    let x = random_point(&mut rng, &r);
    let fast = Search::new().cluster(&cfg, r.index(&x).unwrap());
    t.record("cluster", fast == brute_cluster(&cfg, &x), || format!("E={e} F={f} x={x}"));
    Ok(t)
}

/// Every run of `ρ_d` consecutive points on an axis line meets `V_d`,
/// for starting points in every residue class.
fn vd_line_coverage(t: &mut Tally, d: usize) -> Result<()> {
    let vd = VdLattice::new(d)?;
    let rho = vd.rho() as i32;
    let starts = LatticeBox::new(Point::diagonal(d, 0), Point::diagonal(d, rho - 1))?;
    let (mut checked, mut bad, mut first) = (0u64, 0u64, None);
    for x in starts.points() {
        for a in 0..d {
            for dir in [1, -1] {
                checked += 1;
                if !(0..rho).any(|s| vd.contains(&x.step(a, dir * s))) {
                    bad += 1;
                    first.get_or_insert_with(|| format!("d={d} start={x} axis={a} dir={dir}"));
                }
            }
        }
    }
    t.record_many("vd_line_coverage", checked, bad, first);
    Ok(())
}

/// Distinct `x, x' ∈ V_d` never satisfy `x' - e_i ∈ {x} ∪ {x - e_j}` on
/// `[-2ρ_d, 2ρ_d]^d`, and the layer-2 dependency sets of the slab
/// environment are pairwise disjoint there.
fn vd_separation(t: &mut Tally, d: usize) -> Result<()> {
    let vd = VdLattice::new(d)?;
    let rho = vd.rho() as i32;
    let w = LatticeBox::cube(d, 2 * rho)?;
    let (mut checked, mut bad, mut first) = (0u64, 0u64, None);
    for x in w.points().filter(|x| vd.contains(x)) {
        checked += 1;
        let mut ok = true;
        for i in 0..d {
            let up = x.step(i, 1);
            if w.contains(&up) && vd.contains(&up) {
                ok = false;
            }
            for j in (0..d).filter(|&j| j != i) {
                let y = x.step(i, 1).step(j, -1);
                if w.contains(&y) && vd.contains(&y) {
                    ok = false;
                }
            }
        }
        if !ok {
            bad += 1;
            first.get_or_insert_with(|| format!("d={d} x={x}"));
        }
    }
    t.record_many("vd_separation", checked, bad, first);

    let ext = LatticeBox::new(w.lo().add(&Point::diagonal(d, -1)), w.hi().clone())?;
    let mut hits = vec![0u8; ext.len()];
    let (mut checked, mut bad, mut first) = (0u64, 0u64, None);
    for x in w.points().filter(|x| vd.contains(x)) {
        checked += 1;
        let mut deps = vec![x.clone()];
        deps.extend((0..d).map(|j| x.step(j, -1)));
        for y in deps {
            let i = ext.index(&y).expect("dependency inside the extended window");
            hits[i] += 1;
            if hits[i] > 1 {
                bad += 1;
                first.get_or_insert_with(|| format!("d={d} shared layer-2 site {y}"));
            }
        }
    }
    t.record_many("zeta_dependency_disjoint", checked, bad, first);
    Ok(())
}

// ---------------------------------------------------------------------------
// Terrace suite
// ---------------------------------------------------------------------------

fn terrace_case(k: u64, seed: u64) -> Result<Tally> {
    let mut rng = case_rng(seed, k);
    let mut t = Tally::default();
    let d = 2 + (k % 2) as usize;
    let p = P_MIX[((k / 2) % 3) as usize];
    let r = random_box(&mut rng, d, if d == 2 { 10 } else { 6 });
    let omega = SiteMask::from_fn(&r, |_| rng.gen_bool(p));
    let cfg = Configuration::half_orthant(omega);
    let x = random_point(&mut rng, &r);
    let g = forward_cluster(&cfg, &r, &x)?;
    let ext = extract_terrace(&cfg, &r, &x)?;

    let h_ok = match &ext {
        Extraction::FillsBox => g.is_full(),
        Extraction::Terrace(delta) => {
            let h = h_sites(delta.sites());
            h.is_empty() || (delta.contains(&x) && h.iter().all(|y| x.le(y)))
        }
    };
    t.record("trichotomy", h_ok && trichotomy(&ext, &x).is_some(), || format!("x={x} in {r:?}"));

    let mut more = cfg.clone();
    for i in 0..r.len() {
        if !more.is_omega1(i) && rng.gen_bool(0.2) {
            more.set_omega1(i, true);
        }
    }
    let g_more = brute_cluster(&more, &x);
    t.record("increasing_event", g_more.is_subset(&g), || format!("x={x} in {r:?}"));

    if let Extraction::Terrace(delta) = &ext {
        let sites = delta.sites();
        let ok = g == brute_cluster(&cfg, &x)
            && *sites == brute_lambda(&g)
            && sites.is_subset(&g)
            && sites.is_subset(cfg.omega1());
        t.record("cluster_terrace", ok, || format!("x={x} in {r:?}"));
        if let Some(y) = pick(&mut rng, &g.points()) {
            let c = brute_cluster(&cfg, &y);
            t.record("blocking", c.is_subset(&g), || format!("from {y}, x={x}"));
        }
        terrace_checks(&mut t, &mut rng, delta)?;
    }

    let big = random_box(&mut rng, d, if d == 2 { 10 } else { 6 });
    let q = random_subbox(&mut rng, &big);
    let b = SiteMask::from_fn(&big, |_| rng.gen_bool(0.05));
    let restricted = brute_up_closure(&b).restrict(&q);
    t.record("solid_restriction", brute_solid_above(&restricted), || format!("{q:?} in {big:?}"));

    slab_checks(&mut t, &mut rng, d, p)?;
    Ok(t)
}

fn terrace_checks(t: &mut Tally, rng: &mut StdRng, delta: &QTerrace) -> Result<()> {
    let r = delta.region().clone();
    let d = r.dim();
    let g = delta.upset();
    let sites = delta.sites();

    t.record("lambda_upset", brute_up_closure(sites) == *g, || format!("{g:?}"));
    t.record("lambda_is_q_terrace", q_terrace_witness(sites), || format!("{sites:?}"));

    let down = brute_down_closure(sites);
    let pm_ok = r
        .points()
        .filter(|x| (0..d).all(|a| r.contains(&x.step(a, -1))))
        .all(|x| sites.contains(&x) == (g.contains(&x) && down.contains(&x)));
    t.record("plus_minus_intersection", pm_ok, || format!("{g:?}"));

    let strip = g.difference(sites);
    t.record("upset_minus_terrace_solid", brute_solid_above(&strip), || format!("{g:?}"));

    let g_pts = g.points();
    let d_pts = sites.points();
    let mut rect_ok = true;
    let mut rect_detail = String::new();
    for _ in 0..8 {
        let y = d_pts.choose(rng).unwrap();
        let below: Vec<&Point> = g_pts.iter().filter(|x| (*x).le(y)).collect();
        let x = below.choose(rng).unwrap();
        let rect = LatticeBox::new((*x).clone(), y.clone())?;
        if !rect.points().all(|z| sites.contains(&z)) {
            rect_ok = false;
            rect_detail = format!("[{x}, {y}]");
        }
    }
    t.record("rectangle_property", rect_ok, || rect_detail);

    let h = h_sites(sites);
    let hset = SiteMask::from_points(&r, &h)?;
    let corners = SiteMask::from_points(&r, &corners_of(g))?;
    let descent_ok = h
        .iter()
        .all(|z| corners.contains(z) || (0..d).any(|a| hset.contains(&z.step(a, -1))));
    t.record("h_descent", descent_ok, || format!("{g:?}"));

    let interior_corners: Vec<Point> = corners_of(g).into_iter().filter(|z| interior_of_box(&r, z)).collect();
    if let Some(z) = pick(rng, &interior_corners) {
        let pushed = delta.push_up(&z)?;
        let mut lo = sites.clone();
        lo.remove(r.index(&z).unwrap());
        let mut hi = lo.clone();
        for a in 0..d {
            hi.insert(r.index(&z.step(a, 1)).unwrap());
        }
        let mut g_minus = g.clone();
        g_minus.remove(r.index(&z).unwrap());
        let ok = lo.is_subset(pushed.sites()) && pushed.sites().is_subset(&hi) && *pushed.upset() == g_minus;
        t.record("push_sandwich", ok, || format!("z={z} {g:?}"));
    }
    let h_corners: Vec<&Point> = interior_corners.iter().filter(|z| hset.contains(z)).collect();
    if !h_corners.is_empty() {
        let ok = h_corners.iter().all(|z| {
            let mut expect = sites.clone();
            expect.remove(r.index(z).unwrap());
            delta.push_up(z).map(|p| *p.sites() == expect).unwrap_or(false)
        });
        t.record("h_corner_push", ok, || format!("{g:?}"));
    }

    let mut chain = vec![delta.clone()];
    let mut chain_ok = true;
    let mut strip_ok = true;
    for _ in 0..rng.gen_range(1..=6) {
        let cur = chain.last().unwrap();
        let cs: Vec<Point> = corners_of(cur.upset()).into_iter().filter(|z| interior_of_box(&r, z)).collect();
        let Some(z) = pick(rng, &cs) else { break };
        let next = cur.push_up(&z)?;
        chain_ok &= next.upset().is_subset(cur.upset()) && next.upset() != cur.upset();
        strip_ok &= brute_solid_above(&next.upset().difference(next.sites()));
        chain.push(next);
    }
    let meet = chain.iter().fold(SiteMask::full(&r), |acc, c| acc.intersection(c.upset()));
    chain_ok &= brute_solid_above(&meet) && q_terrace_witness(&brute_lambda(&meet));
    t.record("decreasing_chain", chain_ok, || format!("{g:?}"));
    if chain.len() > 1 {
        t.record("strip_solid_after_push", strip_ok, || format!("{g:?}"));
    }

    let last = chain.last().unwrap();
    let mut tp_ok = true;
    let mut tp_detail = String::new();
    let lp = last.sites().points();
    for _ in 0..4 {
        let (a, b) = (lp.choose(rng).unwrap(), lp.choose(rng).unwrap());
        let ok = match last.terrace_path(a, b) {
            Ok(p) => {
                p.start() == Some(a)
                    && p.end() == Some(b)
                    && p.points.iter().all(|z| last.contains(z))
                    && p.points.windows(2).all(|w| terrace_increment_ok(&w[0], &w[1]))
            }
            Err(_) => false,
        };
        if !ok {
            tp_ok = false;
            tp_detail = format!("{a} -> {b}");
        }
    }
    t.record("terrace_path", tp_ok, || tp_detail);

    let below: Vec<Point> = last.upset().complement().points();
    let between: Vec<Point> = last.upset().difference(last.sites()).points();
    let mut cp_ok = true;
    let mut cp_detail = String::new();
    let mut cp_any = false;
    for pool in [&below, &between] {
        if pool.is_empty() {
            continue;
        }
        cp_any = true;
        let (a, b) = (pool.choose(rng).unwrap(), pool.choose(rng).unwrap());
        let ok = match last.complement_path(a, b) {
            Ok(p) => {
                p.start() == Some(a)
                    && p.end() == Some(b)
                    && is_nn_path(&p)
                    && p.is_self_avoiding()
                    && p.points.iter().all(|z| r.contains(z) && !last.contains(z))
            }
            Err(_) => false,
        };
        if !ok {
            cp_ok = false;
            cp_detail = format!("{a} -> {b}");
        }
    }
    if cp_any {
        t.record("complement_path", cp_ok, || cp_detail);
    }

    stabilize_checks(t, rng, delta)
}

fn stabilize_checks(t: &mut Tally, rng: &mut StdRng, delta: &QTerrace) -> Result<()> {
    let r = delta.region().clone();
    let d = r.dim();
    let g = delta.upset();
    let w = random_subbox(rng, &r);
    let interior = window_interior(&w, &r)?;
    let g_pts = g.points();
    let protected: Vec<Point> = (0..rng.gen_range(0..=2)).filter_map(|_| pick(rng, &g_pts)).collect();

    let mut ed = TerraceEditor::new(delta.clone());
    ed.stabilize(&w, &protected, |_| false)?;
    let pushes = ed.history().len();
    let st = ed.finish();

    let off = interior.complement();
    let outside = SiteMask::from_fn(&r, |i| !w.contains(&r.point(i)));
    let off_ok = st.sites().intersection(&outside) == delta.sites().intersection(&outside)
        && st.upset().intersection(&off) == g.intersection(&off);
    t.record("stabilize_off_window", off_ok, || format!("{w:?} A={protected:?} {g:?}"));

    let min_ok = *st.upset() == minimal_upset_closure(g, &interior, &protected)
        && *st.upset() == minimal_upset_greedy(g, &interior, &protected);
    t.record("stabilize_minimal", min_ok, || format!("{w:?} A={protected:?} {g:?}"));

    let anchors: Vec<Point> = g_pts
        .iter()
        .filter(|z| protected.contains(z) || (w.contains(z) && on_relative_face(&w, &r, z)))
        .cloned()
        .collect();
    let prot = SiteMask::from_points(&r, &protected)?;
    let cover = st.sites().points().iter().filter(|x| w.contains(x)).all(|x| anchors.iter().any(|z| z.le(x)));
    let no_corners = corners_of(st.upset()).iter().all(|z| !interior.contains(z) || prot.contains(z));
    let ok = cover
        && no_corners
        && st.upset().is_subset(g)
        && st.sites().is_subset(g)
        && g.count() - st.upset().count() == pushes;
    t.record("stabilize_cover", ok, || format!("{w:?} A={protected:?} {g:?}"));

    let clean = delta.stabilize(&w, &[])?;
    let mut ok = true;
    let mut detail = String::new();
    for x in clean.sites().points().into_iter().filter(|x| w.contains(x)) {
        let good = match clean.special_descending_path(&w, &x) {
            Ok(p) => {
                let axes: Vec<usize> = p
                    .points
                    .windows(2)
                    .map(|s| (0..d).find(|&a| s[1] == s[0].step(a, -1)).unwrap_or(usize::MAX))
                    .collect();
                p.start() == Some(&x)
                    && axes.iter().all(|&a| a < d)
                    && axes.windows(2).all(|s| s[0] <= s[1])
                    && p.points.iter().all(|z| w.contains(z) && clean.contains(z))
                    && on_relative_face(&w, &r, p.end().unwrap())
            }
            Err(_) => false,
        };
        if !good {
            ok = false;
            detail = format!("x={x} window={w:?}");
        }
    }
    t.record("descending_path", ok, || detail);
    Ok(())
}

fn slab_checks(t: &mut Tally, rng: &mut StdRng, d: usize, p: f64) -> Result<()> {
    let window = random_box(rng, d, if d == 2 { 8 } else { 5 });
    let lift = |x: &Point, layer: i32| {
        let mut c = x.coords().to_vec();
        c.push(layer);
        Point::new(c)
    };
    let region = LatticeBox::new(lift(&window.lo().add(&Point::diagonal(d, -1)), 1), lift(window.hi(), 2))?;
    let spec = ModelSpec::new(ModelKind::Slab, d, p, p)?;
    let env = EnvironmentField::new(spec, region, rng.gen())?;
    let x = lift(&random_point(rng, &window), 1);
    let rep = slab_terraces(&env, &window, &x)?;
    let mut ok = rep.clauses.all();
    for (k, layer) in rep.layers.iter().enumerate() {
        let Some(layer) = layer else { continue };
        let li = k as i32 + 1;
        ok &= layer.sites().is_subset(&rep.slices[k]);
        ok &= layer.sites().points().iter().all(|z| env.omega1_at(lift(z, li).coords()));
        if k == 0 {
            ok &= layer.sites().points().iter().all(|z| {
                std::iter::once(z.clone())
                    .chain((0..d).map(|j| z.step(j, -1)))
                    .any(|y| window.contains(&y) && env.omega1_at(lift(&y, 2).coords()))
            });
        }
    }
    t.record("slab_clauses", ok, || format!("x={x} window={window:?} seed={}", env.seed()));
    let ez = derive_eta_zeta(&env, &window)?;
    t.record("eta_within_zeta", ez.eta.is_subset(&ez.zeta), || format!("window={window:?} seed={}", env.seed()));
    Ok(())
}

// ---------------------------------------------------------------------------
// Pivotal suite
// ---------------------------------------------------------------------------

fn pivotal_case(k: u64, seed: u64) -> Result<Tally> {
    let mut rng = case_rng(seed, k);
    let mut t = Tally::default();
    let d = 2 + (k % 2) as usize;
    let big_n = if d == 2 { rng.gen_range(2..=5) } else { rng.gen_range(1..=3) };
    let m = rng.gen_range(1..=big_n);
    let p = rng.gen_range(0.2..0.9);
    let r = LatticeBox::cube(d, big_n)?;
    let cfg = Configuration::half_orthant(SiteMask::from_fn(&r, |_| rng.gen_bool(p)));
    let naive = pivotal_indices(&cfg, m, PivotalMode::Naive)?;
    let fast = pivotal_indices(&cfg, m, PivotalMode::Fast)?;
    let ctx = || format!("d={d} N={big_n} M={m} case={k}");
    t.record("fast_matches_naive", fast == naive, ctx);
    t.record("naive_matches_brute", naive == brute_pivotal(&cfg, m), ctx);
    if naive.is_empty() {
        return Ok(t);
    }
    let rep = find_pivotal(&cfg, m, PivotalMode::Fast)?;
    let vd = VdLattice::new(d)?;
    let o = Point::origin(d);
    let s = target_set(&r, m)?;
    let mut part_ok = rep.total() == naive.len();
    let (mut corner_ok, mut member_ok, mut path_ok) = (true, true, true);
    for site in &rep.sites {
        let u = &site.point;
        let ui = r.index(u).unwrap();
        part_ok &= site.on_vd == vd.contains(u) && (rep.on_vd.contains(u) != rep.off_vd.contains(u));
        let blocked = cfg.with_site(ui, true);
        let cluster = brute_cluster(&blocked, &o);
        let lam = if cluster.is_full() { SiteMask::empty(&r) } else { brute_lambda(&cluster) };
        let in_delta = lam.contains(u);
        member_ok &= site.in_blocking_terrace == in_delta;
        if !o.le(u) {
            let up = (0..d).any(|a| {
                let y = u.step(a, 1);
                r.contains(&y) && !lam.contains(&y)
            });
            let down = (0..d).any(|a| {
                let y = u.step(a, -1);
                r.contains(&y) && !cluster.contains(&y)
            });
            corner_ok &= in_delta && up && down && pivotal_corner_conditions(&cfg, u)?;
        }
        let open = cfg.with_site(ui, false);
        let path = &site.connecting_path;
        path_ok &= path.start() == Some(&o)
            && path.end().is_some_and(|e| s.contains(e))
            && path.consistent_with_config(&open);
    }
    t.record("vd_partition", part_ok, ctx);
    t.record("corner_conditions", corner_ok, ctx);
    t.record("blocking_terrace_membership", member_ok, ctx);
    t.record("witness_path", path_ok, ctx);
    Ok(t)
}

// ---------------------------------------------------------------------------
// Modification suite
// ---------------------------------------------------------------------------

fn modify_case(k: u64, seed: u64) -> Result<Tally> {
    let mut t = Tally::default();
    let d = 2 + (k % 2) as usize;
    let (big_n, m, n, ps): (i32, i32, i32, &[f64]) = if d == 2 {
        (10, 9, 8, &[0.45, 0.5, 0.55, 0.6])
    } else {
        (12, 11, 10, &[0.7, 0.75, 0.8])
    };
    let p = ps[((k / 2) as usize) % ps.len()];
    let r = LatticeBox::cube(d, big_n)?;
    let env = EnvironmentField::new(ModelSpec::half_orthant(d, p)?, r.clone(), trial_seed(seed, k))?;
    let cfg = env.configuration(&r)?;
    let vd = VdLattice::new(d)?;
    for u in pivotal_indices(&cfg, m, PivotalMode::Fast)? {
        let u = r.point(u);
        if vd.contains(&u) {
            continue;
        }
        let ctx = || format!("d={d} p={p} case={k} u={u}");
        let cert = match local_modify(&cfg, m, &u, n) {
            Ok(c) => c,
            Err(e) => {
                for name in MODIFY_CHECKS {
                    t.record(name, false, || format!("{} failed: {e}", ctx()));
                }
                continue;
            }
        };
        let re = verify_certificate(&cfg, &cert)?;
        t.record("certificate_verifies", re.passed() && cert.verification.passed(), ctx);
        t.record("terrace_properties", re.terrace.all(), ctx);
        let modified = cert.apply(&cfg)?;
        let diff_ok = (0..r.len())
            .filter(|&i| modified.steps(i) != cfg.steps(i))
            .all(|i| cert.window.contains(&r.point(i)));
        t.record("diff_in_window", diff_ok, ctx);
        t.record("u_bar_pivotal", is_pivotal(&modified, m, &cert.u_bar)?, ctx);
    }
    Ok(t)
}
