//! Pivotal sites, the local-modification construction, Russo derivative
//! estimates and the two-layer slab terraces.

use petgraph::algo::dominators::simple_fast;
use petgraph::graph::{DiGraph, NodeIndex};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{
    check_probability, trial_seed, Configuration, EnvironmentField, ModelKind, ModelSpec, StepSet,
};
use crate::error::{Error, Result};
use crate::lattice::{down_cone, LatticeBox, Point, SiteMask, VdLattice};
use crate::reachability::{backward_reach, connects_to_down_set, LatticePath, Search};
use crate::terrace::{extract_terrace, lambda_q, window_interior, Extraction, QTerrace, TerraceEditor};

/// `S = (-M·1)_- ∩ R`.
pub fn target_set(r: &LatticeBox, m: i32) -> Result<SiteMask> {
    let d = r.dim();
    if m < 1 {
        return Err(Error::Precondition(format!("target offset M = {m} must be positive")));
    }
    let o = Point::origin(d);
    let t = Point::diagonal(d, -m);
    if !r.contains(&o) || !r.contains(&t) {
        return Err(Error::Precondition("box must contain o and -M·1".into()));
    }
    down_cone(&t, r)
}

/// How [`find_pivotal`] evaluates pivotality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PivotalMode {
    /// Two searches per site.
    Naive,
    /// One cluster pass plus a dominator tree; falls back to `Naive` unless
    /// `E = ℰ_+` and `F = ℰ`.
    Fast,
}

struct Flip<'a> {
    cfg: Configuration,
    o: usize,
    s: &'a SiteMask,
    search: Search,
}

impl<'a> Flip<'a> {
    fn new(cfg: &Configuration, s: &'a SiteMask) -> Self {
        let o = cfg.region().index(&Point::origin(cfg.region().dim())).unwrap();
        Flip {
            cfg: cfg.clone(),
            o,
            s,
            search: Search::new(),
        }
    }

    /// Blocked with `ω_u = E` and connected with `ω_u = F`.
    fn pivotal(&mut self, u: usize) -> bool {
        let orig = self.cfg.is_omega1(u);
        self.cfg.set_omega1(u, true);
        let blocked = !self.search.reaches(&self.cfg, self.o, self.s);
        let open = blocked && {
            self.cfg.set_omega1(u, false);
            self.search.reaches(&self.cfg, self.o, self.s)
        };
        self.cfg.set_omega1(u, orig);
        open
    }
}

/// Two-sided pivotality of a single site, recomputed from scratch.
pub fn is_pivotal(cfg: &Configuration, m: i32, u: &Point) -> Result<bool> {
    let s = target_set(cfg.region(), m)?;
    let ui = cfg.region().index_checked(u)?;
    Ok(Flip::new(cfg, &s).pivotal(ui))
}

/// Indices of `P_M(ω_R)` in increasing order.
pub fn pivotal_indices(cfg: &Configuration, m: i32, mode: PivotalMode) -> Result<Vec<usize>> {
    let s = target_set(cfg.region(), m)?;
    let monotone = cfg.e_set() == StepSet::Plus && cfg.f_set() == StepSet::All;
    if mode == PivotalMode::Naive || !monotone {
        let mut flip = Flip::new(cfg, &s);
        return Ok((0..cfg.region().len()).filter(|&u| flip.pivotal(u)).collect());
    }
    Ok(pivotal_fast(cfg, &s))
}

fn pivotal_fast(cfg: &Configuration, s: &SiteMask) -> Vec<usize> {
    let r = cfg.region();
    let d = r.dim();
    let o = r.index(&Point::origin(d)).unwrap();
    let cluster = Search::new().cluster(cfg, o);
    let back = backward_reach(cfg, s);
    if cluster.intersection(&back).is_empty() {
        return cluster
            .iter()
            .filter(|&u| cfg.is_omega1(u))
            .filter(|&u| (0..d).any(|a| r.below(u, a).is_some_and(|j| back.get(j))))
            .collect();
    }
    let n = r.len();
    let mut hub = vec![u32::MAX; n];
    let mut next = n as u32;
    for u in cluster.iter().filter(|&u| !cfg.is_omega1(u)) {
        hub[u] = next;
        next += 1;
    }
    let sink = next;
    let mut edges: Vec<(u32, u32)> = Vec::with_capacity(n * (d + 1));
    for x in 0..n {
        for a in 0..d {
            if let Some(j) = r.above(x, a) {
                edges.push((x as u32, j as u32));
            }
        }
        if !cfg.is_omega1(x) {
            let from = if hub[x] == u32::MAX { x as u32 } else { hub[x] };
            if from != x as u32 {
                edges.push((x as u32, from));
            }
            for a in 0..d {
                if let Some(j) = r.below(x, a) {
                    edges.push((from, j as u32));
                }
            }
        }
        if s.get(x) {
            edges.push((x as u32, sink));
        }
    }
    let mut g: DiGraph<(), ()> = DiGraph::with_capacity(sink as usize + 1, edges.len());
    for _ in 0..=sink {
        g.add_node(());
    }
    for (a, b) in edges {
        g.add_edge(NodeIndex::new(a as usize), NodeIndex::new(b as usize), ());
    }
    let dom = simple_fast(&g, NodeIndex::new(o));
    let mut out: Vec<usize> = match dom.dominators(NodeIndex::new(sink as usize)) {
        Some(it) => it
            .map(NodeIndex::index)
            .filter(|&i| i >= n && i < sink as usize)
            .map(|h| hub.iter().position(|&x| x as usize == h).unwrap())
            .collect(),
        None => Vec::new(),
    };
    out.sort_unstable();
    out
}

/// One pivotal site with its witness data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PivotalSite {
    pub point: Point,
    pub on_vd: bool,
    /// Membership in `λ^R` of the cluster of `o` with the site set to `E`.
    pub in_blocking_terrace: bool,
    /// A path from `o` into `S` once the site is set to `F`.
    pub connecting_path: LatticePath,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PivotalReport {
    pub region: LatticeBox,
    pub m: i32,
    pub on_vd: Vec<Point>,
    pub off_vd: Vec<Point>,
    pub sites: Vec<PivotalSite>,
}

impl PivotalReport {
    pub fn total(&self) -> usize {
        self.on_vd.len() + self.off_vd.len()
    }
}

/// `P_M(ω_R)` split by membership in `V_d`, with per-site witnesses.
pub fn find_pivotal(cfg: &Configuration, m: i32, mode: PivotalMode) -> Result<PivotalReport> {
    let r = cfg.region();
    let d = r.dim();
    let vd = VdLattice::new(d)?;
    let o = Point::origin(d);
    let target = Point::diagonal(d, -m);
    let mut report = PivotalReport {
        region: r.clone(),
        m,
        on_vd: Vec::new(),
        off_vd: Vec::new(),
        sites: Vec::new(),
    };
    for u in pivotal_indices(cfg, m, mode)? {
        let p = r.point(u);
        let on_vd = vd.contains(&p);
        let in_blocking_terrace = match extract_terrace(&cfg.with_site(u, true), r, &o)? {
            Extraction::Terrace(t) => t.sites().get(u),
            Extraction::FillsBox => false,
        };
        let connecting_path = connects_to_down_set(&cfg.with_site(u, false), r, &o, &target)?
            .ok_or_else(|| Error::Precondition(format!("no witness path for {p}")))?;
        if on_vd {
            report.on_vd.push(p.clone());
        } else {
            report.off_vd.push(p.clone());
        }
        report.sites.push(PivotalSite {
            point: p,
            on_vd,
            in_blocking_terrace,
            connecting_path,
        });
    }
    Ok(report)
}

/// Necessary conditions on a pivotal `u ∉ o_+`: `u ∈ Δ`, some `u + e_i ∈ R ∖ Δ`
/// and some `u - e_j ∈ R ∖ Δ_+`, where `Δ` is the terrace blocking `o` once
/// `u` is set to `E`. Sites in `o_+` pass trivially.
pub fn pivotal_corner_conditions(cfg: &Configuration, u: &Point) -> Result<bool> {
    let r = cfg.region();
    let o = Point::origin(r.dim());
    if o.le(u) {
        return Ok(true);
    }
    let ui = r.index_checked(u)?;
    let t = match extract_terrace(&cfg.with_site(ui, true), r, &o)? {
        Extraction::Terrace(t) => t,
        Extraction::FillsBox => return Ok(false),
    };
    let d = r.dim();
    let up = (0..d).any(|a| r.above(ui, a).is_some_and(|j| !t.sites().get(j)));
    let down = (0..d).any(|a| r.below(ui, a).is_some_and(|j| !t.upset().get(j)));
    Ok(t.sites().get(ui) && up && down)
}

/// Which branch of the construction produced `ū`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModificationCase {
    /// `u ∈ o_+`, `o` outside the inner window.
    #[serde(rename = "I")]
    I,
    /// Generic push-up construction.
    #[serde(rename = "II")]
    II,
    /// Push-up construction with `ū` found from `v = u + e_a - e_j`.
    #[serde(rename = "II-special")]
    IISpecial,
    /// `o` inside the inner window.
    #[serde(rename = "III")]
    III,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteDiff {
    pub point: Point,
    pub old: StepSet,
    pub new: StepSet,
}

/// The seven terrace properties of the modified terrace `Δ̄`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerraceChecks {
    /// `Δ̄ = λ^R` of its own up-set.
    pub canonical: bool,
    /// `Δ̄ = Δ` off the window interior.
    pub agrees_off_window: bool,
    /// `Δ̄_+ = Δ_+` off the window interior.
    pub upset_agrees_off_window: bool,
    /// `Δ̄_+ ⊆ Δ_+`.
    pub upset_shrinks: bool,
    pub origin_in_upset: bool,
    /// `S ∩ Δ̄_+ = ∅`.
    pub target_clear: bool,
    /// `ū ∈ Δ̄ ∩ V_d ∩ Q̄` and either `ū ∉ H^R` or `ū ∈ o_+`.
    pub u_bar_admissible: bool,
}

impl TerraceChecks {
    pub fn all(&self) -> bool {
        self.canonical
            && self.agrees_off_window
            && self.upset_agrees_off_window
            && self.upset_shrinks
            && self.origin_in_upset
            && self.target_clear
            && self.u_bar_admissible
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verification {
    pub terrace: TerraceChecks,
    pub u_bar_in_vd: bool,
    pub u_bar_in_inner_window: bool,
    pub diff_in_window: bool,
    pub u_bar_pivotal: bool,
}

impl Verification {
    pub fn passed(&self) -> bool {
        self.terrace.all()
            && self.u_bar_in_vd
            && self.u_bar_in_inner_window
            && self.diff_in_window
            && self.u_bar_pivotal
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModificationCertificate {
    pub u: Point,
    pub u_bar: Point,
    pub case: ModificationCase,
    pub n: i32,
    pub m: i32,
    /// `Q_{n,u,N} = (u + Q_n) ∩ R`.
    pub window: LatticeBox,
    /// `Q̄ = (u + Q_{n-2}) ∩ R`.
    pub inner_window: LatticeBox,
    /// Smallest `a` with `u + e_a ∈ R ∖ Δ` (push-up branches only).
    pub axis: Option<usize>,
    pub protected: Vec<Point>,
    /// Sites removed from the up-set during the construction.
    pub removed: usize,
    /// `ū` came from the exhaustive scan of `Δ̄ ∩ V_d ∩ Q̄`.
    pub fallback_scan: bool,
    pub diffs: Vec<SiteDiff>,
    pub verification: Verification,
}

impl ModificationCertificate {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// `ω̄`: the diffs applied to `cfg`.
    pub fn apply(&self, cfg: &Configuration) -> Result<Configuration> {
        let mut out = cfg.clone();
        let r = cfg.region();
        for diff in &self.diffs {
            let i = r.index_checked(&diff.point)?;
            if cfg.steps(i) != diff.old {
                return Err(Error::Precondition(format!("diff at {} does not match", diff.point)));
            }
            let on = if diff.new == cfg.e_set() {
                true
            } else if diff.new == cfg.f_set() {
                false
            } else {
                return Err(Error::Precondition(format!("step set {} not in the model", diff.new)));
            };
            out.set_omega1(i, on);
        }
        Ok(out)
    }
}

fn cube_half_width(r: &LatticeBox) -> Result<i32> {
    let n = r.hi().coord(0);
    if *r == LatticeBox::cube(r.dim(), n)? {
        Ok(n)
    } else {
        Err(Error::Precondition("ambient box must be [-N, N]^d".into()))
    }
}

struct Built {
    terrace: QTerrace,
    u_bar: Point,
    case: ModificationCase,
    axis: Option<usize>,
    protected: Vec<Point>,
    removed: usize,
    fallback: bool,
}

/// Modify `ω` on `Q_{n,u,N}` so that a site `ū ∈ V_d` near `u` becomes pivotal.
pub fn local_modify(cfg: &Configuration, m: i32, u: &Point, n: i32) -> Result<ModificationCertificate> {
    let r = cfg.region().clone();
    let d = r.dim();
    let big_n = cube_half_width(&r)?;
    let vd = VdLattice::new(d)?;
    if i64::from(n) <= vd.rho() + 4 {
        return Err(Error::Precondition(format!("n = {n} must exceed ρ_d + 4 = {}", vd.rho() + 4)));
    }
    if !(big_n > m && m > n) {
        return Err(Error::Precondition(format!("need N > M > n, got {big_n}, {m}, {n}")));
    }
    let ui = r.index_checked(u)?;
    if vd.contains(u) {
        return Err(Error::Precondition(format!("{u} already lies in V_d")));
    }
    if !is_pivotal(cfg, m, u)? {
        return Err(Error::Precondition(format!("{u} is not pivotal")));
    }
    let o = Point::origin(d);
    let s = target_set(&r, m)?;
    let delta = match extract_terrace(&cfg.with_site(ui, true), &r, &o)? {
        Extraction::Terrace(t) => t,
        Extraction::FillsBox => {
            return Err(Error::Precondition("cluster of o fills R although u is pivotal".into()))
        }
    };
    let window = LatticeBox::centered(u, n)?.intersect(&r).unwrap();
    let inner = LatticeBox::centered(u, n - 2)?.intersect(&r).unwrap();
    let o_inner = inner.contains(&o);

    let built = if o.le(u) {
        if o_inner {
            Built {
                terrace: delta.clone(),
                u_bar: o.clone(),
                case: ModificationCase::III,
                axis: None,
                protected: Vec::new(),
                removed: 0,
                fallback: false,
            }
        } else {
            case_one(&delta, u, n, &vd)?
        }
    } else {
        push_up_construction(&delta, u, n, &window, &inner, o_inner, &vd)?
    };

    let mut bar = cfg.clone();
    let mut diffs = Vec::new();
    for p in window.points() {
        let i = r.index(&p).unwrap();
        let on = built.terrace.sites().get(i);
        if cfg.is_omega1(i) != on {
            diffs.push(SiteDiff {
                point: p,
                old: cfg.steps(i),
                new: if on { cfg.e_set() } else { cfg.f_set() },
            });
            bar.set_omega1(i, on);
        }
    }
    let terrace_checks = terrace_checks(&delta, &built.terrace, &window, &inner, &s, &built.u_bar, &vd)?;
    let mut cert = ModificationCertificate {
        u: u.clone(),
        u_bar: built.u_bar,
        case: built.case,
        n,
        m,
        window,
        inner_window: inner,
        axis: built.axis,
        protected: built.protected,
        removed: built.removed,
        fallback_scan: built.fallback,
        diffs,
        verification: Verification {
            terrace: terrace_checks,
            u_bar_in_vd: false,
            u_bar_in_inner_window: false,
            diff_in_window: false,
            u_bar_pivotal: false,
        },
    };
    let independent = verify_certificate(cfg, &cert)?;
    cert.verification = Verification {
        terrace: terrace_checks,
        ..independent
    };
    Ok(cert)
}

/// Recheck a certificate against the original configuration without reusing
/// any construction state; the terrace checks are copied through.
pub fn verify_certificate(cfg: &Configuration, cert: &ModificationCertificate) -> Result<Verification> {
    let d = cfg.region().dim();
    let vd = VdLattice::new(d)?;
    let window = LatticeBox::centered(&cert.u, cert.n)?
        .intersect(cfg.region())
        .ok_or(Error::NotSubBox)?;
    let inner = LatticeBox::centered(&cert.u, cert.n - 2)?
        .intersect(cfg.region())
        .ok_or(Error::NotSubBox)?;
    let bar = cert.apply(cfg)?;
    let diff_in_window = cfg
        .region()
        .points()
        .enumerate()
        .all(|(i, p)| window.contains(&p) || cfg.is_omega1(i) == bar.is_omega1(i));
    Ok(Verification {
        terrace: cert.verification.terrace,
        u_bar_in_vd: vd.contains(&cert.u_bar),
        u_bar_in_inner_window: inner.contains(&cert.u_bar) && window == cert.window,
        diff_in_window,
        u_bar_pivotal: is_pivotal(&bar, cert.m, &cert.u_bar)?,
    })
}

fn case_one(delta: &QTerrace, u: &Point, n: i32, vd: &VdLattice) -> Result<Built> {
    let d = u.dim();
    let mut best: Option<Point> = None;
    for j in (0..d).filter(|&j| u.coord(j) >= n - 2) {
        for k in 0..=n - 2 {
            let c = u.step(j, -k);
            if vd.contains(&c) && delta.contains(&c) && best.as_ref().map_or(true, |b| c < *b) {
                best = Some(c);
            }
        }
    }
    let u_bar = best.ok_or_else(|| Error::Precondition("no V_d site on the segment below u".into()))?;
    Ok(Built {
        terrace: delta.clone(),
        u_bar,
        case: ModificationCase::I,
        axis: None,
        protected: Vec::new(),
        removed: 0,
        fallback: false,
    })
}

fn push_up_construction(
    delta: &QTerrace,
    u: &Point,
    n: i32,
    window: &LatticeBox,
    inner: &LatticeBox,
    o_inner: bool,
    vd: &VdLattice,
) -> Result<Built> {
    let r = delta.region().clone();
    let d = r.dim();
    let o = Point::origin(d);
    let ui = r.index(u).unwrap();
    let a = (0..d)
        .find(|&a| r.above(ui, a).is_some_and(|j| !delta.sites().get(j)))
        .ok_or_else(|| Error::Precondition(format!("no upper neighbour of {u} leaves the terrace")))?;
    let ua = u.step(a, 1);
    let mut protected = Vec::new();
    for i in 0..d {
        let p = ua.step(i, -1);
        if r.contains(&p) {
            if !delta.upset().contains(&p) {
                return Err(Error::Precondition(format!("{p} lies in R below the terrace")));
            }
            protected.push(p);
        }
    }
    let interior = window_interior(window, &r)?;
    let guard = |z: &Point| o_inner && *z == o;
    let mut ed = TerraceEditor::new(delta.clone());
    let mut stopped = false;
    loop {
        let p1 = ed.stabilize(inner, &protected, guard)?;
        if p1.stopped {
            stopped = true;
            break;
        }
        let p2 = ed.delete_h_corners(&o, Some(&interior), guard)?;
        if p2.stopped {
            stopped = true;
            break;
        }
        if p1.removed + p2.removed == 0 {
            break;
        }
    }
    let removed = ed.history().len();
    let t = ed.finish();
    if stopped {
        return Ok(Built {
            terrace: t,
            u_bar: o,
            case: ModificationCase::III,
            axis: Some(a),
            protected,
            removed,
            fallback: false,
        });
    }
    let ok = protected.iter().all(|p| t.upset().contains(p)) && !t.contains(&ua) && t.contains(u);
    if !ok {
        return Err(Error::Precondition("protected sites did not survive the construction".into()));
    }
    let (u_bar, special, fallback) = locate_u_bar(&t, u, a, n, inner, vd)?;
    let case = if o_inner {
        ModificationCase::III
    } else if special {
        ModificationCase::IISpecial
    } else {
        ModificationCase::II
    };
    Ok(Built {
        terrace: t,
        u_bar,
        case,
        axis: Some(a),
        protected,
        removed,
        fallback,
    })
}

/// Candidate `V_d` sites from a straight run `base + k e_i`, `0 ≤ k ≤ len`, or
/// from the rectangle below the first gap in that run.
fn run_candidates(
    t: &QTerrace,
    u: &Point,
    base: &Point,
    (i, j): (usize, usize),
    n: i32,
    len: i32,
    inner: &LatticeBox,
    vd: &VdLattice,
) -> Vec<Point> {
    let keep = |p: &Point| vd.contains(p) && inner.contains(p) && t.contains(p);
    if t.contains(&base.step(i, len)) {
        let run: Vec<Point> = (0..=len).map(|k| base.step(i, k)).collect();
        if run.iter().all(|p| t.contains(p)) {
            return run.into_iter().filter(keep).collect();
        }
        return Vec::new();
    }
    let Some(q) = (1..=len).find(|&q| !t.contains(&base.step(i, q))) else {
        return Vec::new();
    };
    let y1 = base.step(i, q).step(j, -1);
    let y0 = base.step(i, q - 1).step(j, -1);
    let y = if t.contains(&y1) {
        y1
    } else if t.contains(&y0) {
        y0
    } else {
        return Vec::new();
    };
    let Ok(path) = t.special_descending_path(inner, &y) else {
        return Vec::new();
    };
    let z = path.end().unwrap().clone();
    let Some(k) = (0..u.dim()).find(|&k| z.coord(k) == u.coord(k) - (n - 2)) else {
        return Vec::new();
    };
    (0..=len).map(|l| y.step(k, -l)).filter(keep).collect()
}

fn locate_u_bar(
    t: &QTerrace,
    u: &Point,
    a: usize,
    n: i32,
    inner: &LatticeBox,
    vd: &VdLattice,
) -> Result<(Point, bool, bool)> {
    let r = t.region();
    let d = r.dim();
    let mut best: Option<(Point, bool)> = None;
    let mut offer = |p: Point, special: bool| {
        if best.as_ref().map_or(true, |(b, _)| p < *b) {
            best = Some((p, special));
        }
    };
    for i in 0..d {
        for j in (0..d).filter(|&j| j != i && r.contains(&u.step(j, -1))) {
            if i != a {
                if r.contains(&u.step(i, n - 3)) {
                    for p in run_candidates(t, u, u, (i, j), n, n - 3, inner, vd) {
                        offer(p, false);
                    }
                }
            } else {
                let v = u.step(a, 1).step(j, -1);
                if t.contains(&v) && r.contains(&v.step(i, n - 4)) {
                    for p in run_candidates(t, u, &v, (i, j), n, n - 4, inner, vd) {
                        offer(p, true);
                    }
                }
            }
        }
    }
    if let Some((p, special)) = best {
        return Ok((p, special, false));
    }
    let o = Point::origin(d);
    inner
        .points()
        .find(|p| {
            vd.contains(p)
                && t.contains(p)
                && (o.le(p) || !t.is_h_index(r.index(p).unwrap()))
        })
        .map(|p| (p, false, true))
        .ok_or_else(|| Error::Precondition("no admissible V_d site in the inner window".into()))
}

fn terrace_checks(
    delta: &QTerrace,
    bar: &QTerrace,
    window: &LatticeBox,
    inner: &LatticeBox,
    s: &SiteMask,
    u_bar: &Point,
    vd: &VdLattice,
) -> Result<TerraceChecks> {
    let r = delta.region();
    let o = Point::origin(r.dim());
    let interior = window_interior(window, r)?;
    let outside = interior.complement();
    let same_off = |x: &SiteMask, y: &SiteMask| x.intersection(&outside) == y.intersection(&outside);
    let canonical = lambda_q(bar.upset()).map_or(false, |t| t.sites() == bar.sites());
    let ub = r.index(u_bar);
    let u_bar_admissible = ub.is_some_and(|i| {
        bar.sites().get(i) && vd.contains(u_bar) && inner.contains(u_bar) && (o.le(u_bar) || !bar.is_h_index(i))
    });
    Ok(TerraceChecks {
        canonical,
        agrees_off_window: same_off(bar.sites(), delta.sites()),
        upset_agrees_off_window: same_off(bar.upset(), delta.upset()),
        upset_shrinks: bar.upset().is_subset(delta.upset()),
        origin_in_upset: bar.upset().contains(&o),
        target_clear: bar.upset().intersection(s).is_empty(),
        u_bar_admissible,
    })
}

/// `f(p) = p (1 - (1 - p)^{d+1})`.
pub fn f_disturbance(p: f64, d: usize) -> Result<f64> {
    check_probability(p)?;
    Ok(p * (1.0 - (1.0 - p).powi(d as i32 + 1)))
}

/// Monte Carlo means of the pivotal counts off and on `V_d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RussoEstimate {
    pub p: f64,
    pub q: f64,
    pub trials: u64,
    /// `∂β/∂p ≈ E[#pivotal off V_d]`
    pub d_dp: f64,
    pub se_dp: f64,
    /// `∂β/∂q ≈ E[#pivotal on V_d]`
    pub d_dq: f64,
    pub se_dq: f64,
}

pub(crate) fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Pivotal-count estimates of the two partial derivatives of `β^N_M(p, q)`.
pub fn russo_estimates(spec: &ModelSpec, big_n: i32, m: i32, trials: u64, seed: u64) -> Result<RussoEstimate> {
    if trials == 0 {
        return Err(Error::Precondition("need at least one trial".into()));
    }
    if spec.kind == ModelKind::Slab || spec.kind == ModelKind::Orthant {
        return Err(Error::Precondition("pivotal counts need a half-orthant type model".into()));
    }
    let r = LatticeBox::cube(spec.dim, big_n)?;
    target_set(&r, m)?;
    let vd = VdLattice::new(spec.dim)?;
    let vd_mask = vd.mask(&r);
    let counts: Vec<(f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<(f64, f64)> {
            let env = EnvironmentField::new(*spec, r.clone(), trial_seed(seed, t))?;
            let cfg = env.configuration(&r)?;
            let piv = pivotal_indices(&cfg, m, PivotalMode::Fast)?;
            let on = piv.iter().filter(|&&i| vd_mask.get(i)).count();
            Ok(((piv.len() - on) as f64, on as f64))
        })
        .collect::<Result<_>>()?;
    let off: Vec<f64> = counts.iter().map(|c| c.0).collect();
    let on: Vec<f64> = counts.iter().map(|c| c.1).collect();
    let (d_dp, se_dp) = mean_se(&off);
    let (d_dq, se_dq) = mean_se(&on);
    Ok(RussoEstimate {
        p: spec.p,
        q: spec.q,
        trials,
        d_dp,
        se_dp,
        d_dq,
        se_dq,
    })
}

/// Per-layer terraces of a slab cluster and the clause checks.
#[derive(Debug, Clone)]
pub struct SlabTerraceReport {
    pub window: LatticeBox,
    /// `None` when the layer slice fills the window.
    pub layers: [Option<QTerrace>; 2],
    pub slices: [SiteMask; 2],
    pub clauses: SlabClauses,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlabClauses {
    /// Layer terraces inside the cluster.
    pub in_cluster: bool,
    /// Layer terraces inside `Ω_1`.
    pub in_omega1: bool,
    /// Each layer's up-set equals the cluster slice.
    pub upsets_match: bool,
    /// Layer-1 slice projects into the layer-2 slice.
    pub projection_ordered: bool,
    /// Layer-2 sites above the layer-1 slice projection are in `Ω_1`.
    pub gap_in_omega1: bool,
    /// Every layer-1 terrace site `z` has an `Ω_1` site among `(z, 2)` and `(z - e_j, 2)`.
    pub w_neighbourhood: bool,
    /// Some slice fills the window.
    pub degenerate: bool,
}

impl SlabClauses {
    pub fn all(&self) -> bool {
        self.in_cluster
            && self.in_omega1
            && self.upsets_match
            && self.projection_ordered
            && self.gap_in_omega1
            && self.w_neighbourhood
    }
}

/// Terraces `Λ^1, Λ^2` of the slab cluster of `x` inside `window × {1, 2}`.
pub fn slab_terraces(env: &EnvironmentField, window: &LatticeBox, x: &Point) -> Result<SlabTerraceReport> {
    let spec = env.spec();
    if spec.kind != ModelKind::Slab {
        return Err(Error::Precondition("slab terraces need a slab environment".into()));
    }
    let d = spec.dim;
    if window.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: window.dim(),
        });
    }
    let lift = |p: &Point, layer: i32| {
        let mut c = p.coords().to_vec();
        c.push(layer);
        Point::new(c)
    };
    let slab = LatticeBox::new(lift(window.lo(), 1), lift(window.hi(), 2))?;
    if !env.region().contains_box(&slab) {
        return Err(Error::NotSubBox);
    }
    let cfg = env.configuration(&slab)?;
    let cluster = crate::reachability::forward_cluster(&cfg, &slab, x)?;
    let slice = |layer: i32| SiteMask::from_fn(window, |i| cluster.contains(&lift(&window.point(i), layer)));
    let slices = [slice(1), slice(2)];
    let om = |p: &Point, layer: i32| env.omega1_at(lift(p, layer).coords());
    let mut layers: [Option<QTerrace>; 2] = [None, None];
    let mut clauses = SlabClauses {
        in_cluster: true,
        in_omega1: true,
        upsets_match: true,
        projection_ordered: slices[0].is_subset(&slices[1]),
        gap_in_omega1: slices[1].difference(&slices[0]).points().iter().all(|p| om(p, 2)),
        w_neighbourhood: true,
        degenerate: false,
    };
    for (k, s) in slices.iter().enumerate() {
        if s.is_full() {
            clauses.degenerate = true;
            continue;
        }
        let t = lambda_q(s)?;
        let layer = k as i32 + 1;
        clauses.in_cluster &= t.sites().is_subset(s);
        clauses.in_omega1 &= t.sites().points().iter().all(|p| om(p, layer));
        clauses.upsets_match &= s.is_empty() || t.sites().up_closure() == *s;
        if k == 0 {
            clauses.w_neighbourhood = t.sites().points().iter().all(|z| {
                om(z, 2) || (0..d).any(|j| window.contains(&z.step(j, -1)) && om(&z.step(j, -1), 2))
            });
        }
        layers[k] = Some(t);
    }
    Ok(SlabTerraceReport {
        window: window.clone(),
        layers,
        slices,
        clauses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_from(r: &LatticeBox, f: impl FnMut(usize) -> bool) -> Configuration {
        Configuration::half_orthant(SiteMask::from_fn(r, f))
    }

    #[test]
    fn extreme_configurations_have_no_pivotal_sites() {
        let r = LatticeBox::cube(2, 3).unwrap();
        for mode in [PivotalMode::Naive, PivotalMode::Fast] {
            assert!(pivotal_indices(&cfg_from(&r, |_| false), 1, mode).unwrap().is_empty());
            assert!(pivotal_indices(&cfg_from(&r, |_| true), 1, mode).unwrap().is_empty());
        }
    }

    #[test]
    fn fast_matches_naive_on_hashed_configurations() {
        let r = LatticeBox::cube(2, 3).unwrap();
        for seed in 0..300u64 {
            let p = [0.3, 0.5, 0.7][seed as usize % 3];
            let env = EnvironmentField::new(ModelSpec::half_orthant(2, p).unwrap(), r.clone(), seed).unwrap();
            let cfg = env.configuration(&r).unwrap();
            assert_eq!(
                pivotal_indices(&cfg, 2, PivotalMode::Naive).unwrap(),
                pivotal_indices(&cfg, 2, PivotalMode::Fast).unwrap(),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn single_blocking_site() {
        let r = LatticeBox::cube(2, 2).unwrap();
        let o = r.index(&Point::origin(2)).unwrap();
        let cfg = cfg_from(&r, |i| i != o);
        let expect = vec![
            r.index(&Point::from([-1, 0])).unwrap(),
            r.index(&Point::from([0, -1])).unwrap(),
        ];
        assert_eq!(pivotal_indices(&cfg, 1, PivotalMode::Fast).unwrap(), expect);
        let rep = find_pivotal(&cfg, 1, PivotalMode::Naive).unwrap();
        assert_eq!(rep.total(), 2);
        for site in &rep.sites {
            assert!(site.in_blocking_terrace);
            assert!(pivotal_corner_conditions(&cfg, &site.point).unwrap());
            assert!(site.connecting_path.consistent_with_config(&cfg.with_site(r.index(&site.point).unwrap(), false)));
        }
    }

    #[test]
    fn disturbance_values() {
        assert_eq!(f_disturbance(0.0, 2).unwrap(), 0.0);
        assert_eq!(f_disturbance(1.0, 2).unwrap(), 1.0);
        assert!((f_disturbance(0.5, 2).unwrap() - 0.4375).abs() < 1e-15);
        assert!(f_disturbance(1.5, 2).is_err());
    }

    #[test]
    fn modification_on_hashed_instances() {
        let r = LatticeBox::cube(2, 10).unwrap();
        let vd = VdLattice::new(2).unwrap();
        let mut done = 0;
        for seed in 0..400u64 {
            let env = EnvironmentField::new(ModelSpec::half_orthant(2, 0.55).unwrap(), r.clone(), seed).unwrap();
            let cfg = env.configuration(&r).unwrap();
            let piv = pivotal_indices(&cfg, 9, PivotalMode::Fast).unwrap();
            if let Some(&u) = piv.iter().find(|&&u| !vd.contains(&r.point(u))) {
                let cert = local_modify(&cfg, 9, &r.point(u), 8).unwrap();
                assert!(cert.verification.passed(), "seed {seed}: {cert:?}");
                done += 1;
            }
        }
        assert!(done > 10, "only {done} instances");
    }

    #[test]
    fn slab_extremes() {
        let win = LatticeBox::cube(2, 4).unwrap();
        let region = LatticeBox::new(Point::from([-5, -5, 1]), Point::from([4, 4, 2])).unwrap();
        let x = Point::from([0, 0, 1]);
        let full = EnvironmentField::new(ModelSpec::new(ModelKind::Slab, 2, 0.0, 0.0).unwrap(), region.clone(), 3).unwrap();
        let rep = slab_terraces(&full, &win, &x).unwrap();
        assert!(rep.clauses.degenerate && rep.layers.iter().all(Option::is_none));
        let plus = EnvironmentField::new(ModelSpec::new(ModelKind::Slab, 2, 1.0, 1.0).unwrap(), region, 3).unwrap();
        let rep = slab_terraces(&plus, &win, &x).unwrap();
        assert!(rep.clauses.all());
        let rays: Vec<Point> = win.points().filter(|p| p.coord(0).min(p.coord(1)) == 0 && p.coord(0) >= 0 && p.coord(1) >= 0).collect();
        for t in rep.layers.iter().flatten() {
            assert_eq!(t.sites().points(), rays);
        }
    }
}
