//! Local terraces: `λ^Q` extraction, corners, push-up, H-set deletion,
//! stabilization and the associated path constructions.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::environment::Configuration;
use crate::error::{Error, Result};
use crate::lattice::{on_relative_boundary, LatticeBox, Point, SiteMask};
use crate::reachability::{forward_cluster, LatticePath};

/// A canonical terrace `Δ = λ^R_G` together with its up-set `G = Δ_+ ∩ R`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QTerrace {
    upset: SiteMask,
    sites: SiteMask,
}

/// `λ^Q_G` as a mask: sites of `G` with a lower neighbour in `Q ∖ G`.
fn lambda_mask(g: &SiteMask) -> SiteMask {
    let r = g.region();
    SiteMask::from_fn(r, |i| {
        g.get(i) && (0..r.dim()).any(|a| r.below(i, a).is_some_and(|j| !g.get(j)))
    })
}

/// `λ^Q_G` of a `Q`-solid-above set.
pub fn lambda_q(g: &SiteMask) -> Result<QTerrace> {
    if !g.is_solid_above() {
        return Err(Error::NotSolidAbove);
    }
    Ok(QTerrace {
        sites: lambda_mask(g),
        upset: g.clone(),
    })
}

impl QTerrace {
    /// The up-set of the terrace `Δ ∩ R` when it has already been canonicalised.
    pub fn from_up_set(g: SiteMask) -> Result<Self> {
        lambda_q(&g)
    }

    pub fn region(&self) -> &LatticeBox {
        self.upset.region()
    }

    /// `G = Δ_+ ∩ R`.
    pub fn upset(&self) -> &SiteMask {
        &self.upset
    }

    /// `Δ`.
    pub fn sites(&self) -> &SiteMask {
        &self.sites
    }

    pub fn contains(&self, x: &Point) -> bool {
        self.sites.contains(x)
    }

    pub fn len(&self) -> usize {
        self.sites.count()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// `z ∈ G` with every `z - e_i` outside `G` (or outside the box).
    pub fn is_corner_index(&self, idx: usize) -> bool {
        let r = self.region();
        self.upset.get(idx) && (0..r.dim()).all(|a| r.below(idx, a).map_or(true, |j| !self.upset.get(j)))
    }

    /// `x ∈ Δ` with every `x + e_i` in `Δ` or outside the box.
    pub fn is_h_index(&self, idx: usize) -> bool {
        let r = self.region();
        self.sites.get(idx) && (0..r.dim()).all(|a| r.above(idx, a).map_or(true, |j| self.sites.get(j)))
    }

    pub fn corners(&self) -> CornerSet {
        let r = self.region();
        let mut corners = Vec::new();
        let mut h_set = Vec::new();
        for i in self.sites.iter() {
            if self.is_corner_index(i) {
                corners.push(r.point(i));
            }
            if self.is_h_index(i) {
                h_set.push(r.point(i));
            }
        }
        CornerSet { corners, h_set }
    }

    /// `Δ^R_{(↑z)} = λ^R_{G ∖ {z}}`.
    pub fn push_up(&self, z: &Point) -> Result<QTerrace> {
        let idx = self.region().index_checked(z)?;
        if !self.is_corner_index(idx) {
            return Err(Error::NotCorner(z.clone()));
        }
        let mut ed = TerraceEditor::new(self.clone());
        ed.remove(idx);
        Ok(ed.finish())
    }

    /// `Δ^{Q,A}`: push up every corner in `Q^{R:o} ∖ A`, smallest first.
    pub fn stabilize(&self, window: &LatticeBox, protected: &[Point]) -> Result<QTerrace> {
        let mut ed = TerraceEditor::new(self.clone());
        ed.stabilize(window, protected, |_| false)?;
        Ok(ed.finish())
    }

    /// Remove corners of `H^R` outside `keep_+` until `H^R ⊆ keep_+`.
    pub fn delete_h_corners(&self, keep: &Point, allowed: Option<&SiteMask>) -> Result<QTerrace> {
        let mut ed = TerraceEditor::new(self.clone());
        ed.delete_h_corners(keep, allowed, |_| false)?;
        Ok(ed.finish())
    }

    /// A path inside `Δ` from `x` to `y` whose increments are `e_i`, `-e_k` or `e_i - e_k`.
    pub fn terrace_path(&self, x: &Point, y: &Point) -> Result<LatticePath> {
        let r = self.region();
        for p in [x, y] {
            if !self.sites.contains(p) {
                return Err(Error::Precondition(format!("{p} is not a terrace site")));
            }
        }
        let in_g = |p: &Point| self.upset.contains(p);
        let mut z = x.clone();
        let mut points = vec![z.clone()];
        while z != *y {
            let inc = (0..r.dim()).find(|&a| z.coord(a) < y.coord(a));
            let dec = (0..r.dim()).find(|&a| z.coord(a) > y.coord(a));
            z = match (inc, dec) {
                (Some(i), None) => z.step(i, 1),
                (None, Some(k)) => z.step(k, -1),
                (Some(i), Some(k)) => {
                    let down = z.step(k, -1);
                    let diag = down.step(i, 1);
                    if in_g(&down) {
                        down
                    } else if in_g(&diag) {
                        diag
                    } else {
                        z.step(i, 1)
                    }
                }
                (None, None) => unreachable!(),
            };
            if !self.sites.contains(&z) {
                return Err(Error::Precondition(format!("path left the terrace at {z}")));
            }
            points.push(z.clone());
        }
        Ok(LatticePath { points })
    }

    /// A self-avoiding path in the box avoiding `Δ`, between two sites of
    /// `R ∖ G` (decrease first) or two sites of `G ∖ Δ` (increase first).
    pub fn complement_path(&self, x: &Point, y: &Point) -> Result<LatticePath> {
        let r = self.region();
        let ix = r.index_checked(x)?;
        let iy = r.index_checked(y)?;
        let below = !self.upset.get(ix) && !self.upset.get(iy);
        let between = self.upset.get(ix)
            && self.upset.get(iy)
            && !self.sites.get(ix)
            && !self.sites.get(iy);
        if !below && !between {
            return Err(Error::Precondition(
                "endpoints must both lie below the terrace or both strictly above it".into(),
            ));
        }
        let mut z = x.clone();
        let mut points = vec![z.clone()];
        let phases: [i32; 2] = if below { [-1, 1] } else { [1, -1] };
        for dir in phases {
            while let Some(a) = (0..r.dim()).find(|&a| (y.coord(a) - z.coord(a)).signum() == dir) {
                z = z.step(a, dir);
                if self.sites.contains(&z) {
                    return Err(Error::Precondition(format!("path met the terrace at {z}")));
                }
                points.push(z.clone());
            }
        }
        Ok(LatticePath { points })
    }

    /// Grouped `-e_1`, then `-e_2`, ... runs inside `Δ ∩ Q` from `x` to a site of
    /// `Δ ∩ ∂_R Q`. Fails with [`Error::InteriorCorner`] when the runs end at a
    /// corner of `Q^{R:o} ∩ x_-`.
    pub fn special_descending_path(&self, window: &LatticeBox, x: &Point) -> Result<LatticePath> {
        let r = self.region();
        if !r.contains_box(window) {
            return Err(Error::NotSubBox);
        }
        if !window.contains(x) || !self.sites.contains(x) {
            return Err(Error::Precondition(format!("{x} is not a terrace site of the window")));
        }
        let on_bd = |p: &Point| on_relative_boundary(window, r, window.index(p).unwrap());
        let mut z = x.clone();
        let mut points = vec![z.clone()];
        if on_bd(&z) {
            return Ok(LatticePath { points });
        }
        for a in 0..r.dim() {
            loop {
                let next = z.step(a, -1);
                if !window.contains(&next) || !self.sites.contains(&next) {
                    break;
                }
                z = next;
                points.push(z.clone());
                if on_bd(&z) {
                    return Ok(LatticePath { points });
                }
            }
        }
        Err(Error::InteriorCorner(z))
    }

    /// CSV with one `x1..xd` row per terrace site.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let d = self.region().dim();
        let cols: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        writeln!(w, "{}", cols.join(","))?;
        for p in self.sites.points() {
            let cs: Vec<String> = p.coords().iter().map(i32::to_string).collect();
            writeln!(w, "{}", cs.join(","))?;
        }
        Ok(())
    }
}

/// Corners and `H`-sites of a terrace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CornerSet {
    pub corners: Vec<Point>,
    pub h_set: Vec<Point>,
}

/// `R`-relative interior `Q^{R:o}` of a window, as a mask over `R`.
pub fn window_interior(window: &LatticeBox, r: &LatticeBox) -> Result<SiteMask> {
    if window.dim() != r.dim() {
        return Err(Error::DimensionMismatch {
            expected: r.dim(),
            found: window.dim(),
        });
    }
    if !r.contains_box(window) {
        return Err(Error::NotSubBox);
    }
    let mut m = SiteMask::empty(r);
    for (k, p) in window.points().enumerate() {
        if !on_relative_boundary(window, r, k) {
            m.insert(r.index(&p).unwrap());
        }
    }
    Ok(m)
}

/// Outcome of an editing pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Progress {
    pub removed: usize,
    /// The stop callback vetoed a removal.
    pub stopped: bool,
}

/// In-place editor for a terrace, recording every site removed from the up-set.
#[derive(Debug, Clone)]
pub struct TerraceEditor {
    t: QTerrace,
    history: Vec<Point>,
}

impl TerraceEditor {
    pub fn new(t: QTerrace) -> Self {
        TerraceEditor { t, history: Vec::new() }
    }

    pub fn terrace(&self) -> &QTerrace {
        &self.t
    }

    /// Sites removed from the up-set so far, in order.
    pub fn history(&self) -> &[Point] {
        &self.history
    }

    pub fn finish(self) -> QTerrace {
        self.t
    }

    /// Remove a corner of `G`; `Δ` gains the upper neighbours of `idx`.
    fn remove(&mut self, idx: usize) {
        debug_assert!(self.t.is_corner_index(idx));
        let r = self.t.upset.region().clone();
        self.t.upset.remove(idx);
        self.t.sites.remove(idx);
        for a in 0..r.dim() {
            if let Some(j) = r.above(idx, a) {
                self.t.sites.insert(j);
            }
        }
        self.history.push(r.point(idx));
    }

    /// Push up corners in `Q^{R:o} ∖ A` until none remain. `stop` is consulted
    /// before each push; returning `true` leaves the terrace as it is.
    pub fn stabilize(
        &mut self,
        window: &LatticeBox,
        protected: &[Point],
        mut stop: impl FnMut(&Point) -> bool,
    ) -> Result<Progress> {
        let r = self.t.region().clone();
        if self.t.upset.is_empty() || self.t.upset.is_full() {
            return Err(Error::DegenerateUpSet);
        }
        let interior = window_interior(window, &r)?;
        let mut prot = SiteMask::empty(&r);
        for a in protected {
            match r.index(a) {
                Some(i) if self.t.upset.get(i) => prot.insert(i),
                _ => return Err(Error::ProtectedOutsideUpSet),
            }
        }
        let eligible = interior.difference(&prot);
        let mut queue: BTreeSet<usize> = eligible.iter().filter(|&i| self.t.is_corner_index(i)).collect();
        let mut progress = Progress::default();
        while let Some(z) = queue.pop_first() {
            if !self.t.is_corner_index(z) {
                continue;
            }
            if stop(&r.point(z)) {
                progress.stopped = true;
                return Ok(progress);
            }
            self.remove(z);
            progress.removed += 1;
            for a in 0..r.dim() {
                if let Some(j) = r.above(z, a) {
                    if eligible.get(j) && self.t.is_corner_index(j) {
                        queue.insert(j);
                    }
                }
            }
        }
        Ok(progress)
    }

    /// Delete corners of `H^R ∖ keep_+` found by descending through `H^R`.
    /// Every deleted corner must lie in `allowed` when given.
    pub fn delete_h_corners(
        &mut self,
        keep: &Point,
        allowed: Option<&SiteMask>,
        mut stop: impl FnMut(&Point) -> bool,
    ) -> Result<Progress> {
        let r = self.t.region().clone();
        keep.check_dim(r.dim())?;
        let outside_keep = |i: usize| !keep.le(&r.point(i));
        let targets: Vec<usize> = self
            .t
            .sites
            .iter()
            .filter(|&i| self.t.is_h_index(i) && outside_keep(i))
            .collect();
        let mut progress = Progress::default();
        for x in targets {
            while self.t.is_h_index(x) {
                let mut z = x;
                while !self.t.is_corner_index(z) {
                    z = (0..r.dim())
                        .filter_map(|a| r.below(z, a))
                        .find(|&j| self.t.is_h_index(j))
                        .ok_or_else(|| {
                            Error::Precondition(format!("H-descent stuck at {}", r.point(z)))
                        })?;
                }
                if allowed.is_some_and(|m| !m.get(z)) {
                    return Err(Error::Precondition(format!(
                        "H-corner {} outside the permitted window",
                        r.point(z)
                    )));
                }
                if stop(&r.point(z)) {
                    progress.stopped = true;
                    return Ok(progress);
                }
                self.remove(z);
                progress.removed += 1;
            }
        }
        Ok(progress)
    }
}

/// Result of extracting the terrace of a forward cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Extraction {
    /// The cluster contains the lower corner of the box, hence all of it.
    FillsBox,
    Terrace(QTerrace),
}

impl Extraction {
    pub fn terrace(&self) -> Option<&QTerrace> {
        match self {
            Extraction::FillsBox => None,
            Extraction::Terrace(t) => Some(t),
        }
    }
}

/// `λ^Q` of `C^Q_x`, or [`Extraction::FillsBox`].
pub fn extract_terrace(cfg: &Configuration, q: &LatticeBox, x: &Point) -> Result<Extraction> {
    let cluster = forward_cluster(cfg, q, x)?;
    if cluster.get(0) {
        return Ok(Extraction::FillsBox);
    }
    Ok(Extraction::Terrace(lambda_q(&cluster)?))
}

/// Which branch of the cluster trichotomy an extraction falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trichotomy {
    NoHSites,
    HAboveSource,
    FillsBox,
}

/// Classify an extraction from source `x`; `None` when no branch applies.
pub fn trichotomy(e: &Extraction, x: &Point) -> Option<Trichotomy> {
    match e {
        Extraction::FillsBox => Some(Trichotomy::FillsBox),
        Extraction::Terrace(t) => {
            let h = t.corners().h_set;
            if h.is_empty() {
                Some(Trichotomy::NoHSites)
            } else if t.contains(x) && h.iter().all(|y| x.le(y)) {
                Some(Trichotomy::HAboveSource)
            } else {
                None
            }
        }
    }
}

/// ASCII PLY point cloud of the terrace sites (`d = 3`).
pub fn write_ply(e: &Extraction, mut w: impl Write) -> Result<()> {
    let (status, pts) = match e {
        Extraction::FillsBox => ("fills_box", Vec::new()),
        Extraction::Terrace(t) => {
            if t.region().dim() != 3 {
                return Err(Error::DimensionMismatch {
                    expected: 3,
                    found: t.region().dim(),
                });
            }
            ("terrace", t.sites().points())
        }
    };
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "comment status {status}")?;
    writeln!(w, "element vertex {}", pts.len())?;
    for c in ["x", "y", "z"] {
        writeln!(w, "property int {c}")?;
    }
    writeln!(w, "end_header")?;
    for p in pts {
        writeln!(w, "{} {} {}", p.coord(0), p.coord(1), p.coord(2))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::up_set_closure;

    fn bx(lo: &[i32], hi: &[i32]) -> LatticeBox {
        LatticeBox::new(Point::new(lo.to_vec()), Point::new(hi.to_vec())).unwrap()
    }

    fn pts(v: &[[i32; 2]]) -> Vec<Point> {
        v.iter().map(|&p| Point::from(p)).collect()
    }

    fn sorted(mut v: Vec<Point>) -> Vec<Point> {
        v.sort();
        v
    }

    #[test]
    fn lambda_examples() {
        let q = bx(&[0, 0], &[2, 2]);
        assert!(lambda_q(&SiteMask::full(&q)).unwrap().is_empty());
        let b = Point::from([2, 2]);
        let t = lambda_q(&SiteMask::from_points(&q, [&b]).unwrap()).unwrap();
        assert_eq!(t.sites().points(), vec![b]);
        let g = up_set_closure(&pts(&[[2, 0], [0, 2]]), &q).unwrap();
        assert_eq!(
            lambda_q(&g).unwrap().sites().points(),
            pts(&[[0, 2], [1, 2], [2, 0], [2, 1]])
        );
        let bad = SiteMask::from_points(&q, [&Point::from([1, 1])]).unwrap();
        assert!(matches!(lambda_q(&bad), Err(Error::NotSolidAbove)));
    }

    #[test]
    fn corner_and_push_examples() {
        let q = bx(&[0, 0], &[2, 2]);
        let g = up_set_closure(&pts(&[[0, 1], [1, 0]]), &q).unwrap();
        let t = lambda_q(&g).unwrap();
        assert_eq!(t.corners().corners, pts(&[[0, 1], [1, 0]]));
        let pushed = t.push_up(&Point::from([1, 0])).unwrap();
        assert_eq!(pushed.sites().points(), pts(&[[0, 1], [1, 1], [2, 0]]));
        assert_eq!(pushed.upset().count(), g.count() - 1);
        assert!(matches!(t.push_up(&Point::from([1, 1])), Err(Error::NotCorner(_))));
    }

    #[test]
    fn figure_two_profile() {
        let q = bx(&[0, -1], &[5, 3]);
        let before = pts(&[[0, 3], [1, 3], [2, 2], [2, 1], [3, 1], [4, 0], [5, 0]]);
        let t = lambda_q(&up_set_closure(&before, &q).unwrap()).unwrap();
        assert_eq!(sorted(t.sites().points()), sorted(before));
        let cs = t.corners();
        let x = Point::from([2, 1]);
        let z = Point::from([4, 0]);
        assert!(cs.corners.contains(&x) && cs.corners.contains(&z));
        assert!(cs.h_set.contains(&x));
        let after = t.push_up(&x).unwrap().push_up(&z).unwrap();
        assert_eq!(
            sorted(after.sites().points()),
            sorted(pts(&[[0, 3], [1, 3], [2, 2], [3, 1], [4, 1], [5, 0]]))
        );
    }

    #[test]
    fn stabilize_trivial_cases() {
        let r = bx(&[0, 0], &[6, 6]);
        let g = up_set_closure(&pts(&[[0, 4], [2, 2], [4, 0]]), &r).unwrap();
        let t = lambda_q(&g).unwrap();
        let w = bx(&[1, 1], &[5, 5]);
        let all: Vec<Point> = window_interior(&w, &r)
            .unwrap()
            .intersection(&g)
            .points();
        assert_eq!(t.stabilize(&w, &all).unwrap(), t);
        let s = t.stabilize(&w, &[]).unwrap();
        let interior = window_interior(&w, &r).unwrap();
        assert!(s.corners().corners.iter().all(|c| !interior.contains(c)));
        assert!(matches!(
            t.stabilize(&w, &[Point::from([0, 0])]),
            Err(Error::ProtectedOutsideUpSet)
        ));
        let full = lambda_q(&SiteMask::full(&r)).unwrap();
        assert!(matches!(full.stabilize(&w, &[]), Err(Error::DegenerateUpSet)));
    }

    #[test]
    fn h_corner_deletion() {
        let r = bx(&[0, 0], &[4, 4]);
        let g = up_set_closure(&pts(&[[0, 3], [1, 1], [3, 0]]), &r).unwrap();
        let t = lambda_q(&g).unwrap();
        let h = t.corners().h_set;
        let keep = Point::from([0, 0]);
        assert_eq!(t.delete_h_corners(&Point::from([0, 0]), None).unwrap(), t);
        let out = t.delete_h_corners(&Point::from([4, 4]), None).unwrap();
        assert!(out.corners().h_set.iter().all(|y| Point::from([4, 4]).le(y)));
        assert!(!h.is_empty() && keep.le(&h[0]));
    }

    #[test]
    fn paths_on_staircase() {
        let r = bx(&[0, 0], &[5, 5]);
        let g = up_set_closure(&pts(&[[0, 4], [2, 2], [4, 0]]), &r).unwrap();
        let t = lambda_q(&g).unwrap();
        let x = Point::from([0, 4]);
        let y = Point::from([4, 0]);
        let p = t.terrace_path(&x, &y).unwrap();
        assert_eq!(p.start(), Some(&x));
        assert_eq!(p.end(), Some(&y));
        let up = t.terrace_path(&Point::from([2, 2]), &Point::from([2, 3])).unwrap();
        assert_eq!(up.len(), 2);
        let c = t.complement_path(&Point::from([1, 1]), &Point::from([0, 0])).unwrap();
        assert!(c.is_nearest_neighbour() && c.is_self_avoiding());
        let c = t.complement_path(&Point::from([5, 5]), &Point::from([3, 3])).unwrap();
        assert!(c.points.iter().all(|p| !t.contains(p)));
        assert!(t.complement_path(&Point::from([0, 0]), &Point::from([5, 5])).is_err());
    }

    #[test]
    fn descending_path_examples() {
        let r = bx(&[0, 0], &[8, 8]);
        let g = up_set_closure(&pts(&[[0, 6], [6, 0]]), &r).unwrap();
        let t = lambda_q(&g).unwrap();
        let w = bx(&[2, 2], &[8, 8]);
        let start = Point::from([6, 5]);
        let p = t.special_descending_path(&w, &start).unwrap();
        assert_eq!(p.end(), Some(&Point::from([6, 2])));
        assert!(p.increments().iter().all(|s| *s == Point::from([0, -1])));
        let bd = Point::from([6, 2]);
        assert_eq!(t.special_descending_path(&w, &bd).unwrap().points, vec![bd]);
        let g = up_set_closure(&pts(&[[4, 4]]), &r).unwrap();
        let t = lambda_q(&g).unwrap();
        assert!(matches!(
            t.special_descending_path(&w, &Point::from([4, 6])),
            Err(Error::InteriorCorner(_))
        ));
    }

    #[test]
    fn ply_layout() {
        let q = LatticeBox::cube(3, 1).unwrap();
        let b = Point::from([1, 1, 1]);
        let t = lambda_q(&SiteMask::from_points(&q, [&b]).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_ply(&Extraction::Terrace(t), &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("ply\nformat ascii 1.0\n"));
        assert!(s.contains("element vertex 1\n") && s.ends_with("end_header\n1 1 1\n"));
        let mut buf = Vec::new();
        write_ply(&Extraction::FillsBox, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("element vertex 0\n"));
    }
}
