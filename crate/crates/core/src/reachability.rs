//! Forward clusters inside boxes and explicit path constructions.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::environment::{Configuration, EnvironmentField};
use crate::error::{Error, Result};
use crate::lattice::{LatticeBox, Point, SiteMask};

/// A finite lattice path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticePath {
    pub points: Vec<Point>,
}

impl LatticePath {
    pub fn single(x: Point) -> Self {
        LatticePath { points: vec![x] }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start(&self) -> Option<&Point> {
        self.points.first()
    }

    pub fn end(&self) -> Option<&Point> {
        self.points.last()
    }

    pub fn increments(&self) -> Vec<Point> {
        self.points.windows(2).map(|w| w[1].sub(&w[0])).collect()
    }

    /// Every increment is `±e_i`.
    pub fn is_nearest_neighbour(&self) -> bool {
        self.increments().iter().all(|s| s.l1_dist(&Point::origin(s.dim())) == 1)
    }

    pub fn is_self_avoiding(&self) -> bool {
        let mut seen: Vec<&Point> = self.points.iter().collect();
        seen.sort();
        seen.windows(2).all(|w| w[0] != w[1])
    }

    /// Every step is an arrow of the environment (`+e_i ∈ G_x` or `-e_i ∈ G_x`).
    pub fn consistent_with(&self, env: &EnvironmentField) -> bool {
        self.points.windows(2).all(|w| {
            let s = w[1].sub(&w[0]);
            let steps = env.steps_at(w[0].coords());
            let total: i64 = s.coords().iter().map(|&c| i64::from(c)).sum();
            s.l1_dist(&Point::origin(s.dim())) == 1
                && if total > 0 {
                    steps.has_plus()
                } else {
                    steps.has_minus()
                }
        })
    }

    /// Every step is an arrow of `cfg` between sites of its box.
    pub fn consistent_with_config(&self, cfg: &Configuration) -> bool {
        let r = cfg.region();
        self.points.windows(2).all(|w| {
            let (Some(i), Some(j)) = (r.index(&w[0]), r.index(&w[1])) else {
                return false;
            };
            let mut hit = false;
            for_each_arrow(cfg, i, |k| hit |= k == j);
            hit
        })
    }

    /// CSV with a `# model=... seed=...` comment line and `step,x1..xd` rows.
    pub fn write_csv(&self, model: &str, seed: u64, mut w: impl Write) -> Result<()> {
        let d = self.points.first().map_or(0, Point::dim);
        writeln!(w, "# model={model} seed={seed}")?;
        let cols: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        writeln!(w, "step,{}", cols.join(","))?;
        for (k, p) in self.points.iter().enumerate() {
            let cs: Vec<String> = p.coords().iter().map(i32::to_string).collect();
            writeln!(w, "{k},{}", cs.join(","))?;
        }
        Ok(())
    }
}

/// Calls `f` on the targets of the arrows leaving `idx`, in increasing
/// lexicographic order of the target point.
#[inline]
pub(crate) fn for_each_arrow(cfg: &Configuration, idx: usize, mut f: impl FnMut(usize)) {
    let r = cfg.region();
    let d = r.dim();
    let steps = cfg.steps(idx);
    if steps.has_minus() {
        for a in 0..d {
            if let Some(j) = r.below(idx, a) {
                f(j);
            }
        }
    }
    if steps.has_plus() {
        for a in (0..d).rev() {
            if let Some(j) = r.above(idx, a) {
                f(j);
            }
        }
    }
}

/// Reusable BFS state with epoch-stamped visitation.
#[derive(Debug, Default, Clone)]
pub struct Search {
    stamp: Vec<u32>,
    epoch: u32,
    queue: VecDeque<usize>,
}

impl Search {
    pub fn new() -> Self {
        Self::default()
    }

    fn reset(&mut self, n: usize) {
        if self.stamp.len() != n || self.epoch == u32::MAX {
            self.stamp = vec![0; n];
            self.epoch = 0;
        }
        self.epoch += 1;
        self.queue.clear();
    }

    #[inline]
    fn visit(&mut self, i: usize) -> bool {
        if self.stamp[i] == self.epoch {
            false
        } else {
            self.stamp[i] = self.epoch;
            true
        }
    }

    /// Whether the last search reached `i`.
    #[inline]
    pub fn reached(&self, i: usize) -> bool {
        self.stamp.get(i).is_some_and(|&s| s == self.epoch)
    }

    /// Forward BFS from `start`; stops early at the first site of `target`.
    pub fn reaches(&mut self, cfg: &Configuration, start: usize, target: &SiteMask) -> bool {
        self.reset(cfg.region().len());
        self.visit(start);
        self.queue.push_back(start);
        while let Some(x) = self.queue.pop_front() {
            if target.get(x) {
                return true;
            }
            let mut next = [usize::MAX; 2 * crate::lattice::MAX_DIM];
            let mut n = 0;
            for_each_arrow(cfg, x, |y| {
                next[n] = y;
                n += 1;
            });
            for &y in &next[..n] {
                if self.visit(y) {
                    self.queue.push_back(y);
                }
            }
        }
        false
    }

    /// Full forward cluster of `start` as a mask over the configuration's box.
    pub fn cluster(&mut self, cfg: &Configuration, start: usize) -> SiteMask {
        let empty = SiteMask::empty(cfg.region());
        self.reaches(cfg, start, &empty);
        SiteMask::from_fn(cfg.region(), |i| self.reached(i))
    }
}

fn check_point(q: &LatticeBox, x: &Point) -> Result<usize> {
    q.index_checked(x)
}

fn local_config(cfg: &Configuration, q: &LatticeBox) -> Result<Configuration> {
    if q == cfg.region() {
        Ok(cfg.clone())
    } else {
        cfg.restrict(q)
    }
}

/// `C^Q_x`: the sites reachable from `x` along arrows that begin and end in `Q`.
pub fn forward_cluster(cfg: &Configuration, q: &LatticeBox, x: &Point) -> Result<SiteMask> {
    let local = local_config(cfg, q)?;
    let start = check_point(q, x)?;
    Ok(Search::new().cluster(&local, start))
}

/// The sites of the configuration's box that can reach `target`.
pub fn backward_reach(cfg: &Configuration, target: &SiteMask) -> SiteMask {
    let r = cfg.region();
    let d = r.dim();
    let mut seen = target.clone();
    let mut queue: VecDeque<usize> = target.iter().collect();
    while let Some(y) = queue.pop_front() {
        for a in 0..d {
            if let Some(z) = r.below(y, a) {
                if !seen.get(z) && cfg.steps(z).has_plus() {
                    seen.insert(z);
                    queue.push_back(z);
                }
            }
            if let Some(z) = r.above(y, a) {
                if !seen.get(z) && cfg.steps(z).has_minus() {
                    seen.insert(z);
                    queue.push_back(z);
                }
            }
        }
    }
    seen
}

/// Whether `C^R_x` meets `target_- ∩ R`; on success returns a witness path.
pub fn connects_to_down_set(
    cfg: &Configuration,
    r: &LatticeBox,
    x: &Point,
    target: &Point,
) -> Result<Option<LatticePath>> {
    let local = local_config(cfg, r)?;
    let start = check_point(r, x)?;
    target.check_dim(r.dim())?;
    let mut parent = vec![usize::MAX; r.len()];
    parent[start] = start;
    let mut queue = VecDeque::from([start]);
    while let Some(y) = queue.pop_front() {
        if r.point(y).le(target) {
            let mut rev = vec![y];
            let mut cur = y;
            while cur != start {
                cur = parent[cur];
                rev.push(cur);
            }
            rev.reverse();
            return Ok(Some(LatticePath {
                points: rev.into_iter().map(|i| r.point(i)).collect(),
            }));
        }
        for_each_arrow(&local, y, |z| {
            if parent[z] == usize::MAX {
                parent[z] = y;
                queue.push_back(z);
            }
        });
    }
    Ok(None)
}

/// `L^{(i)}_x` for one axis-parallel line of a box.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LValueRecord {
    /// The point of the line whose `axis` coordinate equals the source's.
    pub base: Point,
    pub axis: usize,
    /// `None` when the line misses the cluster inside the box.
    pub value: Option<i32>,
}

/// L-values of `C^Q_source` along every `axis`-line meeting `Q`.
pub fn l_values(
    cfg: &Configuration,
    q: &LatticeBox,
    source: &Point,
    axis: usize,
) -> Result<Vec<LValueRecord>> {
    if axis >= q.dim() {
        return Err(Error::Precondition(format!("axis {axis} out of range")));
    }
    let cluster = forward_cluster(cfg, q, source)?;
    let s = source.coord(axis);
    let lo = q.lo().coord(axis);
    let side = q.side(axis);
    let stride = q.stride(axis);
    let mut out = Vec::new();
    for idx in 0..q.len() {
        if q.offset(idx, axis) != 0 {
            continue;
        }
        let value = (0..side)
            .find(|&k| cluster.get(idx + k * stride))
            .map(|k| lo + k as i32 - s);
        let mut base = q.point(idx).coords().to_vec();
        base[axis] = s;
        out.push(LValueRecord {
            base: Point::new(base),
            axis,
            value,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathVariant {
    /// `-e_i` whenever possible, otherwise `+e_j`.
    Wn,
    /// `-e_j` whenever possible, otherwise `+e_i`.
    Se,
}

pub const DEFAULT_STEP_BUDGET: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathOutcome {
    pub path: LatticePath,
    /// `false` when the step budget ran out before the stop predicate held.
    pub completed: bool,
}

/// Greedy Wn/Se path in the coordinate plane `(i, j)` of the unbounded field.
pub fn wn_se_path(
    env: &EnvironmentField,
    start: &Point,
    plane: (usize, usize),
    variant: PathVariant,
    mut stop: impl FnMut(&Point) -> bool,
    budget: usize,
) -> Result<PathOutcome> {
    let (i, j) = plane;
    let d = env.spec().lattice_dim();
    start.check_dim(d)?;
    if i == j || i >= d || j >= d {
        return Err(Error::Precondition(format!("invalid plane ({i},{j})")));
    }
    let (down, up) = match variant {
        PathVariant::Wn => (i, j),
        PathVariant::Se => (j, i),
    };
    let mut cur = start.clone();
    let mut points = vec![cur.clone()];
    for _ in 0..budget {
        if stop(&cur) {
            return Ok(PathOutcome {
                path: LatticePath { points },
                completed: true,
            });
        }
        let steps = env.steps_at(cur.coords());
        cur = if steps.has_minus() {
            cur.step(down, -1)
        } else {
            cur.step(up, 1)
        };
        points.push(cur.clone());
    }
    let completed = stop(&cur);
    Ok(PathOutcome {
        path: LatticePath { points },
        completed,
    })
}

/// Result of the staged line-hitting construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineHit {
    /// `v + k e_j`, a point of `C_u`.
    pub point: Point,
    pub k: i64,
    pub path: LatticePath,
}

/// From `u`, match the coordinates `m ≠ j` of `v` one at a time by Wn paths
/// (to decrease coordinate `m`) or Se paths (to increase it) in the plane
/// `(m, j)`, ending at a point `v + k e_j` of the forward cluster of `u`.
pub fn line_hit(
    env: &EnvironmentField,
    u: &Point,
    v: &Point,
    j: usize,
    budget: usize,
) -> Result<LineHit> {
    let d = env.spec().lattice_dim();
    u.check_dim(d)?;
    v.check_dim(d)?;
    if j >= d {
        return Err(Error::Precondition(format!("axis {j} out of range")));
    }
    let mut points = vec![u.clone()];
    let mut cur = u.clone();
    let mut left = budget;
    for m in (0..d).filter(|&m| m != j) {
        let goal = v.coord(m);
        let variant = if goal < cur.coord(m) {
            PathVariant::Wn
        } else {
            PathVariant::Se
        };
        let out = wn_se_path(env, &cur, (m, j), variant, |p| p.coord(m) == goal, left)?;
        left -= out.path.len() - 1;
        if !out.completed {
            return Err(Error::Precondition("step budget exhausted".into()));
        }
        points.extend(out.path.points.into_iter().skip(1));
        cur = points.last().unwrap().clone();
    }
    let k = i64::from(cur.coord(j)) - i64::from(v.coord(j));
    Ok(LineHit {
        point: cur,
        k,
        path: LatticePath { points },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::ModelSpec;

    fn bx(lo: &[i32], hi: &[i32]) -> LatticeBox {
        LatticeBox::new(Point::new(lo.to_vec()), Point::new(hi.to_vec())).unwrap()
    }

    fn uniform_cfg(q: &LatticeBox, omega1: bool) -> Configuration {
        let m = if omega1 {
            SiteMask::full(q)
        } else {
            SiteMask::empty(q)
        };
        Configuration::half_orthant(m)
    }

    #[test]
    fn cluster_extremes() {
        let q = bx(&[0, 0], &[3, 4]);
        let x = Point::from([1, 2]);
        assert!(forward_cluster(&uniform_cfg(&q, false), &q, &x).unwrap().is_full());
        let c = forward_cluster(&uniform_cfg(&q, true), &q, &x).unwrap();
        assert_eq!(c, crate::lattice::up_cone(&x, &q).unwrap());
        let small = bx(&[0, 0], &[1, 1]);
        let c = forward_cluster(&uniform_cfg(&small, true), &small, &Point::from([1, 1])).unwrap();
        assert_eq!(c.points(), vec![Point::from([1, 1])]);
        assert!(forward_cluster(&uniform_cfg(&q, true), &q, &Point::from([9, 9])).is_err());
    }

    #[test]
    fn cluster_in_sub_box_never_leaves_it() {
        let r = bx(&[0, 0], &[4, 4]);
        let q = bx(&[1, 1], &[3, 3]);
        let c = forward_cluster(&uniform_cfg(&r, false), &q, &Point::from([2, 2])).unwrap();
        assert_eq!(c.region(), &q);
        assert!(c.is_full());
    }

    #[test]
    fn down_set_connection_examples() {
        let q = bx(&[-2, -2], &[2, 2]);
        let x = Point::from([1, 1]);
        let plus = uniform_cfg(&q, true);
        let w = connects_to_down_set(&plus, &q, &x, &x).unwrap().unwrap();
        assert_eq!(w.points, vec![x.clone()]);
        assert!(connects_to_down_set(&plus, &q, &x, &Point::from([0, 5])).unwrap().is_none());
        let all = uniform_cfg(&q, false);
        let w = connects_to_down_set(&all, &q, &x, &Point::from([-1, -2])).unwrap().unwrap();
        assert!(w.is_nearest_neighbour() && w.is_self_avoiding());
        assert!(w.end().unwrap().le(&Point::from([-1, -2])));
    }

    #[test]
    fn l_values_examples() {
        let q = bx(&[-3, -3], &[3, 3]);
        let src = Point::from([0, 1]);
        let all = l_values(&uniform_cfg(&q, false), &q, &src, 1).unwrap();
        assert_eq!(all.len(), 7);
        assert!(all.iter().all(|r| r.value == Some(-3 - 1)));
        let plus = l_values(&uniform_cfg(&q, true), &q, &src, 1).unwrap();
        for r in plus {
            let expect = (r.base.coord(0) >= 0).then_some(0);
            assert_eq!(r.value, expect);
        }
    }

    #[test]
    fn wn_paths_in_uniform_fields() {
        let region = LatticeBox::cube(2, 10).unwrap();
        let o = Point::origin(2);
        let all = EnvironmentField::new(ModelSpec::half_orthant(2, 0.0).unwrap(), region.clone(), 1).unwrap();
        let out = wn_se_path(&all, &o, (0, 1), PathVariant::Wn, |p| p.coord(0) == -5, 100).unwrap();
        assert!(out.completed);
        assert!(out.path.increments().iter().all(|s| *s == Point::from([-1, 0])));
        let plus = EnvironmentField::new(ModelSpec::half_orthant(2, 1.0).unwrap(), region, 1).unwrap();
        let out = wn_se_path(&plus, &o, (0, 1), PathVariant::Wn, |p| p.coord(1) == 5, 100).unwrap();
        assert!(out.completed);
        assert!(out.path.increments().iter().all(|s| *s == Point::from([0, 1])));
        let out = wn_se_path(&plus, &o, (0, 1), PathVariant::Wn, |p| p.coord(0) == -1, 50).unwrap();
        assert!(!out.completed);
        assert_eq!(out.path.len(), 51);
    }

    #[test]
    fn line_hit_with_u_below_v() {
        let region = LatticeBox::cube(3, 10).unwrap();
        for seed in 0..50u64 {
            let env = EnvironmentField::new(ModelSpec::half_orthant(3, 0.5).unwrap(), region.clone(), seed).unwrap();
            let u = Point::from([-2, 0, 1]);
            let v = Point::from([3, 2, 4]);
            let hit = line_hit(&env, &u, &v, 2, DEFAULT_STEP_BUDGET).unwrap();
            assert!(hit.k <= 0);
            assert!(hit.point.coord(2) <= u.coord(2));
            assert_eq!(hit.point, v.step(2, hit.k as i32));
            assert!(hit.path.consistent_with(&env));
        }
    }

    #[test]
    fn path_csv_layout() {
        let p = LatticePath {
            points: vec![Point::from([0, 0]), Point::from([1, 0])],
        };
        let mut buf = Vec::new();
        p.write_csv("half", 7, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "# model=half seed=7\nstep,x1,x2\n0,0,0\n1,1,0\n"
        );
    }
}
