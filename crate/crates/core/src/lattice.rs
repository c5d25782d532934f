//! Integer lattice geometry in dimension `2 <= d <= 16`.
//!
//! Boxes are stored with both corners and index their sites row-major with
//! the first coordinate most significant, so increasing linear index is the
//! lexicographic order on points and `x - e_i` always has a smaller index
//! than `x`. [`SiteMask`] is a one-bit-per-site set over a box.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 16;

/// A lattice site `z ∈ Z^d`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point(Vec<i32>);

impl Point {
    pub fn new(coords: Vec<i32>) -> Self {
        Point(coords)
    }

    pub fn origin(d: usize) -> Self {
        Point(vec![0; d])
    }

    /// `k·1`, the diagonal point with every coordinate equal to `k`.
    pub fn diagonal(d: usize, k: i32) -> Self {
        Point(vec![k; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[i32] {
        &self.0
    }

    pub fn coord(&self, i: usize) -> i32 {
        self.0[i]
    }

    /// `self + k·e_axis`.
    pub fn step(&self, axis: usize, k: i32) -> Point {
        let mut c = self.0.clone();
        c[axis] += k;
        Point(c)
    }

    pub fn add(&self, other: &Point) -> Point {
        Point(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Point) -> Point {
        Point(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// Componentwise `self <= other`, i.e. `other ∈ self_+`.
    pub fn le(&self, other: &Point) -> bool {
        self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }

    pub fn l1_dist(&self, other: &Point) -> i64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (i64::from(*a) - i64::from(*b)).abs())
            .sum()
    }

    pub fn linf_dist(&self, other: &Point) -> i64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (i64::from(*a) - i64::from(*b)).abs())
            .max()
            .unwrap_or(0)
    }

    pub(crate) fn check_dim(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: self.dim(),
            });
        }
        Ok(())
    }
}

impl From<Vec<i32>> for Point {
    fn from(v: Vec<i32>) -> Self {
        Point(v)
    }
}

impl<const N: usize> From<[i32; N]> for Point {
    fn from(v: [i32; N]) -> Self {
        Point(v.to_vec())
    }
}

impl fmt::Debug for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, c) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// The box `[lo, hi] = {z : lo ≤ z ≤ hi}`; never empty.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BoxCorners", into = "BoxCorners")]
pub struct LatticeBox {
    lo: Point,
    hi: Point,
    sides: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct BoxCorners {
    lo: Point,
    hi: Point,
}

impl TryFrom<BoxCorners> for LatticeBox {
    type Error = Error;
    fn try_from(c: BoxCorners) -> Result<Self> {
        LatticeBox::new(c.lo, c.hi)
    }
}

impl From<LatticeBox> for BoxCorners {
    fn from(b: LatticeBox) -> Self {
        BoxCorners { lo: b.lo, hi: b.hi }
    }
}

impl fmt::Debug for LatticeBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

impl LatticeBox {
    pub fn new(lo: Point, hi: Point) -> Result<Self> {
        let d = lo.dim();
        if !(2..=MAX_DIM).contains(&d) {
            return Err(Error::UnsupportedDimension(d));
        }
        hi.check_dim(d)?;
        if !lo.le(&hi) {
            return Err(Error::InvalidBox(format!("{hi} is not above {lo}")));
        }
        let sides: Vec<usize> = (0..d)
            .map(|i| (i64::from(hi.coord(i)) - i64::from(lo.coord(i)) + 1) as usize)
            .collect();
        let mut strides = vec![1usize; d];
        let mut len: usize = 1;
        for i in (0..d).rev() {
            strides[i] = len;
            len = len
                .checked_mul(sides[i])
                .filter(|&l| l <= u32::MAX as usize)
                .ok_or_else(|| Error::InvalidBox("box too large to index".into()))?;
        }
        Ok(LatticeBox {
            lo,
            hi,
            sides,
            strides,
            len,
        })
    }

    /// `Q_n = [-n·1, n·1]`.
    pub fn cube(d: usize, n: i32) -> Result<Self> {
        LatticeBox::new(Point::diagonal(d, -n), Point::diagonal(d, n))
    }

    /// `u + Q_n`.
    pub fn centered(u: &Point, n: i32) -> Result<Self> {
        let d = u.dim();
        LatticeBox::new(u.add(&Point::diagonal(d, -n)), u.add(&Point::diagonal(d, n)))
    }

    pub fn lo(&self) -> &Point {
        &self.lo
    }

    pub fn hi(&self) -> &Point {
        &self.hi
    }

    pub fn dim(&self) -> usize {
        self.lo.dim()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn side(&self, axis: usize) -> usize {
        self.sides[axis]
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    pub fn contains(&self, x: &Point) -> bool {
        x.dim() == self.dim() && self.lo.le(x) && x.le(&self.hi)
    }

    pub fn contains_box(&self, other: &LatticeBox) -> bool {
        self.contains(&other.lo) && self.contains(&other.hi)
    }

    pub fn intersect(&self, other: &LatticeBox) -> Option<LatticeBox> {
        if other.dim() != self.dim() {
            return None;
        }
        let lo: Vec<i32> = (0..self.dim())
            .map(|i| self.lo.coord(i).max(other.lo.coord(i)))
            .collect();
        let hi: Vec<i32> = (0..self.dim())
            .map(|i| self.hi.coord(i).min(other.hi.coord(i)))
            .collect();
        LatticeBox::new(Point(lo), Point(hi)).ok()
    }

    pub fn index(&self, x: &Point) -> Option<usize> {
        if !self.contains(x) {
            return None;
        }
        Some(
            (0..self.dim())
                .map(|i| (x.coord(i) - self.lo.coord(i)) as usize * self.strides[i])
                .sum(),
        )
    }

    pub(crate) fn index_checked(&self, x: &Point) -> Result<usize> {
        x.check_dim(self.dim())?;
        self.index(x).ok_or_else(|| Error::OutsideBox(x.clone()))
    }

    /// Offset of site `idx` along `axis`, i.e. `x^[axis] - lo^[axis]`.
    #[inline]
    pub fn offset(&self, idx: usize, axis: usize) -> usize {
        (idx / self.strides[axis]) % self.sides[axis]
    }

    #[inline]
    pub fn coord_of(&self, idx: usize, axis: usize) -> i32 {
        self.lo.coord(axis) + self.offset(idx, axis) as i32
    }

    pub fn point(&self, idx: usize) -> Point {
        Point((0..self.dim()).map(|i| self.coord_of(idx, i)).collect())
    }

    /// Index of `x - e_axis`, if it lies in the box.
    #[inline]
    pub fn below(&self, idx: usize, axis: usize) -> Option<usize> {
        (self.offset(idx, axis) > 0).then(|| idx - self.strides[axis])
    }

    /// Index of `x + e_axis`, if it lies in the box.
    #[inline]
    pub fn above(&self, idx: usize, axis: usize) -> Option<usize> {
        (self.offset(idx, axis) + 1 < self.sides[axis]).then(|| idx + self.strides[axis])
    }

    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.len).map(move |i| self.point(i))
    }

    /// Whether `idx` is adjacent to a site outside the box (`∂Q`).
    pub fn on_boundary(&self, idx: usize) -> bool {
        (0..self.dim()).any(|a| {
            let o = self.offset(idx, a);
            o == 0 || o + 1 == self.sides[a]
        })
    }
}

/// A set of sites of a box, one bit per site.
#[derive(Clone, PartialEq, Eq)]
pub struct SiteMask {
    region: LatticeBox,
    words: Vec<u64>,
}

impl fmt::Debug for SiteMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SiteMask")
            .field("region", &self.region)
            .field("sites", &self.points())
            .finish()
    }
}

impl SiteMask {
    pub fn empty(region: &LatticeBox) -> Self {
        SiteMask {
            region: region.clone(),
            words: vec![0; region.len().div_ceil(64)],
        }
    }

    pub fn full(region: &LatticeBox) -> Self {
        let mut m = Self::empty(region);
        for i in 0..region.len() {
            m.insert(i);
        }
        m
    }

    pub fn from_fn(region: &LatticeBox, mut f: impl FnMut(usize) -> bool) -> Self {
        let mut m = Self::empty(region);
        for i in 0..region.len() {
            if f(i) {
                m.insert(i);
            }
        }
        m
    }

    pub fn from_points<'a>(
        region: &LatticeBox,
        pts: impl IntoIterator<Item = &'a Point>,
    ) -> Result<Self> {
        let mut m = Self::empty(region);
        for p in pts {
            m.insert(region.index_checked(p)?);
        }
        Ok(m)
    }

    pub fn region(&self) -> &LatticeBox {
        &self.region
    }

    #[inline]
    pub fn get(&self, idx: usize) -> bool {
        self.words[idx >> 6] >> (idx & 63) & 1 == 1
    }

    #[inline]
    pub fn insert(&mut self, idx: usize) {
        self.words[idx >> 6] |= 1 << (idx & 63);
    }

    #[inline]
    pub fn remove(&mut self, idx: usize) {
        self.words[idx >> 6] &= !(1 << (idx & 63));
    }

    pub fn set(&mut self, idx: usize, on: bool) {
        if on {
            self.insert(idx)
        } else {
            self.remove(idx)
        }
    }

    /// Membership of an arbitrary point; points outside the box are absent.
    pub fn contains(&self, x: &Point) -> bool {
        self.region.index(x).is_some_and(|i| self.get(i))
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn is_full(&self) -> bool {
        self.count() == self.region.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(k, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let b = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(k * 64 + b)
            })
        })
    }

    pub fn points(&self) -> Vec<Point> {
        self.iter().map(|i| self.region.point(i)).collect()
    }

    pub fn is_subset(&self, other: &SiteMask) -> bool {
        debug_assert_eq!(self.region, other.region);
        self.words
            .iter()
            .zip(&other.words)
            .all(|(a, b)| a & !b == 0)
    }

    pub fn union(&self, other: &SiteMask) -> SiteMask {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn intersection(&self, other: &SiteMask) -> SiteMask {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn difference(&self, other: &SiteMask) -> SiteMask {
        self.zip_with(other, |a, b| a & !b)
    }

    pub fn complement(&self) -> SiteMask {
        let mut m = self.clone();
        for w in &mut m.words {
            *w = !*w;
        }
        let tail = self.region.len() % 64;
        if tail != 0 {
            *m.words.last_mut().unwrap() &= (1u64 << tail) - 1;
        }
        m
    }

    fn zip_with(&self, other: &SiteMask, f: impl Fn(u64, u64) -> u64) -> SiteMask {
        debug_assert_eq!(self.region, other.region);
        SiteMask {
            region: self.region.clone(),
            words: self
                .words
                .iter()
                .zip(&other.words)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        }
    }

    /// Re-express the mask over another box; sites outside `self.region` are absent.
    pub fn restrict(&self, target: &LatticeBox) -> SiteMask {
        SiteMask::from_fn(target, |i| self.contains(&target.point(i)))
    }

    /// `A_+ ∩ Q` for `A = self`, by one increasing-index sweep.
    pub fn up_closure(&self) -> SiteMask {
        let r = &self.region;
        let mut out = self.clone();
        for idx in 0..r.len() {
            if !out.get(idx) && (0..r.dim()).any(|a| r.below(idx, a).is_some_and(|j| out.get(j))) {
                out.insert(idx);
            }
        }
        out
    }

    /// `A_- ∩ Q`, the mirror of [`SiteMask::up_closure`].
    pub fn down_closure(&self) -> SiteMask {
        let r = &self.region;
        let mut out = self.clone();
        for idx in (0..r.len()).rev() {
            if !out.get(idx) && (0..r.dim()).any(|a| r.above(idx, a).is_some_and(|j| out.get(j))) {
                out.insert(idx);
            }
        }
        out
    }

    /// `Q`-solid above: `A_+ ∩ Q = A`.
    pub fn is_solid_above(&self) -> bool {
        let r = &self.region;
        self.iter()
            .all(|i| (0..r.dim()).all(|a| r.above(i, a).map_or(true, |j| self.get(j))))
    }
}

/// `z_+ ∩ Q`.
pub fn up_cone(z: &Point, q: &LatticeBox) -> Result<SiteMask> {
    z.check_dim(q.dim())?;
    Ok(SiteMask::from_fn(q, |i| z.le(&q.point(i))))
}

/// `z_- ∩ Q`.
pub fn down_cone(z: &Point, q: &LatticeBox) -> Result<SiteMask> {
    z.check_dim(q.dim())?;
    Ok(SiteMask::from_fn(q, |i| q.point(i).le(z)))
}

/// `A_+ ∩ Q` for a finite set `A ⊆ Q`.
pub fn up_set_closure(a: &[Point], q: &LatticeBox) -> Result<SiteMask> {
    Ok(SiteMask::from_points(q, a)?.up_closure())
}

/// `∂_R Q` and `Q^{R:o}`, both as masks over `Q`.
#[derive(Debug, Clone)]
pub struct RelativeSplit {
    pub boundary: SiteMask,
    pub interior: SiteMask,
}

/// Split `Q ⊆ R` into the sites adjacent to `R ∖ Q` and the rest.
pub fn relative_boundary(q: &LatticeBox, r: &LatticeBox) -> Result<RelativeSplit> {
    if q.dim() != r.dim() {
        return Err(Error::DimensionMismatch {
            expected: r.dim(),
            found: q.dim(),
        });
    }
    if !r.contains_box(q) {
        return Err(Error::NotSubBox);
    }
    let boundary = SiteMask::from_fn(q, |i| on_relative_boundary(q, r, i));
    let interior = boundary.complement();
    Ok(RelativeSplit { boundary, interior })
}

/// Whether site `idx` of `q` has a nearest neighbour in `r ∖ q`.
pub(crate) fn on_relative_boundary(q: &LatticeBox, r: &LatticeBox, idx: usize) -> bool {
    (0..q.dim()).any(|a| {
        let c = q.coord_of(idx, a);
        (c == q.lo().coord(a) && c > r.lo().coord(a)) || (c == q.hi().coord(a) && c < r.hi().coord(a))
    })
}

/// The enhancement sub-lattice `V_d = {x : h(x) ≡ 0 mod ρ_d}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VdLattice {
    dim: usize,
    rho: i64,
    weights: Vec<i64>,
}

impl VdLattice {
    pub fn new(d: usize) -> Result<Self> {
        if !(2..=MAX_DIM).contains(&d) {
            return Err(Error::UnsupportedDimension(d));
        }
        let bound = 2 * d.div_ceil(2) as i64;
        let rho = (bound + 1..).find(|&k| is_prime(k)).unwrap();
        // coordinate 2i-1 carries +i, coordinate 2i carries -i (1-based)
        let weights = (0..d)
            .map(|k| {
                let i = (k / 2 + 1) as i64;
                if k % 2 == 0 {
                    i
                } else {
                    -i
                }
            })
            .collect();
        Ok(VdLattice { dim: d, rho, weights })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rho(&self) -> i64 {
        self.rho
    }

    pub fn weights(&self) -> &[i64] {
        &self.weights
    }

    pub fn h(&self, x: &Point) -> i64 {
        self.h_coords(x.coords())
    }

    #[inline]
    pub fn h_coords(&self, x: &[i32]) -> i64 {
        x.iter().zip(&self.weights).map(|(c, w)| i64::from(*c) * w).sum()
    }

    pub fn contains(&self, x: &Point) -> bool {
        self.contains_coords(x.coords())
    }

    #[inline]
    pub fn contains_coords(&self, x: &[i32]) -> bool {
        self.h_coords(x).rem_euclid(self.rho) == 0
    }

    /// Membership mask of `V_d ∩ Q`.
    pub fn mask(&self, q: &LatticeBox) -> SiteMask {
        SiteMask::from_fn(q, |i| self.contains(&q.point(i)))
    }
}

fn is_prime(n: i64) -> bool {
    n >= 2 && (2..).take_while(|k| k * k <= n).all(|k| n % k != 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(lo: &[i32], hi: &[i32]) -> LatticeBox {
        LatticeBox::new(Point::new(lo.to_vec()), Point::new(hi.to_vec())).unwrap()
    }

    fn naive_closure(a: &[Point], q: &LatticeBox) -> SiteMask {
        SiteMask::from_fn(q, |i| {
            let y = q.point(i);
            a.iter().any(|z| z.le(&y))
        })
    }

    #[test]
    fn indexing_is_lexicographic() {
        let q = bx(&[-1, 0, 2], &[1, 2, 3]);
        let pts: Vec<Point> = q.points().collect();
        let mut sorted = pts.clone();
        sorted.sort();
        assert_eq!(pts, sorted);
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(q.index(p), Some(i));
        }
    }

    #[test]
    fn rejects_bad_boxes() {
        assert!(LatticeBox::new(Point::from([1, 0]), Point::from([0, 0])).is_err());
        assert!(LatticeBox::new(Point::from([0]), Point::from([1])).is_err());
        assert!(LatticeBox::new(Point::from([0, 0]), Point::from([1, 1, 1])).is_err());
        assert!(LatticeBox::new(Point::new(vec![0; 17]), Point::new(vec![0; 17])).is_err());
    }

    #[test]
    fn up_cone_examples() {
        let q = bx(&[0, 0], &[2, 2]);
        assert!(up_cone(q.lo(), &q).unwrap().is_full());
        assert!(up_cone(&Point::from([3, 0]), &q).unwrap().is_empty());
        let c = up_cone(&Point::from([1, 1]), &q).unwrap();
        let expect: Vec<Point> = vec![[1, 1].into(), [1, 2].into(), [2, 1].into(), [2, 2].into()];
        assert_eq!(c.points(), expect);
        assert!(up_cone(&Point::from([1, 1, 1]), &q).is_err());
        let dc = down_cone(&Point::from([0, 1]), &q).unwrap();
        assert_eq!(dc.points(), vec![Point::from([0, 0]), Point::from([0, 1])]);
    }

    #[test]
    fn closure_examples() {
        let q = bx(&[0, 0], &[2, 2]);
        assert!(up_set_closure(&[], &q).unwrap().is_empty());
        assert!(up_set_closure(&[q.lo().clone()], &q).unwrap().is_full());
        let c = up_set_closure(&[[2, 0].into(), [0, 2].into()], &q).unwrap();
        let expect: Vec<Point> = vec![
            [0, 2].into(),
            [1, 2].into(),
            [2, 0].into(),
            [2, 1].into(),
            [2, 2].into(),
        ];
        assert_eq!(c.points(), expect);
        assert!(up_set_closure(&[[3, 3].into()], &q).is_err());
    }

    #[test]
    fn closure_sweep_matches_cone_union_small_3d() {
        let q = bx(&[0, 0, 0], &[2, 1, 2]);
        for bits in 0u32..(1 << q.len()) {
            if bits.count_ones() > 3 {
                continue;
            }
            let a: Vec<Point> = (0..q.len())
                .filter(|i| bits >> i & 1 == 1)
                .map(|i| q.point(i))
                .collect();
            assert_eq!(up_set_closure(&a, &q).unwrap(), naive_closure(&a, &q));
        }
    }

    #[test]
    fn relative_boundary_examples() {
        let r = bx(&[0, 0], &[4, 4]);
        let s = relative_boundary(&r, &r).unwrap();
        assert!(s.boundary.is_empty());
        assert!(s.interior.is_full());

        let q = bx(&[1, 1], &[3, 3]);
        let s = relative_boundary(&q, &r).unwrap();
        assert_eq!(s.boundary.count(), 8);
        assert_eq!(s.interior.points(), vec![Point::from([2, 2])]);

        // shares the faces x=0 and y=0 with R
        let q = bx(&[0, 0], &[2, 2]);
        let s = relative_boundary(&q, &r).unwrap();
        let expect: Vec<Point> = vec![
            [0, 2].into(),
            [1, 2].into(),
            [2, 0].into(),
            [2, 1].into(),
            [2, 2].into(),
        ];
        assert_eq!(s.boundary.points(), expect);
        assert!(relative_boundary(&r, &q).is_err());
    }

    #[test]
    fn vd_constants() {
        let rhos: Vec<i64> = (2..=8).map(|d| VdLattice::new(d).unwrap().rho()).collect();
        assert_eq!(rhos, vec![3, 5, 5, 7, 7, 11, 11]);
        let v3 = VdLattice::new(3).unwrap();
        assert_eq!(v3.weights(), &[1, -1, 2]);
        let v4 = VdLattice::new(4).unwrap();
        assert_eq!(v4.weights(), &[1, -1, 2, -2]);
    }

    #[test]
    fn vd_membership_examples() {
        for d in 2..=6 {
            assert!(VdLattice::new(d).unwrap().contains(&Point::origin(d)));
        }
        let v2 = VdLattice::new(2).unwrap();
        assert!(v2.contains(&Point::from([1, 1])));
        assert!(v2.contains(&Point::from([-2, 1])));
        assert!(!v2.contains(&Point::from([-1, 1])));
        let v3 = VdLattice::new(3).unwrap();
        assert_eq!(v3.h(&Point::from([2, 1, 1])), 3);
        assert!(!v3.contains(&Point::from([2, 1, 1])));
        assert!(v3.contains(&Point::from([-5, 0, 0])));
    }
}
