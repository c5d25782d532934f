//! Coupled random environments.
//!
//! Every site carries a uniform `U_x` derived from a counter-based hash of
//! `(seed, x)`, so the field is defined on all of `Z^d` and any site can be
//! regenerated on demand. A site is in `Ω_1` (step set `E`) iff
//! `U_x <= threshold(x)`; otherwise it takes the step set `F`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{LatticeBox, Point, SiteMask, VdLattice, MAX_DIM};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// The splitmix64 finaliser.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 64-bit hash of `(seed, coords)`.
#[inline]
pub fn site_hash(seed: u64, coords: &[i32]) -> u64 {
    let mut h = mix64(seed ^ GOLDEN);
    for (k, &c) in coords.iter().enumerate() {
        let word = u64::from(c as u32) | ((k as u64) << 32);
        h = mix64(h.wrapping_add(GOLDEN) ^ mix64(word));
    }
    h
}

/// Map the top 53 bits of a hash to `[0, 1)`.
#[inline]
pub fn unit_from_hash(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// The coupled uniform `U_x`.
#[inline]
pub fn uniform(seed: u64, coords: &[i32]) -> f64 {
    unit_from_hash(site_hash(seed, coords))
}

/// Seed of trial `t` of a run with base seed `base`.
pub fn trial_seed(base: u64, t: u64) -> u64 {
    mix64(mix64(base ^ 0x5851_f42d_4c95_7f2d).wrapping_add(t.wrapping_mul(GOLDEN)))
}

/// The step set available at a site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSet {
    /// `ℰ_+ = {e_i}`
    Plus,
    /// `ℰ_- = {-e_i}`
    Minus,
    /// `ℰ = ℰ_+ ∪ ℰ_-`
    All,
}

impl StepSet {
    #[inline]
    pub fn has_plus(self) -> bool {
        !matches!(self, StepSet::Minus)
    }

    #[inline]
    pub fn has_minus(self) -> bool {
        !matches!(self, StepSet::Plus)
    }

    pub fn name(self) -> &'static str {
        match self {
            StepSet::Plus => "E+",
            StepSet::Minus => "E-",
            StepSet::All => "E",
        }
    }
}

impl fmt::Display for StepSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Orthant,
    #[serde(rename = "half")]
    HalfOrthant,
    Disturbed,
    Slab,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Orthant => "orthant",
            ModelKind::HalfOrthant => "half",
            ModelKind::Disturbed => "disturbed",
            ModelKind::Slab => "slab",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ModelKind::Orthant => 0,
            ModelKind::HalfOrthant => 1,
            ModelKind::Disturbed => 2,
            ModelKind::Slab => 3,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => ModelKind::Orthant,
            1 => ModelKind::HalfOrthant,
            2 => ModelKind::Disturbed,
            3 => ModelKind::Slab,
            _ => return Err(Error::Format(format!("unknown model code {c}"))),
        })
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "orthant" => ModelKind::Orthant,
            "half" | "half_orthant" | "half-orthant" => ModelKind::HalfOrthant,
            "disturbed" => ModelKind::Disturbed,
            "slab" => ModelKind::Slab,
            _ => return Err(Error::Format(format!("unknown model {s:?}"))),
        })
    }
}

/// Model parameters. `dim` is the base dimension `d`; the slab lives in `Z^{d+1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub dim: usize,
    pub p: f64,
    pub q: f64,
}

pub(crate) fn check_probability(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidProbability(p))
    }
}

impl ModelSpec {
    pub fn new(kind: ModelKind, dim: usize, p: f64, q: f64) -> Result<Self> {
        check_probability(p)?;
        check_probability(q)?;
        let lattice_dim = if kind == ModelKind::Slab { dim + 1 } else { dim };
        if dim < 2 || lattice_dim > MAX_DIM {
            return Err(Error::UnsupportedDimension(dim));
        }
        Ok(ModelSpec { kind, dim, p, q })
    }

    pub fn half_orthant(dim: usize, p: f64) -> Result<Self> {
        Self::new(ModelKind::HalfOrthant, dim, p, p)
    }

    pub fn disturbed(dim: usize, p: f64, q: f64) -> Result<Self> {
        Self::new(ModelKind::Disturbed, dim, p, q)
    }

    pub fn lattice_dim(&self) -> usize {
        if self.kind == ModelKind::Slab {
            self.dim + 1
        } else {
            self.dim
        }
    }

    /// The step set `E` taken on `Ω_1`.
    pub fn e_set(&self) -> StepSet {
        StepSet::Plus
    }

    /// The step set `F` taken on `Ω_0`.
    pub fn f_set(&self) -> StepSet {
        match self.kind {
            ModelKind::Orthant => StepSet::Minus,
            _ => StepSet::All,
        }
    }
}

/// Lazily evaluated environment over a box, optionally with forced sites.
#[derive(Debug, Clone)]
pub struct EnvironmentField {
    region: LatticeBox,
    seed: u64,
    spec: ModelSpec,
    vd: VdLattice,
    overrides: BTreeMap<Point, bool>,
}

impl EnvironmentField {
    pub fn new(spec: ModelSpec, region: LatticeBox, seed: u64) -> Result<Self> {
        let ld = spec.lattice_dim();
        if region.dim() != ld {
            return Err(Error::DimensionMismatch {
                expected: ld,
                found: region.dim(),
            });
        }
        if spec.kind == ModelKind::Slab {
            let (lo, hi) = (region.lo().coord(ld - 1), region.hi().coord(ld - 1));
            if lo < 1 || hi > 2 {
                return Err(Error::InvalidBox(format!(
                    "slab layers must lie in {{1,2}}, got [{lo},{hi}]"
                )));
            }
        }
        Ok(EnvironmentField {
            region,
            seed,
            spec,
            vd: VdLattice::new(spec.dim)?,
            overrides: BTreeMap::new(),
        })
    }

    pub fn region(&self) -> &LatticeBox {
        &self.region
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn vd(&self) -> &VdLattice {
        &self.vd
    }

    pub fn overrides(&self) -> &BTreeMap<Point, bool> {
        &self.overrides
    }

    /// `U_x`, defined for every site of the lattice.
    pub fn uniform(&self, x: &Point) -> f64 {
        uniform(self.seed, x.coords())
    }

    /// The `Ω_1` threshold at `x`: `q` on `V_d` for the disturbed model, else `p`.
    pub fn threshold(&self, coords: &[i32]) -> f64 {
        if self.spec.kind == ModelKind::Disturbed && self.vd.contains_coords(coords) {
            self.spec.q
        } else {
            self.spec.p
        }
    }

    /// `Ω_1` membership at any lattice site, ignoring the box.
    pub fn omega1_at(&self, coords: &[i32]) -> bool {
        if !self.overrides.is_empty() {
            if let Some(&v) = self.overrides.get(&Point::new(coords.to_vec())) {
                return v;
            }
        }
        uniform(self.seed, coords) <= self.threshold(coords)
    }

    /// Step set at any lattice site, ignoring the box.
    pub fn steps_at(&self, coords: &[i32]) -> StepSet {
        if self.omega1_at(coords) {
            self.spec.e_set()
        } else {
            self.spec.f_set()
        }
    }

    pub fn site_config(&self, x: &Point) -> Result<StepSet> {
        self.region.index_checked(x)?;
        Ok(self.steps_at(x.coords()))
    }

    /// `Ω_1 ∩ Q` as a mask over `Q`.
    pub fn omega_mask(&self, q: &LatticeBox) -> Result<SiteMask> {
        if q.dim() != self.region.dim() || !self.region.contains_box(q) {
            return Err(Error::NotSubBox);
        }
        let mut coords = vec![0i32; q.dim()];
        Ok(SiteMask::from_fn(q, |i| {
            for (a, c) in coords.iter_mut().enumerate() {
                *c = q.coord_of(i, a);
            }
            self.omega1_at(&coords)
        }))
    }

    /// Materialise the environment on `Q`.
    pub fn configuration(&self, q: &LatticeBox) -> Result<Configuration> {
        Ok(Configuration::new(
            self.omega_mask(q)?,
            self.spec.e_set(),
            self.spec.f_set(),
        ))
    }

    /// A copy of the environment with the listed sites forced to the given step sets.
    pub fn force_config(&self, overrides: &BTreeMap<Point, StepSet>) -> Result<EnvironmentField> {
        let mut out = self.clone();
        for (x, s) in overrides {
            self.region.index_checked(x)?;
            let v = if *s == self.spec.e_set() {
                true
            } else if *s == self.spec.f_set() {
                false
            } else {
                return Err(Error::Precondition(format!(
                    "step set {s} is not available in the {} model",
                    self.spec.kind
                )));
            };
            out.overrides.insert(x.clone(), v);
        }
        Ok(out)
    }
}

/// A materialised environment `ω_Q`: the `Ω_1` mask plus the two step sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Configuration {
    omega1: SiteMask,
    e_set: StepSet,
    f_set: StepSet,
}

impl Configuration {
    pub fn new(omega1: SiteMask, e_set: StepSet, f_set: StepSet) -> Self {
        Configuration {
            omega1,
            e_set,
            f_set,
        }
    }

    /// Half-orthant configuration (`E = ℰ_+`, `F = ℰ`).
    pub fn half_orthant(omega1: SiteMask) -> Self {
        Self::new(omega1, StepSet::Plus, StepSet::All)
    }

    pub fn region(&self) -> &LatticeBox {
        self.omega1.region()
    }

    pub fn omega1(&self) -> &SiteMask {
        &self.omega1
    }

    pub fn e_set(&self) -> StepSet {
        self.e_set
    }

    pub fn f_set(&self) -> StepSet {
        self.f_set
    }

    #[inline]
    pub fn is_omega1(&self, idx: usize) -> bool {
        self.omega1.get(idx)
    }

    #[inline]
    pub fn steps(&self, idx: usize) -> StepSet {
        if self.omega1.get(idx) {
            self.e_set
        } else {
            self.f_set
        }
    }

    pub fn set_omega1(&mut self, idx: usize, on: bool) {
        self.omega1.set(idx, on);
    }

    /// A copy with site `idx` forced into (`true`) or out of `Ω_1`.
    pub fn with_site(&self, idx: usize, on: bool) -> Configuration {
        let mut c = self.clone();
        c.set_omega1(idx, on);
        c
    }

    pub fn restrict(&self, q: &LatticeBox) -> Result<Configuration> {
        if q.dim() != self.region().dim() || !self.region().contains_box(q) {
            return Err(Error::NotSubBox);
        }
        Ok(Configuration::new(
            self.omega1.restrict(q),
            self.e_set,
            self.f_set,
        ))
    }
}

/// Decoded header of a `DRE1` snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotHeader {
    pub region: LatticeBox,
    pub seed: u64,
    pub model: ModelKind,
    pub p: f64,
    pub q: f64,
}

const MAGIC: &[u8; 4] = b"DRE1";

/// Write `Ω_1 ∩ Q` as a little-endian `DRE1` bitmask file.
pub fn write_snapshot(env: &EnvironmentField, q: &LatticeBox, mut w: impl Write) -> Result<()> {
    let mask = env.omega_mask(q)?;
    w.write_all(MAGIC)?;
    w.write_all(&(q.dim() as u32).to_le_bytes())?;
    for c in q.lo().coords().iter().chain(q.hi().coords()) {
        w.write_all(&c.to_le_bytes())?;
    }
    w.write_all(&env.seed.to_le_bytes())?;
    w.write_all(&[env.spec.kind.code()])?;
    w.write_all(&env.spec.p.to_le_bytes())?;
    w.write_all(&env.spec.q.to_le_bytes())?;
    let mut bytes = vec![0u8; q.len().div_ceil(8)];
    for i in mask.iter() {
        bytes[i >> 3] |= 1 << (i & 7);
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_snapshot(mut r: impl Read) -> Result<(SnapshotHeader, SiteMask)> {
    fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        r.read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated snapshot: {e}")))?;
        Ok(b)
    }
    if &take::<4>(&mut r)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let d = u32::from_le_bytes(take(&mut r)?) as usize;
    if !(2..=MAX_DIM).contains(&d) {
        return Err(Error::UnsupportedDimension(d));
    }
    let mut corners = Vec::with_capacity(2 * d);
    for _ in 0..2 * d {
        corners.push(i32::from_le_bytes(take(&mut r)?));
    }
    let region = LatticeBox::new(
        Point::new(corners[..d].to_vec()),
        Point::new(corners[d..].to_vec()),
    )?;
    let seed = u64::from_le_bytes(take(&mut r)?);
    let model = ModelKind::from_code(take::<1>(&mut r)?[0])?;
    let p = f64::from_le_bytes(take(&mut r)?);
    let q = f64::from_le_bytes(take(&mut r)?);
    let mut bytes = vec![0u8; region.len().div_ceil(8)];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated bitmask: {e}")))?;
    let mask = SiteMask::from_fn(&region, |i| bytes[i >> 3] >> (i & 7) & 1 == 1);
    Ok((
        SnapshotHeader {
            region,
            seed,
            model,
            p,
            q,
        },
        mask,
    ))
}

/// The layer-1 environments `η ⊆ ζ` derived from a slab environment.
#[derive(Debug, Clone)]
pub struct EtaZeta {
    pub eta: SiteMask,
    pub zeta: SiteMask,
}

/// `Ω_1(η)` and `Ω_1(ζ)` on a `d`-dimensional window of layer 1.
///
/// `x ∈ Ω_1(η)` iff `x ∈ Ω_1` and `(x + W) ∩ Ω_1 ≠ ∅` with
/// `W = e_{d+1} + ({o} ∪ ℰ_-(d))`; `ζ` follows `η` on `V_d × {1}` and the
/// raw slab elsewhere.
pub fn derive_eta_zeta(env: &EnvironmentField, window: &LatticeBox) -> Result<EtaZeta> {
    let spec = env.spec();
    if spec.kind != ModelKind::Slab {
        return Err(Error::Precondition("η/ζ need a slab environment".into()));
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
    let reg = env.region();
    let needed_lo = lift(&window.lo().add(&Point::diagonal(d, -1)), 1);
    let needed_hi = lift(window.hi(), 2);
    if !reg.contains(&needed_lo) || !reg.contains(&needed_hi) {
        return Err(Error::Precondition(
            "slab box must extend one step below the window in every base direction".into(),
        ));
    }
    let vd = env.vd();
    let mut c = vec![0i32; d + 1];
    let mut eta = SiteMask::empty(window);
    let mut zeta = SiteMask::empty(window);
    for i in 0..window.len() {
        for (a, slot) in c.iter_mut().enumerate().take(d) {
            *slot = window.coord_of(i, a);
        }
        c[d] = 1;
        let base = env.omega1_at(&c);
        let eta_here = base && {
            c[d] = 2;
            let mut hit = env.omega1_at(&c);
            for j in 0..d {
                if hit {
                    break;
                }
                c[j] -= 1;
                hit = env.omega1_at(&c);
                c[j] += 1;
            }
            hit
        };
        eta.set(i, eta_here);
        zeta.set(i, if vd.contains_coords(&c[..d]) { eta_here } else { base });
    }
    Ok(EtaZeta { eta, zeta })
}
