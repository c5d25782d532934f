use proptest::prelude::*;

use dre::environment::{read_snapshot, uniform, write_snapshot, Configuration, EnvironmentField, ModelKind, ModelSpec, StepSet};
use dre::experiments::ScanMethod;
use dre::lattice::{up_set_closure, LatticeBox, Point, SiteMask, VdLattice};
use dre::reachability::forward_cluster;
use dre::terrace::{lambda_q, window_interior};
use dre::validate::{brute_cluster, brute_solid_above, brute_up_closure, minimal_upset_closure, q_terrace_witness};

/// A box with sides min..=max and a random subset of its sites.
fn boxed_mask(min: i32, max: i32, density: f64) -> impl Strategy<Value = SiteMask> {
    (2usize..=3)
        .prop_flat_map(move |d| (prop::collection::vec((0..max, min..=max), d), any::<u64>(), density..density.max(0.6)))
        .prop_map(|(sides, seed, density)| {
            let lo: Vec<i32> = sides.iter().map(|&(o, _)| -o).collect();
            let hi: Vec<i32> = sides.iter().map(|&(o, s)| -o + s - 1).collect();
            let r = LatticeBox::new(Point::new(lo), Point::new(hi)).unwrap();
            SiteMask::from_fn(&r, |i| uniform(seed, r.point(i).coords()) < density)
        })
}

/// The up-closure of a few random sites of a box with sides 3..=6.
fn sparse_upset() -> impl Strategy<Value = SiteMask> {
    (boxed_mask(3, 6, 0.0), prop::collection::vec(any::<prop::sample::Index>(), 1..4)).prop_map(|(m, picks)| {
        let r = m.region().clone();
        let pts: Vec<Point> = picks.iter().map(|i| r.point(i.index(r.len()))).collect();
        up_set_closure(&pts, &r).unwrap()
    })
}

fn step_set() -> impl Strategy<Value = StepSet> {
    prop_oneof![Just(StepSet::Plus), Just(StepSet::Minus), Just(StepSet::All)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn closure_is_the_least_up_set(mask in boxed_mask(1, 5, 0.05)) {
        let up = mask.up_closure();
        prop_assert!(mask.is_subset(&up));
        prop_assert!(brute_solid_above(&up));
        prop_assert_eq!(up.up_closure(), up.clone());
        prop_assert_eq!(up, brute_up_closure(&mask));
    }

    #[test]
    fn lambda_recovers_its_up_set(mask in boxed_mask(1, 5, 0.05)) {
        let g = mask.up_closure();
        prop_assume!(!g.is_empty() && !g.is_full());
        let t = lambda_q(&g).unwrap();
        prop_assert!(t.sites().is_subset(&g));
        prop_assert_eq!(brute_up_closure(t.sites()), g);
        prop_assert!(q_terrace_witness(t.sites()));
    }

    #[test]
    fn non_solid_sets_are_rejected(mask in boxed_mask(1, 4, 0.05)) {
        prop_assert_eq!(lambda_q(&mask).is_ok(), brute_solid_above(&mask));
    }

    #[test]
    fn push_up_sandwich(g in sparse_upset(), pick in any::<prop::sample::Index>()) {
        prop_assume!(!g.is_full());
        let t = lambda_q(&g).unwrap();
        let r = g.region().clone();
        let d = r.dim();
        let corners: Vec<Point> = t
            .corners()
            .corners
            .into_iter()
            .filter(|z| (0..d).all(|a| r.contains(&z.step(a, -1)) && r.contains(&z.step(a, 1))))
            .collect();
        prop_assume!(!corners.is_empty());
        let z = pick.get(&corners);
        let pushed = t.push_up(z).unwrap();
        let zi = r.index(z).unwrap();
        let mut lo = t.sites().clone();
        lo.remove(zi);
        prop_assert!(lo.is_subset(pushed.sites()));
        for x in pushed.sites().points() {
            prop_assert!(lo.contains(&x) || (0..d).any(|a| x == z.step(a, 1)));
        }
        let mut g2 = g.clone();
        g2.remove(zi);
        prop_assert_eq!(pushed.upset(), &g2);
    }

    #[test]
    fn stabilize_gives_the_minimal_up_set(mask in boxed_mask(1, 6, 0.05), a in any::<prop::sample::Index>(), b in any::<prop::sample::Index>()) {
        let g = mask.up_closure();
        prop_assume!(!g.is_empty() && !g.is_full());
        let t = lambda_q(&g).unwrap();
        let r = g.region().clone();
        let (x, y) = (r.point(a.index(r.len())), r.point(b.index(r.len())));
        let lo: Vec<i32> = (0..r.dim()).map(|i| x.coord(i).min(y.coord(i))).collect();
        let hi: Vec<i32> = (0..r.dim()).map(|i| x.coord(i).max(y.coord(i))).collect();
        let w = LatticeBox::new(Point::new(lo), Point::new(hi)).unwrap();
        let st = t.stabilize(&w, &[]).unwrap();
        let interior = window_interior(&w, &r).unwrap();
        prop_assert_eq!(st.upset(), &minimal_upset_closure(&g, &interior, &[]));
    }

    #[test]
    fn cluster_matches_relaxation(mask in boxed_mask(1, 5, 0.05), e in step_set(), f in step_set(), start in any::<prop::sample::Index>()) {
        let r = mask.region().clone();
        let x = r.point(start.index(r.len()));
        let cfg = Configuration::new(mask, e, f);
        prop_assert_eq!(forward_cluster(&cfg, &r, &x).unwrap(), brute_cluster(&cfg, &x));
    }

    #[test]
    fn terrace_paths_use_allowed_increments(mask in boxed_mask(1, 6, 0.05), a in any::<prop::sample::Index>(), b in any::<prop::sample::Index>()) {
        let g = mask.up_closure();
        prop_assume!(!g.is_empty() && !g.is_full());
        let t = lambda_q(&g).unwrap();
        let pts = t.sites().points();
        let (x, y) = (a.get(&pts), b.get(&pts));
        let path = t.terrace_path(x, y).unwrap();
        prop_assert_eq!(path.start(), Some(x));
        prop_assert_eq!(path.end(), Some(y));
        for w in path.points.windows(2) {
            let diff = w[1].sub(&w[0]);
            let plus = diff.coords().iter().filter(|&&c| c == 1).count();
            let minus = diff.coords().iter().filter(|&&c| c == -1).count();
            prop_assert!(diff.coords().iter().all(|c| c.abs() <= 1));
            prop_assert!(plus <= 1 && minus <= 1 && plus + minus >= 1);
            prop_assert!(t.contains(&w[1]));
        }
    }

    #[test]
    fn omega_is_nested_in_p(seed in any::<u64>(), p in 0.0f64..1.0, dp in 0.0f64..0.5, d in 2usize..=3) {
        let r = LatticeBox::cube(d, 3).unwrap();
        let p2 = (p + dp).min(1.0);
        let lo = EnvironmentField::new(ModelSpec::half_orthant(d, p).unwrap(), r.clone(), seed).unwrap();
        let hi = EnvironmentField::new(ModelSpec::half_orthant(d, p2).unwrap(), r.clone(), seed).unwrap();
        prop_assert!(lo.omega_mask(&r).unwrap().is_subset(&hi.omega_mask(&r).unwrap()));
    }

    #[test]
    fn uniforms_are_deterministic_unit_values(seed in any::<u64>(), c in prop::collection::vec(-1000i32..1000, 2..6)) {
        let u = uniform(seed, &c);
        prop_assert!((0.0..1.0).contains(&u));
        prop_assert_eq!(u, uniform(seed, &c));
    }

    #[test]
    fn snapshot_roundtrip(seed in any::<u64>(), p in 0.0f64..=1.0, q in 0.0f64..=1.0, kind in 0u8..4) {
        let kind = ModelKind::from_code(kind).unwrap();
        let spec = ModelSpec::new(kind, 2, p, q).unwrap();
        let r = if kind == ModelKind::Slab {
            LatticeBox::new(Point::from([-3, -2, 1]), Point::from([2, 4, 2])).unwrap()
        } else {
            LatticeBox::new(Point::from([-3, -2]), Point::from([2, 4])).unwrap()
        };
        let env = EnvironmentField::new(spec, r.clone(), seed).unwrap();
        let mut buf = Vec::new();
        write_snapshot(&env, &r, &mut buf).unwrap();
        let (h, mask) = read_snapshot(&buf[..]).unwrap();
        prop_assert_eq!(h.region, r.clone());
        prop_assert_eq!(h.seed, seed);
        prop_assert_eq!(h.model, kind);
        prop_assert_eq!(mask, env.omega_mask(&r).unwrap());
    }

    #[test]
    fn vd_runs_hit_the_sublattice(d in 2usize..=8, c in prop::collection::vec(-50i32..50, 8), axis in 0usize..8) {
        let vd = VdLattice::new(d).unwrap();
        let x = Point::new(c[..d].to_vec());
        let a = axis % d;
        prop_assert!((0..vd.rho() as i32).any(|k| vd.contains(&x.step(a, k))));
    }

    #[test]
    fn grid_is_inclusive(p0 in 0.0f64..0.5, k in 1usize..40) {
        let step = 0.01;
        let p1 = p0 + k as f64 * step;
        let ScanMethod::Grid(g) = ScanMethod::parse_grid(&format!("{p0}:{p1}:{step}")).unwrap() else { unreachable!() };
        prop_assert_eq!(g.len(), k + 1);
        prop_assert!((g[k] - p1).abs() < 1e-6);
        prop_assert!(g.windows(2).all(|w| w[0] < w[1]));
    }
}
