use dre::enhancement::{find_pivotal, pivotal_indices, PivotalMode};
use dre::environment::{trial_seed, uniform, Configuration, StepSet};
use dre::lattice::{relative_boundary, up_set_closure, LatticeBox, Point, SiteMask};
use dre::reachability::forward_cluster;
use dre::terrace::{extract_terrace, lambda_q, trichotomy, Extraction};
use dre::validate::{brute_cluster, brute_lambda, brute_pivotal, brute_solid_above, brute_up_closure, run_suite, Suite};

fn every_mask(r: &LatticeBox) -> impl Iterator<Item = SiteMask> + '_ {
    (0u32..1 << r.len()).map(move |bits| SiteMask::from_fn(r, |i| bits >> i & 1 == 1))
}

#[test]
fn exhaustive_three_by_three() {
    let r = LatticeBox::cube(2, 1).unwrap();
    let sets = [StepSet::Plus, StepSet::Minus, StepSet::All];
    for mask in every_mask(&r) {
        assert_eq!(up_set_closure(&mask.points(), &r).unwrap(), brute_up_closure(&mask));
        assert_eq!(lambda_q(&mask).is_ok(), brute_solid_above(&mask));
        if let Ok(t) = lambda_q(&mask) {
            assert_eq!(*t.sites(), brute_lambda(&mask));
        }
        for e in sets {
            for f in sets {
                let cfg = Configuration::new(mask.clone(), e, f);
                for x in r.points() {
                    assert_eq!(forward_cluster(&cfg, &r, &x).unwrap(), brute_cluster(&cfg, &x));
                }
            }
        }
    }
}

#[test]
fn exhaustive_cube_of_side_two() {
    let r = LatticeBox::new(Point::from([0, 0, 0]), Point::from([1, 1, 1])).unwrap();
    for mask in every_mask(&r) {
        assert_eq!(mask.up_closure(), brute_up_closure(&mask));
        let cfg = Configuration::half_orthant(mask);
        for x in r.points() {
            let e = extract_terrace(&cfg, &r, &x).unwrap();
            assert!(trichotomy(&e, &x).is_some());
            match e {
                Extraction::FillsBox => assert!(brute_cluster(&cfg, &x).is_full()),
                Extraction::Terrace(t) => assert_eq!(*t.sites(), brute_lambda(&brute_cluster(&cfg, &x))),
            }
        }
    }
}

#[test]
fn exhaustive_pivotal_on_small_box() {
    let r = LatticeBox::cube(2, 1).unwrap();
    for mask in every_mask(&r) {
        let cfg = Configuration::half_orthant(mask);
        let brute = brute_pivotal(&cfg, 1);
        assert_eq!(pivotal_indices(&cfg, 1, PivotalMode::Naive).unwrap(), brute);
        assert_eq!(pivotal_indices(&cfg, 1, PivotalMode::Fast).unwrap(), brute);
    }
}

#[test]
fn random_pivotal_against_brute_force() {
    for k in 0..300u64 {
        let d = 2 + (k % 2) as usize;
        let n = if d == 2 { 4 } else { 2 };
        let r = LatticeBox::cube(d, n).unwrap();
        let seed = trial_seed(5, k);
        let p = 0.3 + 0.5 * uniform(seed, &[0]);
        let cfg = Configuration::half_orthant(SiteMask::from_fn(&r, |i| uniform(seed, r.point(i).coords()) < p));
        let m = 1 + (k % n as u64) as i32;
        let brute = brute_pivotal(&cfg, m);
        assert_eq!(pivotal_indices(&cfg, m, PivotalMode::Fast).unwrap(), brute, "case {k}");
        let rep = find_pivotal(&cfg, m, PivotalMode::Fast).unwrap();
        assert_eq!(rep.total(), brute.len());
    }
}

#[test]
fn relative_boundary_on_nested_boxes() {
    let r = LatticeBox::cube(2, 3).unwrap();
    let q = LatticeBox::new(Point::from([-3, -1]), Point::from([1, 3])).unwrap();
    let split = relative_boundary(&q, &r).unwrap();
    let expect: Vec<Point> = q
        .points()
        .filter(|x| x.coord(1) == -1 || x.coord(0) == 1)
        .collect();
    assert_eq!(
        q.points().enumerate().filter(|&(i, _)| split.boundary.get(i)).map(|(_, x)| x).collect::<Vec<_>>(),
        expect
    );
}

#[test]
fn suites_are_reproducible() {
    let a = run_suite(Suite::Terrace, 30, 99).unwrap();
    let b = run_suite(Suite::Terrace, 30, 99).unwrap();
    assert_eq!(a.checks, b.checks);
    assert!(a.passed(), "{:?}", a.checks);
}
