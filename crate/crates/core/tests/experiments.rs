use dre::enhancement::f_disturbance;
use dre::environment::{derive_eta_zeta, trial_seed, uniform, EnvironmentField, ModelKind, ModelSpec};
use dre::experiments::{
    crossing_from_samples, estimate_beta, estimate_theta_proxy, russo_check, ExperimentGeometry, ModelFamily,
    ScanMethod,
};
use dre::lattice::{LatticeBox, Point, VdLattice};

#[test]
fn bootstrap_interval_covers_the_median() {
    let family = ModelFamily::half_orthant(2).unwrap();
    let geom = ExperimentGeometry::new(2, 4, 2, 400, 1).unwrap();
    let grid = ScanMethod::Grid((0..=100).map(|k| f64::from(k) / 100.0).collect());
    let reps = 200u64;
    let mut covered = 0;
    for rep in 0..reps {
        let xs: Vec<f64> = (0..400).map(|i| uniform(trial_seed(77, rep), &[i])).collect();
        let c = crossing_from_samples(&family, &geom, &xs, &grid).unwrap();
        if c.ci.0 <= 0.5 && 0.5 <= c.ci.1 {
            covered += 1;
        }
    }
    let rate = f64::from(covered) / reps as f64;
    assert!(rate >= 0.9, "coverage {rate}");
}

#[test]
fn beta_and_theta_proxy_move_in_opposite_directions() {
    let geom = ExperimentGeometry::new(2, 8, 3, 400, 4).unwrap();
    let b = |p| estimate_beta(&ModelSpec::half_orthant(2, p).unwrap(), &geom).unwrap().value;
    let t = |p| estimate_theta_proxy(&ModelSpec::half_orthant(2, p).unwrap(), &geom).unwrap().value;
    assert!(b(0.3) <= b(0.6) && b(0.6) <= b(0.9));
    assert!(t(0.3) >= t(0.6) && t(0.6) >= t(0.9));
    assert_eq!(b(0.0), 0.0);
    assert_eq!(b(1.0), 1.0);
}

#[test]
fn small_russo_agreement() {
    let geom = ExperimentGeometry::new(2, 4, 1, 20_000, 8).unwrap();
    let c = russo_check(2, 0.5, 0.5, &geom, 0.02).unwrap();
    assert!(c.within(3.0), "{c:?}");
}

#[test]
fn zeta_marginal_on_a_few_windows() {
    let d = 2;
    let vd = VdLattice::new(d).unwrap();
    let window = LatticeBox::cube(d, 15).unwrap();
    let region = LatticeBox::new(Point::from([-16, -16, 1]), Point::from([15, 15, 2])).unwrap();
    let p = 0.6;
    let (mut n, mut hits) = (0u64, 0u64);
    for k in 0..40 {
        let env = EnvironmentField::new(ModelSpec::new(ModelKind::Slab, d, p, p).unwrap(), region.clone(), k).unwrap();
        let ez = derive_eta_zeta(&env, &window).unwrap();
        assert!(ez.eta.is_subset(&ez.zeta));
        for (i, x) in window.points().enumerate() {
            if vd.contains(&x) {
                n += 1;
                hits += u64::from(ez.zeta.get(i));
            }
        }
    }
    let f = f_disturbance(p, d).unwrap();
    let phat = hits as f64 / n as f64;
    assert!((phat - f).abs() <= 4.0 * (f * (1.0 - f) / n as f64).sqrt(), "{phat} vs {f}");
}
