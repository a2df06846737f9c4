use hyptimbre::hypergauss::{kl_monte_carlo, log_density, sample, WrappedGaussianParams};
use hyptimbre::lorentz::{
    distance, exp_map, lift_to_tangent, log_map, origin, parallel_transport, project_to_manifold,
    Curvature, ManifoldPoint, TangentVector,
};
use hyptimbre::rng::seeded;
use proptest::prelude::*;

fn curvature() -> impl Strategy<Value = Curvature> {
    prop_oneof![Just(-1.0), Just(-0.25), Just(-0.01)].prop_map(|k| Curvature::new(k).unwrap())
}

fn coords(d: usize, scale: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-scale..scale, d)
}

fn point(c: Curvature, w: &[f64]) -> ManifoldPoint {
    exp_map(&lift_to_tangent(w, c))
}

/// A tangent vector at `base`, given by its coordinates at the origin.
fn tangent_at(base: &ManifoldPoint, w: &[f64]) -> TangentVector {
    parallel_transport(&lift_to_tangent(w, base.curvature()), base).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn distance_is_symmetric_and_satisfies_the_triangle_inequality(
        c in curvature(),
        (a, b, e) in (1usize..6).prop_flat_map(|d| (coords(d, 3.0), coords(d, 3.0), coords(d, 3.0))),
    ) {
        let r = c.radius();
        let scale = |v: Vec<f64>| v.into_iter().map(|x| x * r).collect::<Vec<_>>();
        let (a, b, e) = (point(c, &scale(a)), point(c, &scale(b)), point(c, &scale(e)));
        let ab = distance(&a, &b).unwrap();
        prop_assert!((ab - distance(&b, &a).unwrap()).abs() <= 1e-9 * ab.max(1.0));
        let slack = 1e-9 * (ab + r);
        prop_assert!(ab <= distance(&a, &e).unwrap() + distance(&e, &b).unwrap() + slack);
        // acosh has unbounded slope at 1, so self-distance is only zero to
        // within the square root of the rounding error in the inner product.
        prop_assert!(distance(&a, &a).unwrap() <= 1e-7 * a.coords()[0]);
    }

    #[test]
    fn transport_preserves_inner_products_and_reverses(
        c in curvature(),
        (wa, wb, u, v) in (1usize..6).prop_flat_map(|d| (coords(d, 2.0), coords(d, 2.0), coords(d, 3.0), coords(d, 3.0))),
    ) {
        let r = c.radius();
        let a = point(c, &wa.iter().map(|x| x * r).collect::<Vec<_>>());
        let b = point(c, &wb.iter().map(|x| x * r).collect::<Vec<_>>());
        let (u, v) = (tangent_at(&a, &u), tangent_at(&a, &v));
        let (tu, tv) = (parallel_transport(&u, &b).unwrap(), parallel_transport(&v, &b).unwrap());
        let scale = u.norm().max(1.0) * v.norm().max(1.0);
        prop_assert!((u.inner(&v) - tu.inner(&tv)).abs() <= 1e-9 * scale);
        let back = parallel_transport(&tu, &a).unwrap();
        let mag = a.coords().iter().fold(1.0f64, |m, x| m.max(x.abs())) / r;
        for (x, y) in back.coords().iter().zip(u.coords()) {
            prop_assert!((x - y).abs() <= 1e-9 * u.norm().max(1.0) * mag * mag);
        }
    }

    #[test]
    fn exp_log_round_trip(
        c in curvature(),
        (wa, wv) in (1usize..6).prop_flat_map(|d| (coords(d, 2.0), coords(d, 4.0))),
    ) {
        let r = c.radius();
        let a = point(c, &wa.iter().map(|x| x * r).collect::<Vec<_>>());
        let v = tangent_at(&a, &wv.iter().map(|x| x * r).collect::<Vec<_>>());
        let z = exp_map(&v);
        let back = log_map(&a, &z).unwrap();
        let err: f64 = back.coords().iter().zip(v.coords()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let size: f64 = v.coords().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-8 * size.max(r), "err {err:e} size {size}");
        prop_assert!((back.norm() - distance(&a, &z).unwrap()).abs() <= 1e-9 * back.norm().max(r));
    }

    #[test]
    fn density_is_unchanged_by_repairing_representation_drift(
        c in curvature(),
        (wm, wz, sigma, drift) in (2usize..5).prop_flat_map(|d| (
            coords(d, 1.5), coords(d, 1.5), prop::collection::vec(0.2f64..2.0, d), coords(d, 1e-11),
        )),
    ) {
        let r = c.radius();
        let mean = point(c, &wm.iter().map(|x| x * r).collect::<Vec<_>>());
        let z = point(c, &wz.iter().map(|x| x * r).collect::<Vec<_>>());
        let params = WrappedGaussianParams::new(mean, sigma.iter().map(|s| s * r).collect()).unwrap();
        let clean = log_density(&z, &params).unwrap();
        let mut drifted = z.coords().to_vec();
        for (x, e) in drifted[1..].iter_mut().zip(&drift) {
            *x += e * r;
        }
        let repaired = project_to_manifold(drifted, c).unwrap();
        let after = log_density(&repaired, &params).unwrap();
        prop_assert!((clean - after).abs() < 1e-8, "{clean} vs {after}");
    }
}

#[test]
fn monte_carlo_kl_is_deterministic_for_a_seed() {
    let c = Curvature::new(-0.25).unwrap();
    let q = WrappedGaussianParams::new(point(c, &[0.5, -0.2, 0.1]), vec![0.7, 0.9, 1.1]).unwrap();
    let p = WrappedGaussianParams::new(origin(c, 3), vec![1.0; 3]).unwrap();
    let a = kl_monte_carlo(&q, &p, 500, &mut seeded(11)).unwrap();
    let b = kl_monte_carlo(&q, &p, 500, &mut seeded(11)).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_ne!(a, kl_monte_carlo(&q, &p, 500, &mut seeded(12)).unwrap());
}

#[test]
fn samples_stay_on_the_hyperboloid_far_from_the_origin() {
    let c = Curvature::from_radius(100.0).unwrap();
    let mean = point(c, &[300.0, -150.0, 80.0, 10.0]);
    let params = WrappedGaussianParams::new(mean, vec![1.0; 4]).unwrap();
    let mut rng = seeded(4);
    for _ in 0..1000 {
        let (z, _) = sample(&params, &mut rng);
        assert!(z.constraint_residual() <= 1e-12, "{:e}", z.constraint_residual());
        assert!(z.coords()[0] > 0.0);
    }
}
