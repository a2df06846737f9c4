//! Pseudo-hyperbolic (wrapped) Gaussian on the Lorentz model.
//!
//! A sample is `proj_mu([0; w])` with `w ~ N(0, diag(sigma)^2)`: the Euclidean
//! draw is lifted into the tangent space at the origin, transported to the mean
//! and pushed through the exponential map. The density picks up the volume
//! change of that map, `(d - 1) log(sinh(r)/r)` with `r = sqrt(-K) |u|_L`.

use rand_distr::StandardNormal;

use crate::error::{dim_err, domain_err, Result};
use crate::lorentz::{
    lift_to_tangent, log_map, origin, parallel_transport, proj, ManifoldPoint,
};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Points whose hyperboloid residual exceeds this are rejected by
/// [`log_density`]. Looser than construction-time validation so that points
/// carrying accumulated drift are still accepted.
pub const DENSITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct WrappedGaussianParams {
    mean: ManifoldPoint,
    sigma: Vec<f64>,
}

impl WrappedGaussianParams {
    pub fn new(mean: ManifoldPoint, sigma: Vec<f64>) -> Result<Self> {
        if sigma.len() != mean.dim() {
            return dim_err(format!(
                "sigma has {} entries for a {}-dimensional mean",
                sigma.len(),
                mean.dim()
            ));
        }
        if sigma.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return domain_err("standard deviations must be positive and finite");
        }
        Ok(Self { mean, sigma })
    }

    pub fn mean(&self) -> &ManifoldPoint {
        &self.mean
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn dim(&self) -> usize {
        self.sigma.len()
    }
}

/// `log N(w; 0, diag(sigma)^2)`.
pub fn log_normal_diag(w: &[f64], sigma: &[f64]) -> f64 {
    w.iter()
        .zip(sigma)
        .map(|(wi, si)| {
            let e = wi / si;
            -0.5 * e * e - si.ln() - 0.5 * LN_2PI
        })
        .sum()
}

/// `ln(sinh(x)/x)` for `x >= 0`, overflow-free.
pub fn ln_sinhc(x: f64) -> f64 {
    if x < 1e-4 {
        let x2 = x * x;
        x2 / 6.0 - x2 * x2 / 180.0
    } else if x < 20.0 {
        (x.sinh() / x).ln()
    } else {
        x + (-(-2.0 * x).exp()).ln_1p() - std::f64::consts::LN_2 - x.ln()
    }
}

/// Draws `(z, w)`; `w` is the Euclidean tangent draw that produced `z`.
pub fn sample<R: rand::Rng + ?Sized>(
    params: &WrappedGaussianParams,
    rng: &mut R,
) -> (ManifoldPoint, Vec<f64>) {
    let w: Vec<f64> = params
        .sigma
        .iter()
        .map(|s| s * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let lifted = lift_to_tangent(&w, params.mean.curvature());
    let z = proj(&params.mean, &lifted).expect("lifted vector lives at the origin of the mean's manifold");
    (z, w)
}

/// Recovers the tangent coordinates `w` (at the origin) and `sqrt(-K) |u|_L`
/// for `z` relative to `mean`.
pub fn tangent_coordinates(z: &ManifoldPoint, mean: &ManifoldPoint) -> Result<(Vec<f64>, f64)> {
    let c = mean.curvature();
    let u = log_map(mean, z)?;
    let o = origin(c, mean.dim());
    let at_origin = parallel_transport(&u, &o)?;
    Ok((at_origin.coords()[1..].to_vec(), c.sqrt_neg_k() * u.norm()))
}

pub fn log_density(z: &ManifoldPoint, params: &WrappedGaussianParams) -> Result<f64> {
    if z.dim() != params.dim() {
        return dim_err(format!(
            "point of dimension {} for a {}-dimensional distribution",
            z.dim(),
            params.dim()
        ));
    }
    if z.curvature() != params.mean.curvature() {
        return domain_err("point and distribution have different curvature");
    }
    let residual = z.constraint_residual();
    if !(residual <= DENSITY_TOL) {
        return domain_err(format!("point is off the hyperboloid (residual {residual:e})"));
    }
    let (w, r) = tangent_coordinates(z, &params.mean)?;
    let d = params.dim() as f64;
    Ok(log_normal_diag(&w, &params.sigma) - (d - 1.0) * ln_sinhc(r))
}

/// Monte-Carlo estimate of `KL(q || p)` from `n` draws of `q`.
pub fn kl_monte_carlo<R: rand::Rng + ?Sized>(
    q: &WrappedGaussianParams,
    p: &WrappedGaussianParams,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    if q.dim() != p.dim() {
        return dim_err("kl_monte_carlo: distributions of different dimension");
    }
    if q.mean.curvature() != p.mean.curvature() {
        return domain_err("kl_monte_carlo: distributions of different curvature");
    }
    if n == 0 {
        return domain_err("kl_monte_carlo: need at least one sample");
    }
    let mut acc = 0.0;
    for _ in 0..n {
        let (z, _) = sample(q, rng);
        acc += log_density(&z, q)? - log_density(&z, p)?;
    }
    Ok(acc / n as f64)
}

/// Normalizes `logits` in log space and exponentiates.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| (l - lse).exp()).collect()
}

/// `p(y = j | z)` for wrapped-Gaussian class conditionals `priors[j]` and
/// class probabilities `class_prior`.
pub fn timbre_posterior(
    z: &ManifoldPoint,
    priors: &[WrappedGaussianParams],
    class_prior: &[f64],
) -> Result<Vec<f64>> {
    if priors.is_empty() {
        return domain_err("timbre_posterior: no priors");
    }
    if class_prior.len() != priors.len() {
        return dim_err(format!(
            "{} class probabilities for {} priors",
            class_prior.len(),
            priors.len()
        ));
    }
    let total: f64 = class_prior.iter().sum();
    if (total - 1.0).abs() > 1e-9 || class_prior.iter().any(|p| *p < 0.0) {
        return domain_err("class prior is not a probability vector");
    }
    let logits = priors
        .iter()
        .zip(class_prior)
        .map(|(p, c)| Ok(log_density(z, p)? + c.ln()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(softmax(&logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lorentz::{distance, exp_map, Curvature};
    use crate::rng::seeded;

    fn unit() -> Curvature {
        Curvature::new(-1.0).unwrap()
    }

    #[test]
    fn density_at_mean_is_gaussian_peak() {
        let p = WrappedGaussianParams::new(origin(unit(), 2), vec![1.0, 1.0]).unwrap();
        let ld = log_density(&origin(unit(), 2), &p).unwrap();
        assert!((ld + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        assert!((ld + 1.83788).abs() < 1e-5);
    }

    #[test]
    fn one_dimensional_density_has_no_correction() {
        let c = Curvature::new(-0.25).unwrap();
        let mean = exp_map(&lift_to_tangent(&[0.7], c));
        let p = WrappedGaussianParams::new(mean.clone(), vec![0.8]).unwrap();
        for s in [-2.0, -0.3, 0.0, 1.1, 3.0] {
            let (z, w) = {
                let lifted = lift_to_tangent(&[s], c);
                (proj(&mean, &lifted).unwrap(), s)
            };
            let expect = log_normal_diag(&[w], &[0.8]);
            assert!((log_density(&z, &p).unwrap() - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_sigma_sample_sits_on_mean() {
        let c = unit();
        let mean = exp_map(&lift_to_tangent(&[0.4, -1.2], c));
        let p = WrappedGaussianParams::new(mean.clone(), vec![1e-300, 1e-300]).unwrap();
        let (z, _) = sample(&p, &mut seeded(3));
        assert!(distance(&z, &mean).unwrap() < 1e-9);
        for (a, b) in z.coords().iter().zip(mean.coords()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let p = WrappedGaussianParams::new(origin(unit(), 3), vec![1.0, 0.5, 2.0]).unwrap();
        let a = sample(&p, &mut seeded(11));
        let b = sample(&p, &mut seeded(11));
        assert_eq!(a, b);
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let mean = exp_map(&lift_to_tangent(&[0.3, 0.1], unit()));
        let p = WrappedGaussianParams::new(mean, vec![0.7, 1.3]).unwrap();
        assert_eq!(kl_monte_carlo(&p, &p, 50, &mut seeded(1)).unwrap(), 0.0);
    }

    #[test]
    fn posterior_of_identical_priors_is_uniform() {
        let mean = exp_map(&lift_to_tangent(&[0.3, 0.1], unit()));
        let p = WrappedGaussianParams::new(mean, vec![1.0, 1.0]).unwrap();
        let priors = vec![p.clone(), p.clone(), p];
        let z = exp_map(&lift_to_tangent(&[2.0, -1.0], unit()));
        let post = timbre_posterior(&z, &priors, &[1.0 / 3.0; 3]).unwrap();
        for v in &post {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_errors() {
        let z = origin(unit(), 2);
        assert!(timbre_posterior(&z, &[], &[]).is_err());
        let p = WrappedGaussianParams::new(origin(unit(), 2), vec![1.0, 1.0]).unwrap();
        assert!(timbre_posterior(&z, &[p.clone()], &[0.5]).is_err());
        assert!(timbre_posterior(&z, &[p.clone(), p], &[1.0]).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(WrappedGaussianParams::new(origin(unit(), 2), vec![1.0]).is_err());
        assert!(WrappedGaussianParams::new(origin(unit(), 2), vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn off_manifold_point_rejected_by_density() {
        let p = WrappedGaussianParams::new(origin(unit(), 2), vec![1.0, 1.0]).unwrap();
        let bad = ManifoldPoint::new_unchecked(vec![2.0, 0.0, 0.0], unit());
        assert!(log_density(&bad, &p).is_err());
    }

    #[test]
    fn ln_sinhc_branches_agree() {
        for x in [1e-5f64, 1e-4, 0.5, 5.0, 19.99, 20.0, 40.0] {
            let direct = (x.sinh() / x).ln();
            assert!((ln_sinhc(x) - direct).abs() < 1e-12 * direct.abs().max(1e-3), "{x}");
        }
        assert!(ln_sinhc(800.0).is_finite());
    }
}
