//! Lorentz (hyperboloid) model of hyperbolic space with curvature `K < 0`.
//!
//! Points live in `R^{d+1}` on the upper sheet `<a, a>_L = 1/K, a_0 > 0`, where
//! `<a, b>_L = -a_0 b_0 + sum_{i>=1} a_i b_i`. Tangent vectors at `a` are the
//! vectors `v` with `<v, a>_L = 0`; the induced metric on them is positive
//! definite, so [`TangentVector::norm`] is always real.
//!
//! Everything here is plain `f64` arithmetic. The differentiable versions used
//! during training live in [`crate::diffgeo`] and are checked against these.

use crate::error::{dim_err, domain_err, Error, Result};

/// Below this value of `sqrt(-K) * |v|_L` the exponential and logarithm maps
/// switch to Taylor expansions of their `sinh(x)/x` style ratios.
pub const SMALL_ARG: f64 = 1e-6;

/// Relative tolerance for the hyperboloid constraint when validating points.
pub const POINT_TOL: f64 = 1e-9;

/// Tolerance factor for tangency checks.
pub const TANGENT_TOL: f64 = 1e-6;

/// Constant negative curvature `K`, equivalently the radius `R = 1/sqrt(-K)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curvature {
    k: f64,
}

impl Curvature {
    pub fn new(k: f64) -> Result<Self> {
        if !(k < 0.0) || !k.is_finite() {
            return domain_err(format!("curvature must be finite and negative, got {k}"));
        }
        Ok(Self { k })
    }

    pub fn from_radius(radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return domain_err(format!("curvature radius must be positive, got {radius}"));
        }
        Ok(Self {
            k: -1.0 / (radius * radius),
        })
    }

    #[inline]
    pub fn k(&self) -> f64 {
        self.k
    }

    /// `sqrt(-K)`, the reciprocal of the radius.
    #[inline]
    pub fn sqrt_neg_k(&self) -> f64 {
        (-self.k).sqrt()
    }

    #[inline]
    pub fn radius(&self) -> f64 {
        1.0 / self.sqrt_neg_k()
    }
}

/// `-a_0 b_0 + sum_{i>=1} a_i b_i`.
pub fn lorentz_inner(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return dim_err(format!("lorentz_inner: lengths {} and {}", a.len(), b.len()));
    }
    if a.len() < 2 {
        return dim_err("lorentz_inner: vectors need at least 2 coordinates");
    }
    Ok(inner_unchecked(a, b))
}

#[inline]
pub(crate) fn inner_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let spatial: f64 = a[1..].iter().zip(&b[1..]).map(|(x, y)| x * y).sum();
    spatial - a[0] * b[0]
}

fn euclid_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A point on the hyperboloid `H_K^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldPoint {
    coords: Vec<f64>,
    curvature: Curvature,
}

impl ManifoldPoint {
    /// Validates the constraint `<a, a>_L = 1/K` (relative to the magnitude of
    /// the coordinates) and `a_0 > 0`.
    pub fn new(coords: Vec<f64>, curvature: Curvature) -> Result<Self> {
        if coords.len() < 2 {
            return dim_err("manifold point needs at least 2 coordinates");
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return domain_err("manifold point has non-finite coordinates");
        }
        let p = Self { coords, curvature };
        if p.coords[0] <= 0.0 {
            return domain_err("manifold point must lie on the upper sheet (a_0 > 0)");
        }
        let residual = p.constraint_residual();
        if residual > POINT_TOL {
            return domain_err(format!(
                "point is off the hyperboloid (relative residual {residual:e})"
            ));
        }
        Ok(p)
    }

    pub(crate) fn new_unchecked(coords: Vec<f64>, curvature: Curvature) -> Self {
        Self { coords, curvature }
    }

    /// `|K <a,a>_L - 1|` scaled by the squared magnitude of the coordinates,
    /// which is the rounding floor of evaluating the quadratic form.
    pub fn constraint_residual(&self) -> f64 {
        let k = self.curvature.k;
        let scale = (-k * self.coords.iter().map(|c| c * c).sum::<f64>()).max(1.0);
        (k * inner_unchecked(&self.coords, &self.coords) - 1.0).abs() / scale
    }

    #[inline]
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    #[inline]
    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    /// Intrinsic dimension `d`.
    #[inline]
    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    fn check_compatible(&self, other: &ManifoldPoint) -> Result<()> {
        if self.coords.len() != other.coords.len() {
            return dim_err(format!(
                "points of dimension {} and {}",
                self.dim(),
                other.dim()
            ));
        }
        if self.curvature != other.curvature {
            return domain_err(format!(
                "points with curvature {} and {}",
                self.curvature.k, other.curvature.k
            ));
        }
        Ok(())
    }
}

/// A vector in the tangent space at `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    base: ManifoldPoint,
    coords: Vec<f64>,
}

impl TangentVector {
    pub fn new(base: ManifoldPoint, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != base.coords.len() {
            return dim_err(format!(
                "tangent vector has {} coordinates, base has {}",
                coords.len(),
                base.coords.len()
            ));
        }
        let ip = inner_unchecked(&coords, &base.coords);
        // The rounding floor of <v, a>_L grows with |a|, so the tolerance does too.
        let base_scale = (base.curvature.sqrt_neg_k() * euclid_norm(&base.coords)).max(1.0);
        let tol = TANGENT_TOL * (1.0 + euclid_norm(&coords)) * base_scale;
        if !(ip.abs() <= tol) {
            return domain_err(format!("vector is not tangent (<v, a>_L = {ip:e})"));
        }
        Ok(Self { base, coords })
    }

    pub fn zero(base: ManifoldPoint) -> Self {
        let n = base.coords.len();
        Self {
            base,
            coords: vec![0.0; n],
        }
    }

    pub(crate) fn new_unchecked(base: ManifoldPoint, coords: Vec<f64>) -> Self {
        Self { base, coords }
    }

    #[inline]
    pub fn base(&self) -> &ManifoldPoint {
        &self.base
    }

    #[inline]
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Lorentz norm `sqrt(<v, v>_L)`; negative rounding noise maps to 0.
    pub fn norm(&self) -> f64 {
        inner_unchecked(&self.coords, &self.coords).max(0.0).sqrt()
    }

    pub fn inner(&self, other: &TangentVector) -> f64 {
        inner_unchecked(&self.coords, &other.coords)
    }
}

/// `[1/sqrt(-K), 0, ..., 0]` in `d + 1` coordinates.
pub fn origin(curvature: Curvature, d: usize) -> ManifoldPoint {
    let mut coords = vec![0.0; d + 1];
    coords[0] = curvature.radius();
    ManifoldPoint::new_unchecked(coords, curvature)
}

/// Geodesic distance `acosh(K <a,b>_L) / sqrt(-K)`, with the argument clamped at 1.
pub fn distance(a: &ManifoldPoint, b: &ManifoldPoint) -> Result<f64> {
    a.check_compatible(b)?;
    let c = a.curvature;
    let arg = (c.k * inner_unchecked(&a.coords, &b.coords)).max(1.0);
    Ok(arg.acosh() / c.sqrt_neg_k())
}

/// `cosh(x)` and `sinh(x)/x`, with Taylor expansions below [`SMALL_ARG`].
fn cosh_sinhc(x: f64) -> (f64, f64) {
    if x < SMALL_ARG {
        let x2 = x * x;
        (1.0 + 0.5 * x2, 1.0 + x2 / 6.0)
    } else {
        (x.cosh(), x.sinh() / x)
    }
}

/// Exponential map at `v.base()`.
pub fn exp_map(v: &TangentVector) -> ManifoldPoint {
    let base = &v.base;
    let x = base.curvature.sqrt_neg_k() * v.norm();
    let (ch, shc) = cosh_sinhc(x);
    let coords = base
        .coords
        .iter()
        .zip(&v.coords)
        .map(|(a, vi)| ch * a + shc * vi)
        .collect();
    ManifoldPoint::new_unchecked(coords, base.curvature)
}

/// Logarithm map: the tangent vector at `base` pointing along the geodesic to
/// `target`, with Lorentz norm equal to their distance.
///
/// The angle is recovered from `asinh` of the tangential component when the
/// points are close, where `acosh` near 1 loses about half the mantissa.
pub fn log_map(base: &ManifoldPoint, target: &ManifoldPoint) -> Result<TangentVector> {
    base.check_compatible(target)?;
    let c = base.curvature;
    let alpha = c.k * inner_unchecked(&base.coords, &target.coords);
    // b - alpha a is Lorentz-orthogonal to a and has norm sinh(theta)/sqrt(-K)
    let dir: Vec<f64> = target
        .coords
        .iter()
        .zip(&base.coords)
        .map(|(b, a)| b - alpha * a)
        .collect();
    let sinh_theta = c.sqrt_neg_k() * inner_unchecked(&dir, &dir).max(0.0).sqrt();
    let theta = if alpha > 2.0 {
        alpha.acosh()
    } else {
        sinh_theta.asinh()
    };
    if theta == 0.0 {
        return Ok(TangentVector::zero(base.clone()));
    }
    let coef = if theta < SMALL_ARG {
        1.0 - theta * theta / 6.0
    } else {
        theta / sinh_theta
    };
    let coords = dir.into_iter().map(|x| coef * x).collect();
    Ok(TangentVector::new_unchecked(base.clone(), coords))
}

/// Moves `v` from its base to `to` along the connecting geodesic.
pub fn parallel_transport(v: &TangentVector, to: &ManifoldPoint) -> Result<TangentVector> {
    let from = &v.base;
    from.check_compatible(to)?;
    let k = from.curvature.k;
    let denom = 1.0 + k * inner_unchecked(&from.coords, &to.coords);
    if denom.abs() < 1e-12 {
        return domain_err("parallel transport between antipodal points");
    }
    let coef = k * inner_unchecked(&to.coords, &v.coords) / denom;
    let coords = v
        .coords
        .iter()
        .zip(from.coords.iter().zip(&to.coords))
        .map(|(vi, (a, b))| vi - coef * (a + b))
        .collect();
    Ok(TangentVector::new_unchecked(to.clone(), coords))
}

/// Transport `w` from the origin to `base`, then apply the exponential map there.
pub fn proj(base: &ManifoldPoint, w_at_origin: &TangentVector) -> Result<ManifoldPoint> {
    let o = w_at_origin.base();
    if o.coords.len() != base.coords.len() || o.curvature != base.curvature {
        return dim_err("proj: tangent vector and base point live on different manifolds");
    }
    if o.coords[1..].iter().any(|&c| c != 0.0) || (o.coords[0] - o.curvature.radius()).abs() > 0.0
    {
        return domain_err("proj: tangent vector must be attached to the origin");
    }
    let v = parallel_transport(w_at_origin, base)?;
    Ok(exp_map(&v))
}

/// `[0; w]`, a tangent vector at the origin with Lorentz norm `|w|_2`.
pub fn lift_to_tangent(w: &[f64], curvature: Curvature) -> TangentVector {
    let mut coords = Vec::with_capacity(w.len() + 1);
    coords.push(0.0);
    coords.extend_from_slice(w);
    TangentVector::new_unchecked(origin(curvature, w.len()), coords)
}

/// Recomputes `a_0 = sqrt(1/(-K) + sum_{i>=1} a_i^2)` so the point is back on the sheet.
pub fn project_to_manifold(mut coords: Vec<f64>, curvature: Curvature) -> Result<ManifoldPoint> {
    if coords.len() < 2 {
        return dim_err("project_to_manifold: need at least 2 coordinates");
    }
    let spatial: f64 = coords[1..].iter().map(|x| x * x).sum();
    coords[0] = (-1.0 / curvature.k + spatial).sqrt();
    if !coords[0].is_finite() {
        return Err(Error::Domain("project_to_manifold: non-finite input".into()));
    }
    Ok(ManifoldPoint::new_unchecked(coords, curvature))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Curvature {
        Curvature::new(-1.0).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn inner_product_examples() {
        assert_eq!(lorentz_inner(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(), -1.0);
        assert_eq!(lorentz_inner(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(lorentz_inner(&[2.0, 1.0, 1.0], &[1.0, 2.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(
            lorentz_inner(&[1.0, 0.0], &[1.0, 0.0, 0.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn curvature_radius_roundtrip() {
        for r in [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0] {
            let c = Curvature::from_radius(r).unwrap();
            assert!((c.k() + 1.0 / (r * r)).abs() < 1e-18);
            assert!((c.radius() - r).abs() < 1e-12 * r);
        }
        assert!(Curvature::new(0.0).is_err());
        assert!(Curvature::new(1.0).is_err());
        assert!(Curvature::from_radius(-1.0).is_err());
    }

    #[test]
    fn origin_examples() {
        assert_eq!(origin(unit(), 2).coords(), &[1.0, 0.0, 0.0]);
        assert_eq!(
            origin(Curvature::new(-0.25).unwrap(), 2).coords(),
            &[2.0, 0.0, 0.0]
        );
        let r100 = Curvature::from_radius(100.0).unwrap();
        let o = origin(r100, 4);
        assert!(close(o.coords(), &[100.0, 0.0, 0.0, 0.0, 0.0], 1e-12));
        assert!(ManifoldPoint::new(o.coords().to_vec(), r100).is_ok());
    }

    #[test]
    fn distance_examples() {
        let o = origin(unit(), 2);
        assert_eq!(distance(&o, &o).unwrap(), 0.0);
        let p = ManifoldPoint::new(vec![2f64.cosh(), 2f64.sinh(), 0.0], unit()).unwrap();
        assert!((distance(&o, &p).unwrap() - 2.0).abs() < 1e-12);
        let q = origin(Curvature::new(-0.5).unwrap(), 2);
        assert!(matches!(distance(&o, &q), Err(Error::Domain(_))));
        assert!(matches!(
            distance(&o, &origin(unit(), 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn exp_map_examples() {
        let o = origin(unit(), 2);
        assert_eq!(exp_map(&TangentVector::zero(o.clone())).coords(), o.coords());
        let v = TangentVector::new(o.clone(), vec![0.0, 1.0, 0.0]).unwrap();
        let z = exp_map(&v);
        assert!(close(z.coords(), &[1f64.cosh(), 1f64.sinh(), 0.0], 1e-14));
        assert!((z.coords()[0] - 1.54308).abs() < 1e-5);

        let c = Curvature::new(-0.25).unwrap();
        let o2 = origin(c, 2);
        let v2 = TangentVector::new(o2, vec![0.0, 2.0, 0.0]).unwrap();
        let z2 = exp_map(&v2);
        assert!(close(
            z2.coords(),
            &[2.0 * 1f64.cosh(), 2.0 * 1f64.sinh(), 0.0],
            1e-13
        ));
        assert!((z2.coords()[1] - 2.35040).abs() < 1e-5);
    }

    #[test]
    fn non_tangent_vector_rejected() {
        let o = origin(unit(), 2);
        assert!(matches!(
            TangentVector::new(o, vec![1.0, 0.0, 0.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn log_map_examples() {
        let o = origin(unit(), 2);
        let zero = log_map(&o, &o).unwrap();
        assert!(zero.coords().iter().all(|&c| c == 0.0));
        let p = ManifoldPoint::new(vec![1f64.cosh(), 1f64.sinh(), 0.0], unit()).unwrap();
        let u = log_map(&o, &p).unwrap();
        assert!(close(u.coords(), &[0.0, 1.0, 0.0], 1e-14));
    }

    #[test]
    fn small_tangent_vectors_use_taylor_branch() {
        let o = origin(unit(), 3);
        let v = TangentVector::new(o.clone(), vec![0.0, 1e-9, -2e-9, 0.5e-9]).unwrap();
        let z = exp_map(&v);
        assert!(z.constraint_residual() < 1e-15);
        let back = log_map(&o, &z).unwrap();
        for (a, b) in back.coords().iter().zip(v.coords()) {
            assert!((a - b).abs() < 1e-20);
        }
    }

    #[test]
    fn transport_identity_when_points_coincide() {
        let c = Curvature::new(-0.25).unwrap();
        let a = exp_map(&TangentVector::new(origin(c, 2), vec![0.0, 0.3, -0.7]).unwrap());
        let mut v = vec![0.0, 1.0, 2.0];
        // make it tangent at a
        let t = inner_unchecked(&v, a.coords()) * c.k();
        for (vi, ai) in v.iter_mut().zip(a.coords()) {
            *vi -= t * ai;
        }
        let v = TangentVector::new(a.clone(), v).unwrap();
        let moved = parallel_transport(&v, &a).unwrap();
        assert!(close(moved.coords(), v.coords(), 1e-14));
    }

    #[test]
    fn proj_examples() {
        let c = unit();
        let o = origin(c, 2);
        let w = lift_to_tangent(&[0.3, -0.4], c);
        assert!(close(
            proj(&o, &w).unwrap().coords(),
            exp_map(&w).coords(),
            1e-15
        ));
        let base = exp_map(&TangentVector::new(o, vec![0.0, 1.0, 1.0]).unwrap());
        let zero = lift_to_tangent(&[0.0, 0.0], c);
        assert!(close(proj(&base, &zero).unwrap().coords(), base.coords(), 1e-15));
        // vector not attached to the origin
        let v = TangentVector::zero(base.clone());
        assert!(proj(&base, &v).is_err());
    }

    #[test]
    fn lift_examples() {
        let c = unit();
        let z = lift_to_tangent(&[0.0, 0.0], c);
        assert!(z.coords().iter().all(|&x| x == 0.0));
        let v = lift_to_tangent(&[3.0, 4.0], c);
        assert_eq!(v.norm(), 5.0);
        assert_eq!(inner_unchecked(v.coords(), v.base().coords()), 0.0);
    }

    #[test]
    fn projection_examples() {
        let p = project_to_manifold(vec![0.9, 0.0, 0.0], unit()).unwrap();
        assert_eq!(p.coords(), &[1.0, 0.0, 0.0]);
        let good = exp_map(&lift_to_tangent(&[0.5, 1.5], unit()));
        let again = project_to_manifold(good.coords().to_vec(), unit()).unwrap();
        assert!(close(again.coords(), good.coords(), 1e-12));
    }

    #[test]
    fn off_manifold_point_rejected() {
        assert!(ManifoldPoint::new(vec![0.9, 0.0, 0.0], unit()).is_err());
        assert!(ManifoldPoint::new(vec![-1.0, 0.0, 0.0], unit()).is_err());
    }
}
