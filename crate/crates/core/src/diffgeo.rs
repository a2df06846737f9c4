//! Lorentz-model geometry composed from tape primitives, batched over rows.
//!
//! Every function takes `[B, d+1]` ambient points or `[B, d]` Euclidean tangent
//! coordinates and returns tape variables, so gradients flow through the
//! geometry without any hand-written derivative. The plain versions in
//! [`crate::lorentz`] and [`crate::hypergauss`] serve as value oracles.

use crate::error::{dim_err, Result};
use crate::lorentz::Curvature;
use crate::tensor::{Tape, Var};

/// Added under the square root of squared Euclidean norms. Keeps the norm's
/// derivative finite at the zero vector while `cosh`/`sinhc` of the norm still
/// receive the correct limiting gradient.
pub const NORM_EPS2: f64 = 1e-24;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `[-1, 1, ..., 1]`, so that `sum(a * b * sign) = <a, b>_L`.
fn signature(tape: &mut Tape, n: usize) -> Result<Var> {
    let mut s = vec![1.0; n];
    s[0] = -1.0;
    tape.constant_matrix(1, n, s)
}

/// Row-wise Lorentz inner product, `[B, 1]`.
pub fn inner(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let n = tape.dims(a).1.max(tape.dims(b).1);
    let prod = tape.mul(a, b)?;
    let sign = signature(tape, n)?;
    let signed = tape.mul(prod, sign)?;
    Ok(tape.sum_rows(signed))
}

/// The origin repeated over `rows`.
pub fn origin_rows(tape: &mut Tape, curv: Curvature, rows: usize, d: usize) -> Result<Var> {
    let mut data = vec![0.0; rows * (d + 1)];
    for r in 0..rows {
        data[r * (d + 1)] = curv.radius();
    }
    tape.constant_matrix(rows, d + 1, data)
}

/// `[0; w]` for each row of `w`.
pub fn lift(tape: &mut Tape, w: Var) -> Result<Var> {
    let rows = tape.dims(w).0;
    let zeros = tape.constant_matrix(rows, 1, vec![0.0; rows])?;
    tape.concat(&[zeros, w])
}

/// Row-wise Euclidean norm with the [`NORM_EPS2`] floor, `[B, 1]`.
pub fn euclid_norm(tape: &mut Tape, w: Var) -> Result<Var> {
    let sq = tape.square(w)?;
    let s = tape.sum_rows(sq);
    let s = tape.add_scalar(s, NORM_EPS2);
    Ok(tape.sqrt(s))
}

/// `cosh(x) base + sinhc(x) v` with `x = sqrt(-K) * norm`, where `norm` is the
/// Lorentz norm of `v` supplied by the caller.
pub fn exp_map_with_norm(
    tape: &mut Tape,
    curv: Curvature,
    base: Var,
    v: Var,
    norm: Var,
) -> Result<Var> {
    let x = tape.scale(norm, curv.sqrt_neg_k());
    let ch = tape.cosh(x);
    let shc = tape.sinhc(x);
    let a = tape.mul(ch, base)?;
    let b = tape.mul(shc, v)?;
    tape.add(a, b)
}

/// Exponential map at the origin of `[0; xi]`, `[B, d+1]`.
pub fn exp_origin(tape: &mut Tape, curv: Curvature, xi: Var) -> Result<Var> {
    let (rows, d) = tape.dims(xi);
    let o = origin_rows(tape, curv, rows, d)?;
    let v = lift(tape, xi)?;
    let n = euclid_norm(tape, xi)?;
    exp_map_with_norm(tape, curv, o, v, n)
}

/// Parallel transport of tangent vectors `v` from `from` to `to` (row-wise).
pub fn parallel_transport(
    tape: &mut Tape,
    curv: Curvature,
    from: Var,
    to: Var,
    v: Var,
) -> Result<Var> {
    let k = curv.k();
    let ab = inner(tape, from, to)?;
    let denom = tape.scale(ab, k);
    let denom = tape.add_scalar(denom, 1.0);
    let bv = inner(tape, to, v)?;
    let num = tape.scale(bv, k);
    let coef = tape.div(num, denom)?;
    let sum = tape.add(from, to)?;
    let shift = tape.mul(coef, sum)?;
    tape.sub(v, shift)
}

/// `proj_base([0; w])`: transport from the origin, then exponential map.
/// Uses `|w|_2` as the Lorentz norm of the transported vector (transport is
/// an isometry), which avoids cancellation in the ambient coordinates.
pub fn proj_from_origin(tape: &mut Tape, curv: Curvature, base: Var, w: Var) -> Result<Var> {
    let (rows, d) = tape.dims(w);
    if tape.dims(base) != (rows, d + 1) && tape.dims(base) != (1, d + 1) {
        return dim_err("proj_from_origin: base and w disagree");
    }
    let o = origin_rows(tape, curv, rows, d)?;
    let u = lift(tape, w)?;
    let v = parallel_transport(tape, curv, o, base, u)?;
    let n = euclid_norm(tape, w)?;
    exp_map_with_norm(tape, curv, base, v, n)
}

/// Logarithm map `log_base(target)` and the angle `theta = sqrt(-K) d(base, target)`.
pub fn log_map(tape: &mut Tape, curv: Curvature, base: Var, target: Var) -> Result<(Var, Var)> {
    let ip = inner(tape, base, target)?;
    let alpha = tape.scale(ip, curv.k());
    let theta = tape.acosh_clamped(alpha);
    let ab = tape.mul(alpha, base)?;
    let dir = tape.sub(target, ab)?;
    let shc = tape.sinhc(theta);
    let u = tape.div(dir, shc)?;
    Ok((u, theta))
}

/// Geodesic distance, `[B, 1]`.
pub fn distance(tape: &mut Tape, curv: Curvature, a: Var, b: Var) -> Result<Var> {
    let ip = inner(tape, a, b)?;
    let alpha = tape.scale(ip, curv.k());
    let theta = tape.acosh_clamped(alpha);
    Ok(tape.scale(theta, curv.radius()))
}

/// Spatial part of `log_origin(z)`: the Euclidean tangent coordinates of `z`.
pub fn log_origin_coords(tape: &mut Tape, curv: Curvature, z: Var) -> Result<Var> {
    let n = tape.dims(z).1;
    let z0 = tape.slice_cols(z, 0, 1)?;
    let alpha = tape.scale(z0, curv.sqrt_neg_k());
    let theta = tape.acosh_clamped(alpha);
    let shc = tape.sinhc(theta);
    let spatial = tape.slice_cols(z, 1, n)?;
    tape.div(spatial, shc)
}

/// `log N(x; 0, diag(sigma)^2)` per row, `[B, 1]`. `sigma` is a constant.
pub fn log_normal_rows(tape: &mut Tape, x: Var, sigma: &[f64]) -> Result<Var> {
    let d = tape.dims(x).1;
    if sigma.len() != d {
        return dim_err(format!("log_normal_rows: {} sigmas for {d} columns", sigma.len()));
    }
    let inv = tape.constant_matrix(1, d, sigma.iter().map(|s| 1.0 / s).collect())?;
    let e = tape.mul(x, inv)?;
    let sq = tape.square(e)?;
    let s = tape.sum_rows(sq);
    let s = tape.scale(s, -0.5);
    let norm_const: f64 = sigma.iter().map(|s| s.ln()).sum::<f64>() + 0.5 * d as f64 * LN_2PI;
    Ok(tape.add_scalar(s, -norm_const))
}

/// Wrapped-Gaussian log density of `z` under mean `mean` (both `[B, d+1]`,
/// or `mean` a single row) with fixed per-axis `sigma`, `[B, 1]`.
pub fn log_density(
    tape: &mut Tape,
    curv: Curvature,
    z: Var,
    mean: Var,
    sigma: &[f64],
) -> Result<Var> {
    let (rows, n) = tape.dims(z);
    let d = n - 1;
    let (u, theta) = log_map(tape, curv, mean, z)?;
    let o = origin_rows(tape, curv, rows, d)?;
    let at_origin = parallel_transport(tape, curv, mean, o, u)?;
    let w = tape.slice_cols(at_origin, 1, n)?;
    let gauss = log_normal_rows(tape, w, sigma)?;
    let shc = tape.sinhc(theta);
    let lsh = tape.log(shc);
    let corr = tape.scale(lsh, -(d as f64 - 1.0));
    tape.add(gauss, corr)
}
