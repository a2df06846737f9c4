//! Finite-difference verification of reverse-mode gradients.
//!
//! Each check reduces a function's output to a scalar with fixed random
//! weights, then compares every input partial with a central difference of
//! step [`STEP`]. The error of one partial is `|a - n| / max(|a|, |n|,
//! GRAD_FLOOR)`; the floor keeps partials that are zero up to rounding from
//! dividing by zero.

use rand::Rng;

use crate::diffgeo;
use crate::error::Result;
use crate::loss::{loss_graph, Batch};
use crate::lorentz::Curvature;
use crate::model::{DecoderInput, Geometry, LatentConfig, Model, ModelConfig};
use crate::rng::{seeded, stream};
use crate::tensor::{Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const GRAD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of partial derivatives compared.
    pub partials: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

type GraphFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn weighted_sum(tape: &mut Tape, out: Var, weights: &[f64]) -> Result<Var> {
    let (r, c) = tape.dims(out);
    let w = tape.constant_matrix(r, c, weights.to_vec())?;
    let p = tape.mul(out, w)?;
    Ok(tape.sum_all(p))
}

/// Checks `f` at `inputs` (each a matrix leaf).
pub fn check_fn<R: Rng + ?Sized>(
    name: &str,
    inputs: &[Tensor],
    f: &GraphFn<'_>,
    rng: &mut R,
) -> Result<CheckResult> {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &leaves)?;
    let (r, c) = tape.dims(out);
    let weights: Vec<f64> = (0..r * c).map(|_| rng.random_range(0.5..1.5)).collect();
    let loss = weighted_sum(&mut tape, out, &weights)?;
    let grads = tape.gradients(loss)?;

    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let l: Vec<Var> = vals.iter().map(|v| t.leaf(v)).collect();
        let o = f(&mut t, &l)?;
        let s = weighted_sum(&mut t, o, &weights)?;
        t.scalar(s)
    };
    let mut worst = 0.0f64;
    let mut partials = 0;
    let mut work = inputs.to_vec();
    for (j, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[j].len()]);
        for i in 0..inputs[j].len() {
            let x0 = inputs[j].data()[i];
            work[j].data_mut()[i] = x0 + STEP;
            let up = eval(&work)?;
            work[j].data_mut()[i] = x0 - STEP;
            let down = eval(&work)?;
            work[j].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_error(analytic[i], numeric));
            partials += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: worst,
        partials,
    })
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).expect("nonzero shape")
}

type Case = (&'static str, Vec<Tensor>, Box<GraphFn<'static>>);

fn unary(
    name: &'static str,
    lo: f64,
    hi: f64,
    rng: &mut impl Rng,
    op: fn(&mut Tape, Var) -> Var,
) -> Case {
    (name, vec![uniform(rng, 3, 4, lo, hi)], Box::new(move |t, v| Ok(op(t, v[0]))))
}

/// One check per tape primitive, including both branches of `sinhc` and the
/// broadcasting forms of the binary ops.
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = stream(seed, 10);
    let r = &mut rng;
    let mut cases: Vec<Case> = vec![
        (
            "matmul",
            vec![uniform(r, 3, 4, -1.0, 1.0), uniform(r, 4, 2, -1.0, 1.0)],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        (
            "add (broadcast row)",
            vec![uniform(r, 3, 4, -1.0, 1.0), uniform(r, 1, 4, -1.0, 1.0)],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        (
            "sub (broadcast column)",
            vec![uniform(r, 3, 4, -1.0, 1.0), uniform(r, 3, 1, -1.0, 1.0)],
            Box::new(|t, v| t.sub(v[0], v[1])),
        ),
        (
            "mul (broadcast scalar)",
            vec![uniform(r, 3, 4, -1.0, 1.0), uniform(r, 1, 1, -1.0, 1.0)],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        (
            "div",
            vec![uniform(r, 3, 4, -1.0, 1.0), uniform(r, 3, 4, 0.5, 2.0)],
            Box::new(|t, v| t.div(v[0], v[1])),
        ),
        (
            "scale",
            vec![uniform(r, 3, 4, -1.0, 1.0)],
            Box::new(|t, v| Ok(t.scale(v[0], -2.5))),
        ),
        (
            "add_scalar",
            vec![uniform(r, 3, 4, -1.0, 1.0)],
            Box::new(|t, v| Ok(t.add_scalar(v[0], 0.7))),
        ),
        (
            "square",
            vec![uniform(r, 3, 4, -2.0, 2.0)],
            Box::new(|t, v| t.square(v[0])),
        ),
        (
            "concat",
            vec![uniform(r, 3, 2, -1.0, 1.0), uniform(r, 3, 3, -1.0, 1.0)],
            Box::new(|t, v| t.concat(&[v[0], v[1]])),
        ),
        (
            "slice_cols",
            vec![uniform(r, 3, 5, -1.0, 1.0)],
            Box::new(|t, v| t.slice_cols(v[0], 1, 4)),
        ),
        (
            "gather_rows",
            vec![uniform(r, 3, 4, -1.0, 1.0)],
            Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2, 1, 2])),
        ),
        (
            "reshape",
            vec![uniform(r, 3, 4, -1.0, 1.0)],
            Box::new(|t, v| t.reshape(v[0], 2, 6)),
        ),
        (
            "sum_rows",
            vec![uniform(r, 3, 4, -1.0, 1.0)],
            Box::new(|t, v| Ok(t.sum_rows(v[0]))),
        ),
        (
            "sum_all",
            vec![uniform(r, 3, 4, -1.0, 1.0)],
            Box::new(|t, v| Ok(t.sum_all(v[0]))),
        ),
        (
            "mean_all",
            vec![uniform(r, 3, 4, -1.0, 1.0)],
            Box::new(|t, v| Ok(t.mean_all(v[0]))),
        ),
        (
            "layer_norm",
            vec![uniform(r, 3, 5, -2.0, 2.0)],
            Box::new(|t, v| Ok(t.layer_norm(v[0]))),
        ),
        (
            "log_softmax",
            vec![uniform(r, 3, 5, -3.0, 3.0)],
            Box::new(|t, v| Ok(t.log_softmax(v[0]))),
        ),
        (
            "softmax",
            vec![uniform(r, 3, 5, -3.0, 3.0)],
            Box::new(|t, v| Ok(t.softmax(v[0]))),
        ),
    ];
    cases.push(unary("neg", -1.0, 1.0, r, Tape::neg));
    // Kept away from the kink at zero.
    cases.push((
        "relu",
        vec![Tensor::matrix(2, 3, vec![-1.2, -0.3, 0.4, 0.8, -0.6, 1.5]).expect("shape")],
        Box::new(|t, v| Ok(t.relu(v[0]))),
    ));
    cases.push(unary("softplus", -3.0, 3.0, r, Tape::softplus));
    cases.push(unary("tanh", -2.0, 2.0, r, Tape::tanh));
    cases.push(unary("exp", -2.0, 2.0, r, Tape::exp));
    cases.push(unary("log", 0.2, 3.0, r, Tape::log));
    cases.push(unary("sqrt", 0.2, 3.0, r, Tape::sqrt));
    cases.push(unary("cosh", -2.0, 2.0, r, Tape::cosh));
    cases.push(unary("sinh", -2.0, 2.0, r, Tape::sinh));
    cases.push(unary("sinhc (series branch)", -5e-3, 5e-3, r, Tape::sinhc));
    cases.push(unary("sinhc", 0.05, 4.0, r, Tape::sinhc));
    cases.push(unary("acosh_clamped", 1.2, 4.0, r, Tape::acosh_clamped));

    let mut out = Vec::new();
    let mut wrng = stream(seed, 11);
    for (name, inputs, f) in &cases {
        out.push(check_fn(name, inputs, f.as_ref(), &mut wrng)?);
    }
    Ok(out)
}

/// Checks of the geometry composed from primitives at curvature radii 1
/// and 100. Points are produced from Euclidean leaves by `exp_origin` or
/// `proj_from_origin`, so every perturbation stays on the manifold.
pub fn geometry_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut rng = stream(seed, 20);
    for radius in [1.0, 100.0] {
        let c = Curvature::from_radius(radius)?;
        let s = radius;
        let r = &mut rng;
        let cases: Vec<(String, Vec<Tensor>, Box<GraphFn<'static>>)> = vec![
            (
                format!("exp_map at origin (R={radius})"),
                vec![uniform(r, 3, 3, -s, s)],
                Box::new(move |t, v| diffgeo::exp_origin(t, c, v[0])),
            ),
            (
                format!("exp_map at a point (R={radius})"),
                vec![uniform(r, 2, 3, -s, s), uniform(r, 2, 3, -s, s)],
                Box::new(move |t, v| {
                    let base = diffgeo::exp_origin(t, c, v[0])?;
                    let o = diffgeo::origin_rows(t, c, 2, 3)?;
                    let u = diffgeo::lift(t, v[1])?;
                    let vt = diffgeo::parallel_transport(t, c, o, base, u)?;
                    let n = diffgeo::inner(t, vt, vt)?;
                    let n = t.add_scalar(n, diffgeo::NORM_EPS2);
                    let n = t.sqrt(n);
                    diffgeo::exp_map_with_norm(t, c, base, vt, n)
                }),
            ),
            (
                format!("log_map (R={radius})"),
                vec![uniform(r, 2, 3, -s, s), uniform(r, 2, 3, -s, s)],
                Box::new(move |t, v| {
                    let a = diffgeo::exp_origin(t, c, v[0])?;
                    let b = diffgeo::exp_origin(t, c, v[1])?;
                    Ok(diffgeo::log_map(t, c, a, b)?.0)
                }),
            ),
            (
                format!("parallel_transport (R={radius})"),
                vec![
                    uniform(r, 2, 3, -s, s),
                    uniform(r, 2, 3, -s, s),
                    uniform(r, 2, 3, -1.0, 1.0),
                ],
                Box::new(move |t, v| {
                    let a = diffgeo::exp_origin(t, c, v[0])?;
                    let b = diffgeo::exp_origin(t, c, v[1])?;
                    let o = diffgeo::origin_rows(t, c, 2, 3)?;
                    let u = diffgeo::lift(t, v[2])?;
                    let at_a = diffgeo::parallel_transport(t, c, o, a, u)?;
                    diffgeo::parallel_transport(t, c, a, b, at_a)
                }),
            ),
            (
                format!("proj (R={radius})"),
                vec![uniform(r, 2, 2, -s, s), uniform(r, 2, 2, -s, s)],
                Box::new(move |t, v| {
                    let m = diffgeo::exp_origin(t, c, v[0])?;
                    diffgeo::proj_from_origin(t, c, m, v[1])
                }),
            ),
            (
                format!("distance (R={radius})"),
                vec![uniform(r, 3, 2, -s, s), uniform(r, 3, 2, -s, s)],
                Box::new(move |t, v| {
                    let a = diffgeo::exp_origin(t, c, v[0])?;
                    let b = diffgeo::exp_origin(t, c, v[1])?;
                    diffgeo::distance(t, c, a, b)
                }),
            ),
            (
                format!("log_density (R={radius})"),
                vec![uniform(r, 2, 3, -s, s), uniform(r, 2, 3, -s, s)],
                Box::new(move |t, v| {
                    let mean = diffgeo::exp_origin(t, c, v[0])?;
                    let z = diffgeo::proj_from_origin(t, c, mean, v[1])?;
                    let m2 = diffgeo::exp_origin(t, c, v[1])?;
                    let a = diffgeo::log_density(t, c, z, mean, &[1.0, 0.7, 1.3])?;
                    let b = diffgeo::log_density(t, c, z, m2, &[1.0, 0.7, 1.3])?;
                    t.add(a, b)
                }),
            ),
        ];
        let mut wrng = stream(seed, 21);
        for (name, inputs, f) in &cases {
            out.push(check_fn(name, inputs, f.as_ref(), &mut wrng)?);
        }
    }
    Ok(out)
}

/// Tiny model used by the end-to-end loss check.
pub fn tiny_model(geometry: Geometry, radius: f64, seed: u64) -> Result<Model> {
    let cfg = ModelConfig {
        latent: LatentConfig {
            dp: 2,
            dt: 2,
            geometry,
            radius,
            n_pitch: 3,
            n_timbre: 3,
        },
        n_mel: 3,
        n_frames: 2,
        hidden: vec![5],
        decoder_input: DecoderInput::Ambient,
    };
    Model::new(cfg, &mut seeded(seed))
}

/// Gradient of the total loss with respect to every parameter of a tiny
/// two-example model, noise held fixed.
pub fn loss_check(geometry: Geometry, radius: f64, seed: u64) -> Result<CheckResult> {
    let mut model = tiny_model(geometry, radius, seed)?;
    let mut r = stream(seed, 30);
    let batch = Batch {
        x: (0..12).map(|_| r.random_range(-1.5..1.5)).collect(),
        pitch: vec![0, 2],
        timbre: vec![1, 2],
    };
    let noise_seed = seed.wrapping_add(31);
    let loss_of = |m: &Model| -> Result<f64> {
        let mut t = Tape::new();
        let g = loss_graph(m, &mut t, &batch, 1, &mut seeded(noise_seed))?;
        t.scalar(g.total)
    };
    let mut tape = Tape::new();
    let g = loss_graph(&model, &mut tape, &batch, 1, &mut seeded(noise_seed))?;
    model.params_mut().zero_grad();
    tape.backward(g.total, model.params_mut())?;
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    let mut partials = 0;
    for name in &names {
        let analytic = model
            .params()
            .grad(name)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; model.params().get(name).map_or(0, Tensor::len)]);
        for (i, &a) in analytic.iter().enumerate() {
            let x0 = model.params().get(name).expect("listed").data()[i];
            model.params_mut().get_mut(name).expect("listed").data_mut()[i] = x0 + STEP;
            let up = loss_of(&model)?;
            model.params_mut().get_mut(name).expect("listed").data_mut()[i] = x0 - STEP;
            let down = loss_of(&model)?;
            model.params_mut().get_mut(name).expect("listed").data_mut()[i] = x0;
            worst = worst.max(rel_error(a, (up - down) / (2.0 * STEP)));
            partials += 1;
        }
    }
    let label = match geometry {
        Geometry::Euclidean => "total loss (euclidean)".to_string(),
        Geometry::Hyperbolic => format!("total loss (hyperbolic R={radius})"),
    };
    Ok(CheckResult {
        name: label,
        max_rel_error: worst,
        partials,
    })
}

/// Every primitive, the composed geometry and the end-to-end loss.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = primitive_checks(seed)?;
    out.extend(geometry_checks(seed)?);
    out.push(loss_check(Geometry::Euclidean, 1.0, seed)?);
    for radius in [1.0, 100.0] {
        out.push(loss_check(Geometry::Hyperbolic, radius, seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for r in run_suite(1).unwrap() {
            assert!(r.passed(), "{}: {:.3e}", r.name, r.max_rel_error);
            assert!(r.partials > 0);
        }
    }

    #[test]
    fn primitives_agree_to_one_part_per_million() {
        for seed in [2, 3] {
            for r in primitive_checks(seed).unwrap() {
                assert!(r.max_rel_error < 1e-6, "{}: {:.3e}", r.name, r.max_rel_error);
            }
        }
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // A function whose recorded gradient ignores the second input.
        let f = |t: &mut Tape, v: &[Var]| {
            let c = Tensor::scalar(t.value(v[1])[0]);
            let k = t.constant(&c);
            t.mul(v[0], k)
        };
        let inputs = [Tensor::scalar(2.0), Tensor::scalar(3.0)];
        let r = check_fn("broken", &inputs, &f, &mut seeded(0)).unwrap();
        assert!(!r.passed());
    }
}
