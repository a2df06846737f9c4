//! The dual-latent VAE: pitch and timbre encoders, decoder, pitch classifier
//! and per-label priors, over either a Euclidean or a hyperbolic timbre space.
//!
//! The networks are fully connected over the flattened mel input. Each hidden
//! layer is `Linear -> LayerNorm (with gain and bias) -> ReLU`.
//!
//! Graph-level methods (`*_graph`) record onto a [`Tape`] and are what the loss
//! is built from. The plain methods evaluate the same graphs on constants and
//! return `f64` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffgeo;
use crate::error::{dim_err, domain_err, Error, Result};
use crate::hypergauss::{self, WrappedGaussianParams};
use crate::lorentz::{self, lift_to_tangent, Curvature, ManifoldPoint};
use crate::tensor::{read_params, write_params, xavier_init, ParamStore, Tape, Tensor, Var};

/// Standard deviation of every pitch prior, per axis.
pub const PITCH_PRIOR_SIGMA: f64 = 0.135_335_283_236_612_7; // e^-2
/// Standard deviation of every timbre prior, per axis.
pub const TIMBRE_PRIOR_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    Euclidean,
    Hyperbolic,
}

impl std::str::FromStr for Geometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "hyperbolic" => Ok(Self::Hyperbolic),
            _ => Err(Error::Config(format!("unknown geometry '{s}'"))),
        }
    }
}

impl std::fmt::Display for Geometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Euclidean => "euclidean",
            Self::Hyperbolic => "hyperbolic",
        })
    }
}

/// How a hyperbolic timbre latent is presented to the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderInput {
    /// The `D_t + 1` ambient coordinates, shifted by the origin so that the
    /// leading coordinate is near zero instead of near `R`.
    #[default]
    Ambient,
    /// The `D_t` tangent coordinates at the origin, `log_o(z)` without its
    /// zero first entry.
    Tangent,
}

impl std::str::FromStr for DecoderInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ambient" => Ok(Self::Ambient),
            "tangent" => Ok(Self::Tangent),
            _ => Err(Error::Config(format!("unknown decoder input '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentConfig {
    pub dp: usize,
    pub dt: usize,
    pub geometry: Geometry,
    /// Curvature radius; ignored by the Euclidean geometry.
    pub radius: f64,
    pub n_pitch: usize,
    pub n_timbre: usize,
}

impl LatentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dp == 0 || self.dt == 0 {
            return Err(Error::Config("latent dimensions must be at least 1".into()));
        }
        if self.n_pitch == 0 || self.n_timbre == 0 {
            return Err(Error::Config("label sets must be nonempty".into()));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config(format!("radius must be positive, got {}", self.radius)));
        }
        Ok(())
    }

    /// The curvature of the hyperbolic timbre space, `None` for Euclidean.
    pub fn curvature(&self) -> Option<Curvature> {
        match self.geometry {
            Geometry::Euclidean => None,
            Geometry::Hyperbolic => Curvature::from_radius(self.radius).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent: LatentConfig,
    pub n_mel: usize,
    pub n_frames: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub decoder_input: DecoderInput,
}

impl ModelConfig {
    /// Paper-default hidden sizes for the fully connected backbone.
    pub const DEFAULT_HIDDEN: [usize; 2] = [512, 256];

    pub fn new(latent: LatentConfig, n_mel: usize, n_frames: usize) -> Self {
        Self {
            latent,
            n_mel,
            n_frames,
            hidden: Self::DEFAULT_HIDDEN.to_vec(),
            decoder_input: DecoderInput::Ambient,
        }
    }

    pub fn input_len(&self) -> usize {
        self.n_mel * self.n_frames
    }

    /// Width of the timbre part of the decoder input.
    pub fn timbre_input_len(&self) -> usize {
        match (self.latent.geometry, self.decoder_input) {
            (Geometry::Hyperbolic, DecoderInput::Ambient) => self.latent.dt + 1,
            _ => self.latent.dt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.latent.validate()?;
        if self.input_len() == 0 {
            return Err(Error::Config("input shape must be nonempty".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden sizes must be a nonempty list of positive sizes".into()));
        }
        Ok(())
    }
}

/// Encoder outputs for one example. The timbre mean is given by its tangent
/// coordinates `xi_t` at the origin in the hyperbolic geometry, and directly
/// by `xi_t` in the Euclidean one.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub xi_p: Vec<f64>,
    pub log_eta_p: Vec<f64>,
    pub xi_t: Vec<f64>,
    pub log_eta_t: Vec<f64>,
}

/// A point of the timbre space.
#[derive(Debug, Clone, PartialEq)]
pub enum TimbreLatent {
    Euclidean(Vec<f64>),
    Hyperbolic(ManifoldPoint),
}

impl TimbreLatent {
    /// Ambient coordinates (`D_t + 1` for hyperbolic, `D_t` for Euclidean).
    pub fn coords(&self) -> &[f64] {
        match self {
            Self::Euclidean(v) => v,
            Self::Hyperbolic(p) => p.coords(),
        }
    }

    /// Geodesic distance in the latent geometry.
    pub fn distance(&self, other: &TimbreLatent) -> Result<f64> {
        match (self, other) {
            (Self::Euclidean(a), Self::Euclidean(b)) => {
                if a.len() != b.len() {
                    return dim_err("euclidean latents differ in length");
                }
                Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
            }
            (Self::Hyperbolic(a), Self::Hyperbolic(b)) => lorentz::distance(a, b),
            _ => Err(Error::Contract("latents of different geometries".into())),
        }
    }

    /// Coordinates in the tangent space at the origin (identity for Euclidean).
    pub fn tangent_at_origin(&self) -> Result<Vec<f64>> {
        match self {
            Self::Euclidean(v) => Ok(v.clone()),
            Self::Hyperbolic(p) => {
                let o = lorentz::origin(p.curvature(), p.dim());
                Ok(lorentz::log_map(&o, p)?.coords()[1..].to_vec())
            }
        }
    }
}

/// Tape handles for a batch of timbre posteriors.
#[derive(Debug, Clone, Copy)]
pub struct TimbreGraph {
    /// `[B, D_t]` raw encoder output.
    pub xi: Var,
    /// `[B, D_t]` or `[B, D_t + 1]` posterior mean in the latent geometry.
    pub mean: Var,
    pub log_eta: Var,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

const PITCH_ENC: &str = "pitch_enc";
const TIMBRE_ENC: &str = "timbre_enc";
const DECODER: &str = "dec";
const PITCH_CLF_W: &str = "pitch_clf.w";
const PITCH_CLF_B: &str = "pitch_clf.b";
const PITCH_PRIOR: &str = "prior.pitch_means";
const TIMBRE_PRIOR: &str = "prior.timbre_means";

fn mlp_layout(prefix: &str, widths: &[usize], out: &mut Vec<(String, Vec<usize>, Init)>) {
    let last = widths.len() - 1;
    for i in 0..last {
        let (a, b) = (widths[i], widths[i + 1]);
        let tag = if i + 1 == last { "out".to_string() } else { i.to_string() };
        out.push((format!("{prefix}.{tag}.w"), vec![a, b], Init::Xavier));
        out.push((format!("{prefix}.{tag}.b"), vec![1, b], Init::Zeros));
        if i + 1 != last {
            out.push((format!("{prefix}.{tag}.ln_g"), vec![1, b], Init::Ones));
            out.push((format!("{prefix}.{tag}.ln_b"), vec![1, b], Init::Zeros));
        }
    }
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let l = &cfg.latent;
    let mut out = Vec::new();
    let mut enc = vec![cfg.input_len()];
    enc.extend(&cfg.hidden);
    let mut pitch = enc.clone();
    pitch.push(2 * l.dp);
    mlp_layout(PITCH_ENC, &pitch, &mut out);
    let mut timbre = enc;
    timbre.push(2 * l.dt);
    mlp_layout(TIMBRE_ENC, &timbre, &mut out);
    let mut dec = vec![l.dp + cfg.timbre_input_len()];
    dec.extend(cfg.hidden.iter().rev());
    dec.push(cfg.input_len());
    mlp_layout(DECODER, &dec, &mut out);
    out.push((PITCH_CLF_W.into(), vec![l.dp, l.n_pitch], Init::Xavier));
    out.push((PITCH_CLF_B.into(), vec![1, l.n_pitch], Init::Zeros));
    out.push((PITCH_PRIOR.into(), vec![l.n_pitch, l.dp], Init::Xavier));
    out.push((TIMBRE_PRIOR.into(), vec![l.n_timbre, l.dt], Init::Xavier));
    out
}

/// Sidecar path holding the JSON model configuration next to a parameter file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Model {
    /// Xavier weights, zero biases, unit layer-norm gains.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, init) in layout(&config) {
            let t = match init {
                Init::Xavier => xavier_init(&shape, rng)?,
                Init::Zeros => Tensor::zeros(shape)?,
                Init::Ones => {
                    let n = shape.iter().product();
                    Tensor::new(shape, vec![1.0; n])?
                }
            };
            params.insert(name, t)?;
        }
        Ok(Self { config, params })
    }

    /// Wraps an existing parameter store after checking it has exactly the
    /// layout `config` requires.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return dim_err(format!(
                "parameter file has {} tensors, configuration needs {}",
                params.len(),
                expected.len()
            ));
        }
        for ((name, shape, _), (got_name, t)) in expected.iter().zip(params.iter()) {
            if name != got_name || shape.as_slice() != t.shape() {
                return dim_err(format!(
                    "expected parameter '{name}' {shape:?}, found '{got_name}' {:?}",
                    t.shape()
                ));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn curvature(&self) -> Option<Curvature> {
        self.config.latent.curvature()
    }

    /// Writes the `HLT1` parameter file and its JSON configuration sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_params(&self.params, &mut w)?;
        w.flush()?;
        let json = serde_json::to_string_pretty(&self.config)
            .map_err(|e| Error::Config(format!("cannot encode model config: {e}")))?;
        std::fs::write(sidecar_path(path), json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(sidecar_path(path))?;
        let config: ModelConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad model config sidecar: {e}")))?;
        let params = read_params(&mut BufReader::new(File::open(path)?))?;
        Self::from_parts(config, params)
    }

    fn mlp(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..self.config.hidden.len() {
            let w = tape.param(&self.params, &format!("{prefix}.{i}.w"))?;
            let b = tape.param(&self.params, &format!("{prefix}.{i}.b"))?;
            let g = tape.param(&self.params, &format!("{prefix}.{i}.ln_g"))?;
            let beta = tape.param(&self.params, &format!("{prefix}.{i}.ln_b"))?;
            let lin = tape.matmul(h, w)?;
            let lin = tape.add(lin, b)?;
            let n = tape.layer_norm(lin);
            let n = tape.mul(n, g)?;
            let n = tape.add(n, beta)?;
            h = tape.relu(n);
        }
        let w = tape.param(&self.params, &format!("{prefix}.out.w"))?;
        let b = tape.param(&self.params, &format!("{prefix}.out.b"))?;
        let out = tape.matmul(h, w)?;
        tape.add(out, b)
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let n = self.config.input_len();
        if tape.dims(x).1 != n {
            return dim_err(format!(
                "input has {} columns, model expects {n}",
                tape.dims(x).1
            ));
        }
        Ok(())
    }

    /// `(xi_p, log_eta_p)`, each `[B, D_p]`.
    pub fn encode_pitch_graph(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        self.check_input(tape, x)?;
        let dp = self.config.latent.dp;
        let out = self.mlp(tape, PITCH_ENC, x)?;
        Ok((tape.slice_cols(out, 0, dp)?, tape.slice_cols(out, dp, 2 * dp)?))
    }

    pub fn encode_timbre_graph(&self, tape: &mut Tape, x: Var) -> Result<TimbreGraph> {
        self.check_input(tape, x)?;
        let dt = self.config.latent.dt;
        let out = self.mlp(tape, TIMBRE_ENC, x)?;
        let xi = tape.slice_cols(out, 0, dt)?;
        let log_eta = tape.slice_cols(out, dt, 2 * dt)?;
        let mean = self.timbre_point_graph(tape, xi)?;
        Ok(TimbreGraph { xi, mean, log_eta })
    }

    /// Maps tangent parameters at the origin into the timbre space.
    fn timbre_point_graph(&self, tape: &mut Tape, xi: Var) -> Result<Var> {
        match self.curvature() {
            None => Ok(xi),
            Some(c) => diffgeo::exp_origin(tape, c, xi),
        }
    }

    /// Pitch prior means, `[|P|, D_p]`.
    pub fn pitch_prior_graph(&self, tape: &mut Tape) -> Result<Var> {
        tape.param(&self.params, PITCH_PRIOR)
    }

    /// Timbre prior means in the latent geometry, `[|T|, D_t (+1)]`.
    pub fn timbre_prior_graph(&self, tape: &mut Tape) -> Result<Var> {
        let t = tape.param(&self.params, TIMBRE_PRIOR)?;
        self.timbre_point_graph(tape, t)
    }

    /// `xi + eps * exp(log_eta)` with `eps` given as `[B, D]` row-major.
    pub fn reparameterize_graph(
        &self,
        tape: &mut Tape,
        xi: Var,
        log_eta: Var,
        eps: &[f64],
    ) -> Result<Var> {
        let (r, c) = tape.dims(xi);
        let e = tape.constant_matrix(r, c, eps.to_vec())?;
        let eta = tape.exp(log_eta);
        let w = tape.mul(e, eta)?;
        tape.add(xi, w)
    }

    /// Timbre sample `(z, w)`: `w = eps * eta` and `z = proj_mean([0; w])` in
    /// the hyperbolic geometry, `z = mean + w` in the Euclidean one.
    pub fn reparameterize_timbre_graph(
        &self,
        tape: &mut Tape,
        post: &TimbreGraph,
        eps: &[f64],
    ) -> Result<(Var, Var)> {
        let (r, c) = tape.dims(post.log_eta);
        let e = tape.constant_matrix(r, c, eps.to_vec())?;
        let eta = tape.exp(post.log_eta);
        let w = tape.mul(e, eta)?;
        let z = match self.curvature() {
            None => tape.add(post.mean, w)?,
            Some(curv) => diffgeo::proj_from_origin(tape, curv, post.mean, w)?,
        };
        Ok((z, w))
    }

    /// Reconstruction `[B, n_mel * n_frames]` from `z_p [B, D_p]` and the
    /// timbre latent in ambient coordinates.
    pub fn decode_graph(&self, tape: &mut Tape, z_p: Var, z_t: Var) -> Result<Var> {
        let l = &self.config.latent;
        let t_in = match (self.curvature(), self.config.decoder_input) {
            (Some(c), DecoderInput::Tangent) => diffgeo::log_origin_coords(tape, c, z_t)?,
            (Some(c), DecoderInput::Ambient) => {
                let (rows, _) = tape.dims(z_t);
                let o = diffgeo::origin_rows(tape, c, rows, l.dt)?;
                tape.sub(z_t, o)?
            }
            (None, _) => z_t,
        };
        if tape.dims(z_p).1 != l.dp || tape.dims(t_in).1 != self.config.timbre_input_len() {
            return dim_err("decode: latent widths do not match the configuration");
        }
        let input = tape.concat(&[z_p, t_in])?;
        self.mlp(tape, DECODER, input)
    }

    /// Unnormalized pitch-class scores, `[B, |P|]`.
    pub fn pitch_logits_graph(&self, tape: &mut Tape, z_p: Var) -> Result<Var> {
        let w = tape.param(&self.params, PITCH_CLF_W)?;
        let b = tape.param(&self.params, PITCH_CLF_B)?;
        let s = tape.matmul(z_p, w)?;
        tape.add(s, b)
    }

    /// `log p(z | y_t = j)` for every row of `z` and every timbre label,
    /// `[B, |T|]`.
    pub fn timbre_log_likelihood_graph(&self, tape: &mut Tape, z: Var, priors: Var) -> Result<Var> {
        let n_t = self.config.latent.n_timbre;
        let dt = self.config.latent.dt;
        let (b, _) = tape.dims(z);
        let z_rep = tape.gather_rows(z, &(0..b * n_t).map(|i| i / n_t).collect::<Vec<_>>())?;
        let mu_rep = tape.gather_rows(priors, &(0..b * n_t).map(|i| i % n_t).collect::<Vec<_>>())?;
        let sigma = vec![TIMBRE_PRIOR_SIGMA; dt];
        let ll = match self.curvature() {
            None => {
                let diff = tape.sub(z_rep, mu_rep)?;
                diffgeo::log_normal_rows(tape, diff, &sigma)?
            }
            Some(c) => diffgeo::log_density(tape, c, z_rep, mu_rep, &sigma)?,
        };
        tape.reshape(ll, b, n_t)
    }

    fn input_var(&self, tape: &mut Tape, x: &[f64]) -> Result<Var> {
        let n = self.config.input_len();
        if x.is_empty() || x.len() % n != 0 {
            return dim_err(format!("input of length {} is not a multiple of {n}", x.len()));
        }
        tape.constant_matrix(x.len() / n, n, x.to_vec())
    }

    /// Encoder outputs for each row of `x` (row-major, `input_len` columns).
    pub fn encode(&self, x: &[f64]) -> Result<Vec<PosteriorParams>> {
        let mut tape = Tape::new();
        let xv = self.input_var(&mut tape, x)?;
        let (xi_p, le_p) = self.encode_pitch_graph(&mut tape, xv)?;
        let t = self.encode_timbre_graph(&mut tape, xv)?;
        let (dp, dt) = (self.config.latent.dp, self.config.latent.dt);
        let rows = |v: Var, d: usize| -> Vec<Vec<f64>> {
            tape.value(v).chunks(d).map(<[f64]>::to_vec).collect()
        };
        let (a, b, c, d) = (rows(xi_p, dp), rows(le_p, dp), rows(t.xi, dt), rows(t.log_eta, dt));
        Ok(a.into_iter()
            .zip(b)
            .zip(c.into_iter().zip(d))
            .map(|((xi_p, log_eta_p), (xi_t, log_eta_t))| PosteriorParams {
                xi_p,
                log_eta_p,
                xi_t,
                log_eta_t,
            })
            .collect())
    }

    /// `(xi_p, log_eta_p)` for a single flattened mel input.
    pub fn encode_pitch(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.config.input_len();
        if x.len() != n {
            return dim_err(format!("input has {} values, model expects {n}", x.len()));
        }
        let p = self.encode(x)?.remove(0);
        Ok((p.xi_p, p.log_eta_p))
    }

    /// `(mean, log_eta_t)` for a single flattened mel input.
    pub fn encode_timbre(&self, x: &[f64]) -> Result<(TimbreLatent, Vec<f64>)> {
        let n = self.config.input_len();
        if x.len() != n {
            return dim_err(format!("input has {} values, model expects {n}", x.len()));
        }
        let p = self.encode(x)?.remove(0);
        Ok((self.timbre_point(&p.xi_t)?, p.log_eta_t))
    }

    /// The timbre-space point with tangent parameters `xi` at the origin.
    pub fn timbre_point(&self, xi: &[f64]) -> Result<TimbreLatent> {
        if xi.len() != self.config.latent.dt {
            return dim_err("timbre parameter has the wrong length");
        }
        Ok(match self.curvature() {
            None => TimbreLatent::Euclidean(xi.to_vec()),
            Some(c) => TimbreLatent::Hyperbolic(lorentz::exp_map(&lift_to_tangent(xi, c))),
        })
    }

    /// `z_p = xi_p + eps * eta_p`.
    pub fn reparameterize_pitch<R: Rng + ?Sized>(
        &self,
        post: &PosteriorParams,
        rng: &mut R,
    ) -> Vec<f64> {
        post.xi_p
            .iter()
            .zip(&post.log_eta_p)
            .map(|(x, le)| x + rng.sample::<f64, _>(StandardNormal) * le.exp())
            .collect()
    }

    /// `(z_t, w)` drawn from the timbre posterior.
    pub fn reparameterize_timbre<R: Rng + ?Sized>(
        &self,
        post: &PosteriorParams,
        rng: &mut R,
    ) -> Result<(TimbreLatent, Vec<f64>)> {
        let w: Vec<f64> = post
            .log_eta_t
            .iter()
            .map(|le| rng.sample::<f64, _>(StandardNormal) * le.exp())
            .collect();
        let z = match self.curvature() {
            None => TimbreLatent::Euclidean(post.xi_t.iter().zip(&w).map(|(a, b)| a + b).collect()),
            Some(c) => {
                let mean = lorentz::exp_map(&lift_to_tangent(&post.xi_t, c));
                TimbreLatent::Hyperbolic(lorentz::proj(&mean, &lift_to_tangent(&w, c))?)
            }
        };
        Ok((z, w))
    }

    fn latent_vars(&self, tape: &mut Tape, z_p: &[f64], z_t: &TimbreLatent) -> Result<(Var, Var)> {
        let l = &self.config.latent;
        let expect_t = match self.config.latent.geometry {
            Geometry::Euclidean => l.dt,
            Geometry::Hyperbolic => l.dt + 1,
        };
        let geometry_ok = matches!(
            (z_t, l.geometry),
            (TimbreLatent::Euclidean(_), Geometry::Euclidean)
                | (TimbreLatent::Hyperbolic(_), Geometry::Hyperbolic)
        );
        if z_p.len() != l.dp || z_t.coords().len() != expect_t || !geometry_ok {
            return dim_err("latents do not match the model configuration");
        }
        let p = tape.constant_matrix(1, l.dp, z_p.to_vec())?;
        let t = tape.constant_matrix(1, expect_t, z_t.coords().to_vec())?;
        Ok((p, t))
    }

    /// Flattened mel reconstruction from a pitch and a timbre latent.
    pub fn decode(&self, z_p: &[f64], z_t: &TimbreLatent) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (p, t) = self.latent_vars(&mut tape, z_p, z_t)?;
        let out = self.decode_graph(&mut tape, p, t)?;
        Ok(tape.value(out).to_vec())
    }

    /// Pitch class probabilities for a pitch latent.
    pub fn classify_pitch(&self, z_p: &[f64]) -> Result<Vec<f64>> {
        if z_p.len() != self.config.latent.dp {
            return dim_err("pitch latent has the wrong length");
        }
        let mut tape = Tape::new();
        let p = tape.constant_matrix(1, z_p.len(), z_p.to_vec())?;
        let logits = self.pitch_logits_graph(&mut tape, p)?;
        Ok(hypergauss::softmax(tape.value(logits)))
    }

    pub fn pitch_prior_means(&self) -> Vec<Vec<f64>> {
        let t = self.params.get(PITCH_PRIOR).expect("layout has pitch prior");
        t.data().chunks(self.config.latent.dp).map(<[f64]>::to_vec).collect()
    }

    /// Tangent parameters of the timbre prior means, `|T|` rows of `D_t`.
    pub fn timbre_prior_tangents(&self) -> Vec<Vec<f64>> {
        let t = self.params.get(TIMBRE_PRIOR).expect("layout has timbre prior");
        t.data().chunks(self.config.latent.dt).map(<[f64]>::to_vec).collect()
    }

    pub fn timbre_prior_means(&self) -> Result<Vec<TimbreLatent>> {
        self.timbre_prior_tangents().iter().map(|xi| self.timbre_point(xi)).collect()
    }

    /// Draws `z_p` from the prior of pitch label `pitch` and `z_t` from the
    /// prior of timbre label `timbre`.
    pub fn sample_priors<R: Rng + ?Sized>(
        &self,
        pitch: usize,
        timbre: usize,
        rng: &mut R,
    ) -> Result<(Vec<f64>, TimbreLatent)> {
        let l = &self.config.latent;
        if pitch >= l.n_pitch || timbre >= l.n_timbre {
            return domain_err(format!(
                "labels ({pitch}, {timbre}) out of range 0..{} and 0..{}",
                l.n_pitch, l.n_timbre
            ));
        }
        let z_p = self.pitch_prior_means()[pitch]
            .iter()
            .map(|m| m + PITCH_PRIOR_SIGMA * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let sigma = vec![TIMBRE_PRIOR_SIGMA; l.dt];
        let z_t = match self.timbre_point(&self.timbre_prior_tangents()[timbre])? {
            TimbreLatent::Euclidean(m) => TimbreLatent::Euclidean(
                m.iter()
                    .zip(&sigma)
                    .map(|(a, s)| a + s * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            ),
            TimbreLatent::Hyperbolic(m) => {
                let params = WrappedGaussianParams::new(m, sigma)?;
                TimbreLatent::Hyperbolic(hypergauss::sample(&params, rng).0)
            }
        };
        Ok((z_p, z_t))
    }

    /// `p(y_t = j | z)` under the timbre priors and a uniform class prior.
    pub fn timbre_label_posterior(&self, z: &TimbreLatent) -> Result<Vec<f64>> {
        let means = self.timbre_prior_means()?;
        let dt = self.config.latent.dt;
        let sigma = vec![TIMBRE_PRIOR_SIGMA; dt];
        match z {
            TimbreLatent::Hyperbolic(p) => {
                let priors = means
                    .into_iter()
                    .map(|m| match m {
                        TimbreLatent::Hyperbolic(m) => WrappedGaussianParams::new(m, sigma.clone()),
                        TimbreLatent::Euclidean(_) => domain_err("geometry mismatch"),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let uniform = vec![1.0 / priors.len() as f64; priors.len()];
                hypergauss::timbre_posterior(p, &priors, &uniform)
            }
            TimbreLatent::Euclidean(v) => {
                if v.len() != dt || self.curvature().is_some() {
                    return dim_err("latent does not match the model configuration");
                }
                let logits: Vec<f64> = means
                    .iter()
                    .map(|m| {
                        let diff: Vec<f64> = v.iter().zip(m.coords()).map(|(a, b)| a - b).collect();
                        hypergauss::log_normal_diag(&diff, &sigma)
                    })
                    .collect();
                Ok(hypergauss::softmax(&logits))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    pub(crate) fn tiny_config(geometry: Geometry, radius: f64) -> ModelConfig {
        ModelConfig {
            latent: LatentConfig {
                dp: 3,
                dt: 2,
                geometry,
                radius,
                n_pitch: 4,
                n_timbre: 3,
            },
            n_mel: 4,
            n_frames: 3,
            hidden: vec![6, 5],
            decoder_input: DecoderInput::Ambient,
        }
    }

    fn random_input(n: usize, seed: u64) -> Vec<f64> {
        let mut r = seeded(seed);
        (0..n).map(|_| r.random_range(-2.0..2.0)).collect()
    }

    fn zero_param(m: &mut Model, name: &str) {
        m.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }

    #[test]
    fn zero_final_layer_gives_zero_pitch_posterior() {
        let mut m = Model::new(tiny_config(Geometry::Hyperbolic, 1.0), &mut seeded(1)).unwrap();
        zero_param(&mut m, "pitch_enc.out.w");
        let (xi, le) = m.encode_pitch(&[0.0; 12]).unwrap();
        assert_eq!(xi, vec![0.0; 3]);
        assert_eq!(le, vec![0.0; 3]);
        assert!(m.encode_pitch(&[0.0; 11]).is_err());
    }

    #[test]
    fn zero_timbre_output_is_origin() {
        let mut m = Model::new(tiny_config(Geometry::Hyperbolic, 2.0), &mut seeded(1)).unwrap();
        zero_param(&mut m, "timbre_enc.out.w");
        let (mean, _) = m.encode_timbre(&random_input(12, 3)).unwrap();
        assert_eq!(mean.coords(), &[2.0, 0.0, 0.0]);
    }

    #[test]
    fn hyperbolic_mean_is_on_manifold_and_euclidean_mean_is_raw() {
        let hyp = Model::new(tiny_config(Geometry::Hyperbolic, 1.0), &mut seeded(5)).unwrap();
        let euc = Model::from_parts(
            tiny_config(Geometry::Euclidean, 1.0),
            {
                // Same weights apart from the decoder's first layer width.
                let e = Model::new(tiny_config(Geometry::Euclidean, 1.0), &mut seeded(5)).unwrap();
                let mut p = e.params().clone();
                for (name, t) in hyp.params().iter() {
                    if !name.starts_with("dec.") {
                        p.get_mut(name).unwrap().data_mut().copy_from_slice(t.data());
                    }
                }
                p
            },
        )
        .unwrap();
        for s in 0..20 {
            let x = random_input(12, s);
            let (mean, _) = hyp.encode_timbre(&x).unwrap();
            let TimbreLatent::Hyperbolic(p) = &mean else { panic!() };
            assert!(p.constraint_residual() < 1e-12);
            let raw = hyp.encode(&x).unwrap().remove(0).xi_t;
            let (emean, _) = euc.encode_timbre(&x).unwrap();
            assert_eq!(emean.coords(), raw.as_slice());
        }
    }

    #[test]
    fn pitch_reparameterization_moments() {
        let m = Model::new(tiny_config(Geometry::Euclidean, 1.0), &mut seeded(1)).unwrap();
        let post = PosteriorParams {
            xi_p: vec![1.5, -0.5, 3.0],
            log_eta_p: vec![0.0, (0.2f64).ln(), (2.0f64).ln()],
            xi_t: vec![0.0; 2],
            log_eta_t: vec![0.0; 2],
        };
        let n = 100_000;
        let mut rng = seeded(11);
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let z = m.reparameterize_pitch(&post, &mut rng);
            for i in 0..3 {
                sum[i] += z[i];
                sq[i] += z[i] * z[i];
            }
        }
        for i in 0..3 {
            let mean = sum[i] / n as f64;
            let std = (sq[i] / n as f64 - mean * mean).sqrt();
            let eta = post.log_eta_p[i].exp();
            assert!((mean - post.xi_p[i]).abs() < 0.02 * post.xi_p[i].abs().max(eta));
            assert!((std / eta - 1.0).abs() < 0.02, "{std} vs {eta}");
        }
        let zero_eta = PosteriorParams {
            log_eta_p: vec![-800.0; 3],
            ..post.clone()
        };
        assert_eq!(m.reparameterize_pitch(&zero_eta, &mut rng), post.xi_p);
    }

    #[test]
    fn timbre_sample_is_isometric_and_on_manifold() {
        let m = Model::new(tiny_config(Geometry::Hyperbolic, 1.0), &mut seeded(1)).unwrap();
        let mut rng = seeded(2);
        for s in 0..50 {
            let post = m.encode(&random_input(12, 100 + s)).unwrap().remove(0);
            let (z, w) = m.reparameterize_timbre(&post, &mut rng).unwrap();
            let mean = m.timbre_point(&post.xi_t).unwrap();
            let d = z.distance(&mean).unwrap();
            let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((d - wn).abs() < 1e-9 * wn.max(1.0), "{d} vs {wn}");
            let TimbreLatent::Hyperbolic(p) = z else { panic!() };
            assert!(p.constraint_residual() < 1e-9);
        }
        let post = PosteriorParams {
            xi_p: vec![0.0; 3],
            log_eta_p: vec![0.0; 3],
            xi_t: vec![0.3, -0.2],
            log_eta_t: vec![-800.0; 2],
        };
        let (z, _) = m.reparameterize_timbre(&post, &mut rng).unwrap();
        assert_eq!(z, m.timbre_point(&post.xi_t).unwrap());
    }

    #[test]
    fn decode_shape_and_determinism() {
        for geometry in [Geometry::Euclidean, Geometry::Hyperbolic] {
            let m = Model::new(tiny_config(geometry, 1.0), &mut seeded(1)).unwrap();
            let z_t = m.timbre_point(&[0.4, -0.1]).unwrap();
            let a = m.decode(&[0.1, 0.2, 0.3], &z_t).unwrap();
            assert_eq!(a.len(), 12);
            assert_eq!(a, m.decode(&[0.1, 0.2, 0.3], &z_t).unwrap());
            assert!(m.decode(&[0.1, 0.2], &z_t).is_err());
        }
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let mut m = Model::new(tiny_config(Geometry::Euclidean, 1.0), &mut seeded(1)).unwrap();
        zero_param(&mut m, "pitch_clf.w");
        let p = m.classify_pitch(&[1.0, -2.0, 3.0]).unwrap();
        assert!(p.iter().all(|x| (x - 0.25).abs() < 1e-15));
        let m = Model::new(tiny_config(Geometry::Euclidean, 1.0), &mut seeded(2)).unwrap();
        let p = m.classify_pitch(&[1.0, -2.0, 3.0]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_priors_give_uniform_label_posterior() {
        for geometry in [Geometry::Euclidean, Geometry::Hyperbolic] {
            let mut m = Model::new(tiny_config(geometry, 1.0), &mut seeded(1)).unwrap();
            m.params_mut().get_mut(TIMBRE_PRIOR).unwrap().data_mut().fill(0.25);
            let z = m.timbre_point(&[0.7, -1.1]).unwrap();
            let q = m.timbre_label_posterior(&z).unwrap();
            assert!(q.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn layout_is_unique_and_round_trips() {
        let m = Model::new(tiny_config(Geometry::Hyperbolic, 10.0), &mut seeded(9)).unwrap();
        let names: Vec<&str> = m.params().names().collect();
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hlt");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.config(), m.config());
        for ((a, ta), (b, tb)) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(a, b);
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn mismatched_layout_is_rejected() {
        let m = Model::new(tiny_config(Geometry::Hyperbolic, 1.0), &mut seeded(9)).unwrap();
        let res = Model::from_parts(tiny_config(Geometry::Euclidean, 1.0), m.params().clone());
        assert!(matches!(res, Err(Error::Dimension(_))));
    }
}
