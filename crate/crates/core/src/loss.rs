//! The training objective: ELBO terms, cross-entropies and the total loss.
//!
//! Every term is averaged over the batch. The expectation over timbre labels
//! in the timbre KL is an exact weighted sum over all labels; the KL itself is
//! a Monte-Carlo estimate from the reparameterized sample(s).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffgeo;
use crate::error::{dim_err, domain_err, Result};
use crate::model::{Model, TimbreGraph, PITCH_PRIOR_SIGMA};
use crate::tensor::{Tape, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Batch-averaged loss terms. `recon` is a log-likelihood (higher is
/// better); every other term is a cost.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_pitch: f64,
    pub kl_timbre_expected: f64,
    pub kl_category: f64,
    pub ce_pitch: f64,
    pub ce_timbre: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 7] = [
        "recon",
        "kl_pitch",
        "kl_timbre_expected",
        "kl_category",
        "ce_pitch",
        "ce_timbre",
        "total",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.recon,
            self.kl_pitch,
            self.kl_timbre_expected,
            self.kl_category,
            self.ce_pitch,
            self.ce_timbre,
            self.total,
        ]
    }

    /// The evidence lower bound.
    pub fn elbo(&self) -> f64 {
        self.recon - self.kl_pitch - self.kl_timbre_expected - self.kl_category
    }

    /// The ELBO without its pitch-KL term.
    pub fn elbo_without_pitch_kl(&self) -> f64 {
        self.recon - self.kl_timbre_expected - self.kl_category
    }

    /// `-(ELBO) + ce_pitch + ce_timbre` recomputed from the parts.
    pub fn recomputed_total(&self) -> f64 {
        -self.elbo() + self.ce_pitch + self.ce_timbre
    }

    /// Weighted running sum used to average breakdowns over batches.
    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.recon += weight * other.recon;
        self.kl_pitch += weight * other.kl_pitch;
        self.kl_timbre_expected += weight * other.kl_timbre_expected;
        self.kl_category += weight * other.kl_category;
        self.ce_pitch += weight * other.ce_pitch;
        self.ce_timbre += weight * other.ce_timbre;
        self.total += weight * other.total;
    }
}

/// A mini-batch: `x` is row-major `[len, input_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Vec<f64>,
    pub pitch: Vec<usize>,
    pub timbre: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.pitch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pitch.is_empty()
    }
}

/// Closed-form `KL(N(xi, diag(eta)^2) || N(mu, diag(sigma)^2))`.
pub fn kl_gaussian_diag(xi: &[f64], eta: &[f64], mu: &[f64], sigma: &[f64]) -> Result<f64> {
    let n = xi.len();
    if eta.len() != n || mu.len() != n || sigma.len() != n {
        return dim_err("kl_gaussian_diag: argument lengths differ");
    }
    if eta.iter().chain(sigma).any(|s| !(*s > 0.0)) {
        return domain_err("kl_gaussian_diag: scales must be positive");
    }
    let kl = (0..n)
        .map(|i| {
            (sigma[i] / eta[i]).ln() + (eta[i] * eta[i] + (xi[i] - mu[i]).powi(2))
                / (2.0 * sigma[i] * sigma[i])
                - 0.5
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// `KL(q || uniform) = sum_j q_j log(|T| q_j)` with `0 log 0 = 0`.
pub fn kl_categorical_uniform(q: &[f64]) -> f64 {
    let t = q.len() as f64;
    q.iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * (t * p).ln())
        .sum::<f64>()
        .max(0.0)
}

/// `q(y_t | X)` from a single posterior sample of the timbre latent.
pub fn q_timbre_label_sampled<R: Rng + ?Sized>(
    model: &Model,
    x: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let post = model.encode(x)?.remove(0);
    let (z, _) = model.reparameterize_timbre(&post, rng)?;
    model.timbre_label_posterior(&z)
}

/// `q(y_t | X)` evaluated at the posterior mean (MAP evaluation).
pub fn q_timbre_label_at_mean(model: &Model, x: &[f64]) -> Result<Vec<f64>> {
    let (mean, _) = model.encode_timbre(x)?;
    model.timbre_label_posterior(&mean)
}

/// The total loss as a tape variable, with the value of each term.
#[derive(Debug, Clone, Copy)]
pub struct LossGraph {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn one_hot(tape: &mut Tape, labels: &[usize], classes: usize) -> Result<Var> {
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        data[r * classes + l] = 1.0;
    }
    tape.constant_matrix(labels.len(), classes, data)
}

fn gaussian(rng: &mut (impl Rng + ?Sized), n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Records the loss of `batch` on `tape`, drawing `mc_samples` latent samples
/// per example from `rng`.
///
/// With `S = mc_samples`, every term is averaged over the `S` samples, and the
/// label posterior `q(y_t | X)` is the average of `p(y_t | z)` over them. All
/// pitch noise is drawn before all timbre noise, sample-major.
pub fn loss_graph<R: Rng + ?Sized>(
    model: &Model,
    tape: &mut Tape,
    batch: &Batch,
    mc_samples: usize,
    rng: &mut R,
) -> Result<LossGraph> {
    let cfg = model.config();
    let l = &cfg.latent;
    let b = batch.len();
    let s = mc_samples;
    if b == 0 || s == 0 {
        return domain_err("loss needs a nonempty batch and at least one sample");
    }
    if batch.timbre.len() != b || batch.x.len() != b * cfg.input_len() {
        return dim_err("batch arrays disagree in length");
    }
    if let Some(p) = batch.pitch.iter().find(|&&p| p >= l.n_pitch) {
        return domain_err(format!("pitch label {p} out of range 0..{}", l.n_pitch));
    }
    if let Some(t) = batch.timbre.iter().find(|&&t| t >= l.n_timbre) {
        return domain_err(format!("timbre label {t} out of range 0..{}", l.n_timbre));
    }
    let n = s * b;
    let eps_p = gaussian(rng, n * l.dp);
    let eps_t = gaussian(rng, n * l.dt);

    let x = tape.constant_matrix(b, cfg.input_len(), batch.x.clone())?;
    let (xi_p, le_p) = model.encode_pitch_graph(tape, x)?;
    let post_t = model.encode_timbre_graph(tape, x)?;

    let tile: Vec<usize> = (0..n).map(|i| i % b).collect();
    let rep = |tape: &mut Tape, v: Var| if s == 1 { Ok(v) } else { tape.gather_rows(v, &tile) };
    let x_n = rep(tape, x)?;
    let xi_p_n = rep(tape, xi_p)?;
    let le_p_n = rep(tape, le_p)?;
    let post_n = TimbreGraph {
        xi: rep(tape, post_t.xi)?,
        mean: rep(tape, post_t.mean)?,
        log_eta: rep(tape, post_t.log_eta)?,
    };
    let pitch_n: Vec<usize> = tile.iter().map(|&i| batch.pitch[i]).collect();

    let z_p = model.reparameterize_graph(tape, xi_p_n, le_p_n, &eps_p)?;
    let (z_t, w) = model.reparameterize_timbre_graph(tape, &post_n, &eps_t)?;

    // Reconstruction: -1/2 |X - X_hat|^2 per row.
    let x_hat = model.decode_graph(tape, z_p, z_t)?;
    let diff = tape.sub(x_hat, x_n)?;
    let sq = tape.square(diff)?;
    let sq = tape.sum_rows(sq);
    let recon_rows = tape.scale(sq, -0.5);
    let recon = tape.mean_all(recon_rows);

    // Closed-form pitch KL against the labelled prior.
    let priors_p = model.pitch_prior_graph(tape)?;
    let mu_p = tape.gather_rows(priors_p, &batch.pitch)?;
    let sigma2 = PITCH_PRIOR_SIGMA * PITCH_PRIOR_SIGMA;
    let eta2 = tape.scale(le_p, 2.0);
    let eta2 = tape.exp(eta2);
    let dmu = tape.sub(xi_p, mu_p)?;
    let dmu2 = tape.square(dmu)?;
    let quad = tape.add(eta2, dmu2)?;
    let quad = tape.scale(quad, 0.5 / sigma2);
    let neg_le = tape.neg(le_p);
    let kl_el = tape.add(quad, neg_le)?;
    let kl_el = tape.add_scalar(kl_el, PITCH_PRIOR_SIGMA.ln() - 0.5);
    let kl_p_rows = tape.sum_rows(kl_el);
    let kl_p_rows = tape.relu(kl_p_rows);
    let kl_pitch = tape.mean_all(kl_p_rows);

    // Pitch cross-entropy on the sampled pitch latent.
    let logits = model.pitch_logits_graph(tape, z_p)?;
    let logp = tape.log_softmax(logits);
    let oh_p = one_hot(tape, &pitch_n, l.n_pitch)?;
    let picked = tape.mul(logp, oh_p)?;
    let picked = tape.sum_rows(picked);
    let ce_p = tape.mean_all(picked);
    let ce_pitch = tape.neg(ce_p);

    // Timbre: log p_j(z) for every label, the label posterior, and log q(z).
    let priors_t = model.timbre_prior_graph(tape)?;
    let ll = model.timbre_log_likelihood_graph(tape, z_t, priors_t)?;
    let eps_sq: Vec<f64> = eps_t
        .chunks(l.dt)
        .map(|e| -0.5 * e.iter().map(|v| v * v).sum::<f64>() - 0.5 * l.dt as f64 * LN_2PI)
        .collect();
    let base = tape.constant_matrix(n, 1, eps_sq)?;
    let sum_le = tape.sum_rows(post_n.log_eta);
    let mut log_q = tape.sub(base, sum_le)?;
    if let Some(curv) = model.curvature() {
        if l.dt > 1 {
            let wn = diffgeo::euclid_norm(tape, w)?;
            let r = tape.scale(wn, curv.sqrt_neg_k());
            let shc = tape.sinhc(r);
            let lsh = tape.log(shc);
            let corr = tape.scale(lsh, l.dt as f64 - 1.0);
            log_q = tape.sub(log_q, corr)?;
        }
    }
    let kl_rows = tape.sub(log_q, ll)?;

    let (q, log_qy, kl_avg) = if s == 1 {
        (tape.softmax(ll), tape.log_softmax(ll), kl_rows)
    } else {
        let mut avg = vec![0.0; b * n];
        for (i, &src) in tile.iter().enumerate() {
            avg[src * n + i] = 1.0 / s as f64;
        }
        let a = tape.constant_matrix(b, n, avg)?;
        let p = tape.softmax(ll);
        let q = tape.matmul(a, p)?;
        let q_floor = tape.add_scalar(q, f64::MIN_POSITIVE);
        let log_q = tape.log(q_floor);
        let kl_avg = tape.matmul(a, kl_rows)?;
        (q, log_q, kl_avg)
    };

    let weighted = tape.mul(q, kl_avg)?;
    let klt_rows = tape.sum_rows(weighted);
    let kl_timbre = tape.mean_all(klt_rows);

    let shifted = tape.add_scalar(log_qy, (l.n_timbre as f64).ln());
    let klc = tape.mul(q, shifted)?;
    let klc_rows = tape.sum_rows(klc);
    let klc_rows = tape.relu(klc_rows);
    let kl_category = tape.mean_all(klc_rows);

    let oh_t = one_hot(tape, &batch.timbre, l.n_timbre)?;
    let picked_t = tape.mul(log_qy, oh_t)?;
    let picked_t = tape.sum_rows(picked_t);
    let ce_t = tape.mean_all(picked_t);
    let ce_timbre = tape.neg(ce_t);

    let neg_recon = tape.neg(recon);
    let mut total = neg_recon;
    for term in [kl_pitch, kl_timbre, kl_category, ce_pitch, ce_timbre] {
        total = tape.add(total, term)?;
    }

    let breakdown = LossBreakdown {
        recon: tape.scalar(recon)?,
        kl_pitch: tape.scalar(kl_pitch)?,
        kl_timbre_expected: tape.scalar(kl_timbre)?,
        kl_category: tape.scalar(kl_category)?,
        ce_pitch: tape.scalar(ce_pitch)?,
        ce_timbre: tape.scalar(ce_timbre)?,
        total: tape.scalar(total)?,
    };
    Ok(LossGraph { total, breakdown })
}

/// Loss terms of `batch` with one latent sample per example.
pub fn total_loss<R: Rng + ?Sized>(model: &Model, batch: &Batch, rng: &mut R) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    Ok(loss_graph(model, &mut tape, batch, 1, rng)?.breakdown)
}
