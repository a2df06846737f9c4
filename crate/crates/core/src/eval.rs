//! Timbre classification accuracy, hierarchical separability, reports,
//! embedding exports and the geometry sweep.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Dataset, FamilyPartition, Split};
use crate::error::{domain_err, Error, Result};
use crate::model::{Geometry, Model, TimbreLatent};
use crate::rng::seeded;
use crate::train::{train, TrainReport};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Accuracy and `[truth][prediction]` confusion counts.
pub fn accuracy_from_predictions(
    truth: &[usize],
    predicted: &[usize],
    n_classes: usize,
) -> Result<(f64, Vec<Vec<usize>>)> {
    if truth.is_empty() {
        return domain_err("accuracy of an empty set");
    }
    if truth.len() != predicted.len() {
        return Err(Error::Dimension("truth and predictions differ in length".into()));
    }
    let mut confusion = vec![vec![0; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= n_classes || p >= n_classes {
            return domain_err(format!("label ({t}, {p}) out of range 0..{n_classes}"));
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|i| confusion[i][i]).sum();
    Ok((correct as f64 / truth.len() as f64, confusion))
}

/// Posterior means of the timbre latent for the examples `idx`.
pub fn posterior_means(model: &Model, ds: &Dataset, idx: &[usize]) -> Result<Vec<TimbreLatent>> {
    if idx.is_empty() {
        return Ok(Vec::new());
    }
    model
        .encode(&ds.batch(idx).x)?
        .iter()
        .map(|p| model.timbre_point(&p.xi_t))
        .collect()
}

/// MAP timbre predictions at the posterior means of `idx`.
pub fn predict_timbre(model: &Model, ds: &Dataset, idx: &[usize]) -> Result<Vec<usize>> {
    posterior_means(model, ds, idx)?
        .iter()
        .map(|z| Ok(argmax_lowest(&model.timbre_label_posterior(z)?)))
        .collect()
}

/// MAP timbre accuracy on `split`, with the confusion matrix.
pub fn timbre_accuracy(model: &Model, ds: &Dataset, split: Split) -> Result<(f64, Vec<Vec<usize>>)> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return domain_err(format!("the {split} split is empty"));
    }
    let pred = predict_timbre(model, ds, &idx)?;
    let truth: Vec<usize> = idx.iter().map(|&i| ds.examples[i].timbre).collect();
    accuracy_from_predictions(&truth, &pred, ds.n_timbre())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separability {
    pub d_same: f64,
    pub d_diff: f64,
    /// `d_diff / d_same`; `None` when the same-family means coincide.
    pub s: Option<f64>,
    pub n_same: usize,
    pub n_diff: usize,
}

impl Separability {
    pub fn describe_s(&self) -> String {
        match self.s {
            Some(s) => format!("{s}"),
            None => "undefined (same-family prior means coincide)".into(),
        }
    }
}

/// Mean prior distance over same-family and cross-family instrument pairs
/// and their ratio `S = D_diff / D_same`.
pub fn hierarchical_separability(
    means: &[TimbreLatent],
    partition: &FamilyPartition,
) -> Result<Separability> {
    if means.len() != partition.n_instruments() {
        return Err(Error::Dimension(format!(
            "{} means for {} instruments",
            means.len(),
            partition.n_instruments()
        )));
    }
    let same = partition.same_family_pairs();
    let diff = partition.cross_family_pairs();
    if means.len() < 2 || same.is_empty() || diff.is_empty() {
        return domain_err("separability needs both same-family and cross-family pairs");
    }
    let mean_dist = |pairs: &[(usize, usize)]| -> Result<f64> {
        let mut acc = 0.0;
        for &(i, j) in pairs {
            acc += means[i].distance(&means[j])?;
        }
        Ok(acc / pairs.len() as f64)
    };
    let d_same = mean_dist(&same)?;
    let d_diff = mean_dist(&diff)?;
    Ok(Separability {
        d_same,
        d_diff,
        s: (d_same > 0.0).then(|| d_diff / d_same),
        n_same: same.len(),
        n_diff: diff.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub separability: Separability,
    pub geometry: Geometry,
    pub radius: f64,
    pub dt: usize,
    pub seed: u64,
    pub split: String,
    pub n_examples: usize,
    pub timbre_names: Vec<String>,
}

pub fn evaluate_model(model: &Model, ds: &Dataset, split: Split, seed: u64) -> Result<EvalReport> {
    let (accuracy, confusion) = timbre_accuracy(model, ds, split)?;
    let separability = hierarchical_separability(&model.timbre_prior_means()?, &ds.families())?;
    let l = &model.config().latent;
    Ok(EvalReport {
        accuracy,
        n_examples: confusion.iter().flatten().sum(),
        confusion,
        separability,
        geometry: l.geometry,
        radius: l.radius,
        dt: l.dt,
        seed,
        split: split.to_string(),
        timbre_names: ds.timbre_names.clone(),
    })
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let sep = &self.separability;
        let mut s = String::new();
        let _ = writeln!(s, "geometry: {}", self.geometry);
        if self.geometry == Geometry::Hyperbolic {
            let _ = writeln!(s, "radius: {}", self.radius);
        }
        let _ = writeln!(s, "timbre dimension: {}", self.dt);
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "split: {} ({} examples)", self.split, self.n_examples);
        let _ = writeln!(s, "timbre accuracy: {:.4}", self.accuracy);
        let _ = writeln!(s, "D_same: {:.6} over {} pairs", sep.d_same, sep.n_same);
        let _ = writeln!(s, "D_diff: {:.6} over {} pairs", sep.d_diff, sep.n_diff);
        let _ = writeln!(s, "S: {}", sep.describe_s());
        let _ = writeln!(s, "confusion (rows: true, columns: predicted):");
        for (name, row) in self.timbre_names.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:3}")).collect();
            let _ = writeln!(s, "  {name:<28} {}", cells.join(" "));
        }
        s
    }

    /// `key = value` lines mirroring the text report, full precision.
    pub fn to_key_values(&self) -> String {
        let sep = &self.separability;
        let mut s = String::new();
        let _ = writeln!(s, "geometry = {}", self.geometry);
        let _ = writeln!(s, "radius = {}", self.radius);
        let _ = writeln!(s, "dt = {}", self.dt);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "split = {}", self.split);
        let _ = writeln!(s, "n_examples = {}", self.n_examples);
        let _ = writeln!(s, "accuracy = {}", self.accuracy);
        let _ = writeln!(s, "d_same = {}", sep.d_same);
        let _ = writeln!(s, "d_diff = {}", sep.d_diff);
        match sep.s {
            Some(v) => {
                let _ = writeln!(s, "s = {v}");
            }
            None => {
                let _ = writeln!(s, "s = undefined");
            }
        }
        let _ = writeln!(s, "n_same_pairs = {}", sep.n_same);
        let _ = writeln!(s, "n_diff_pairs = {}", sep.n_diff);
        for (i, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(s, "confusion.{i} = {}", cells.join(","));
        }
        s
    }
}

fn coords_csv(out: &mut String, c: &[f64]) {
    for v in c {
        let _ = write!(out, ",{v}");
    }
    out.push('\n');
}

/// `example_id,pitch_label,timbre_label,c0..cD` for the posterior means of
/// `idx` (ambient coordinates in the hyperbolic geometry).
pub fn embed_csv(model: &Model, ds: &Dataset, idx: &[usize]) -> Result<String> {
    let means = posterior_means(model, ds, idx)?;
    let width = model.timbre_prior_means()?[0].coords().len();
    let mut s = String::from("example_id,pitch_label,timbre_label");
    for c in 0..width {
        let _ = write!(s, ",c{c}");
    }
    s.push('\n');
    for (&i, m) in idx.iter().zip(&means) {
        let e = &ds.examples[i];
        let _ = write!(s, "{i},{},{}", e.pitch, e.timbre);
        coords_csv(&mut s, m.coords());
    }
    Ok(s)
}

/// `timbre_label,name,c0..cD` for the timbre prior means.
pub fn priors_csv(model: &Model, names: &[String]) -> Result<String> {
    let means = model.timbre_prior_means()?;
    let mut s = String::from("timbre_label,name");
    for c in 0..means[0].coords().len() {
        let _ = write!(s, ",c{c}");
    }
    s.push('\n');
    for (j, m) in means.iter().enumerate() {
        let name = names.get(j).map_or("", String::as_str);
        let _ = write!(s, "{j},{name}");
        coords_csv(&mut s, m.coords());
    }
    Ok(s)
}

/// Planar coordinates for plotting a two-dimensional timbre space: the raw
/// coordinates for Euclidean latents, the Poincare disk of radius `R` for
/// hyperbolic ones.
pub fn planar(z: &TimbreLatent) -> Option<(f64, f64)> {
    match z {
        TimbreLatent::Euclidean(v) if v.len() == 2 => Some((v[0], v[1])),
        TimbreLatent::Hyperbolic(p) if p.dim() == 2 => {
            let c = p.coords();
            let r = p.curvature().radius();
            Some((r * c[1] / (r + c[0]), r * c[2] / (r + c[0])))
        }
        _ => None,
    }
}

/// SVG scatter of posterior means (dots) and prior means (crosses), colored
/// by timbre label. Returns `None` unless the timbre space is two-dimensional.
pub fn scatter_svg(points: &[(TimbreLatent, usize)], priors: &[TimbreLatent]) -> Option<String> {
    let pts: Vec<(f64, f64, usize)> = points
        .iter()
        .map(|(z, l)| planar(z).map(|(x, y)| (x, y, *l)))
        .collect::<Option<_>>()?;
    let pri: Vec<(f64, f64, usize)> = priors
        .iter()
        .enumerate()
        .map(|(j, z)| planar(z).map(|(x, y)| (x, y, j)))
        .collect::<Option<_>>()?;
    let all = pts.iter().chain(&pri);
    let ext = all
        .clone()
        .fold(1e-9f64, |m, &(x, y, _)| m.max(x.abs()).max(y.abs()))
        * 1.1;
    let (size, half) = (600.0, 300.0);
    let map = |x: f64, y: f64| (half + x / ext * half, half - y / ext * half);
    let n = pri.len().max(1);
    let color = |l: usize| format!("hsl({},70%,45%)", (l * 360) / n);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for &(x, y, l) in &pts {
        let (px, py) = map(x, y);
        let _ = writeln!(s, "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"3\" fill=\"{}\"/>", color(l));
    }
    for &(x, y, l) in &pri {
        let (px, py) = map(x, y);
        let _ = writeln!(
            s,
            "<path d=\"M{:.2},{:.2}l12,12m0,-12l-12,12\" stroke=\"{}\" stroke-width=\"3\"/>",
            px - 6.0,
            py - 6.0,
            color(l)
        );
    }
    s.push_str("</svg>\n");
    Some(s)
}

/// One trained configuration of the geometry sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub geometry: Geometry,
    pub radius: f64,
    pub dt: usize,
    pub report: EvalReport,
    pub train: TrainReport,
}

impl SweepResult {
    pub fn row_label(&self) -> String {
        match self.geometry {
            Geometry::Euclidean => "euclidean".into(),
            Geometry::Hyperbolic => format!("hyperbolic R={}", self.radius),
        }
    }
}

/// The grid `{euclidean} + {hyperbolic at each radius}` by `dts`.
pub fn sweep_grid(radii: &[f64], dts: &[usize]) -> Vec<(Geometry, f64, usize)> {
    let mut rows = vec![(Geometry::Euclidean, 1.0)];
    rows.extend(radii.iter().map(|&r| (Geometry::Hyperbolic, r)));
    rows.into_iter()
        .flat_map(|(g, r)| dts.iter().map(move |&d| (g, r, d)))
        .collect()
}

/// Trains and evaluates one model per grid cell. Jobs run on up to `threads`
/// threads; each has private state seeded from `base.train.seed`, so the
/// results do not depend on scheduling.
pub fn sweep(
    ds: &Dataset,
    base: &RunConfig,
    grid: &[(Geometry, f64, usize)],
    split: Split,
    threads: usize,
) -> Result<Vec<SweepResult>> {
    let run = |&(geometry, radius, dt): &(Geometry, f64, usize)| -> Result<SweepResult> {
        let mut cfg = base.clone();
        cfg.model.geometry = geometry;
        cfg.model.radius = radius;
        cfg.model.dt = dt;
        let mcfg = cfg.model.model_config(ds.n_mel, ds.n_frames, ds.n_pitch(), ds.n_timbre());
        let mut model = Model::new(mcfg, &mut seeded(cfg.train.seed))?;
        let train_report = train(ds, &cfg.train, &mut model)?;
        let report = evaluate_model(&model, ds, split, cfg.train.seed)?;
        Ok(SweepResult {
            geometry,
            radius,
            dt,
            report,
            train: train_report,
        })
    };
    let threads = threads.max(1);
    let mut results: Vec<Option<Result<SweepResult>>> = (0..grid.len()).map(|_| None).collect();
    for (chunk_idx, chunk) in grid.chunks(threads).enumerate() {
        let out: Vec<Result<SweepResult>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|cell| s.spawn(move || run(cell))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("sweep job panicked".into()))))
                .collect()
        });
        for (k, r) in out.into_iter().enumerate() {
            results[chunk_idx * threads + k] = Some(r);
        }
    }
    results.into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Accuracy and separability tables: rows are geometry/radius, columns are
/// the timbre dimension.
pub fn sweep_table(results: &[SweepResult], provenance: &str) -> String {
    let mut dts: Vec<usize> = results.iter().map(|r| r.dt).collect();
    dts.sort_unstable();
    dts.dedup();
    let mut rows: Vec<String> = Vec::new();
    for r in results {
        if !rows.contains(&r.row_label()) {
            rows.push(r.row_label());
        }
    }
    let mut s = format!("# {provenance}\n");
    let header = |s: &mut String, title: &str| {
        let _ = write!(s, "\n{title}\n{:<24}", "geometry");
        for d in &dts {
            let _ = write!(s, " {:>10}", format!("D_t={d}"));
        }
        s.push('\n');
    };
    let cell = |row: &str, dt: usize| results.iter().find(|r| r.row_label() == row && r.dt == dt);
    header(&mut s, "timbre accuracy");
    for row in &rows {
        let _ = write!(s, "{row:<24}");
        for &d in &dts {
            match cell(row, d) {
                Some(r) => {
                    let _ = write!(s, " {:>10.4}", r.report.accuracy);
                }
                None => {
                    let _ = write!(s, " {:>10}", "-");
                }
            }
        }
        s.push('\n');
    }
    header(&mut s, "hierarchical separability S");
    for row in &rows {
        let _ = write!(s, "{row:<24}");
        for &d in &dts {
            match cell(row, d).map(|r| r.report.separability.s) {
                Some(Some(v)) => {
                    let _ = write!(s, " {v:>10.4}");
                }
                Some(None) => {
                    let _ = write!(s, " {:>10}", "undef");
                }
                None => {
                    let _ = write!(s, " {:>10}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}
