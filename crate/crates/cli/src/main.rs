use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hyptimbre::data::{build_corpus, load_dataset, save_dataset, CorpusConfig, FeatureConfig};
use hyptimbre::eval::{
    embed_csv, evaluate_model, posterior_means, priors_csv, scatter_svg, sweep, sweep_grid,
    sweep_table,
};
use hyptimbre::gradcheck::{run_suite, TOLERANCE};
use hyptimbre::rng::seeded;
use hyptimbre::train::train;
use hyptimbre::{Geometry, Model, RunConfig, Split};

#[derive(Parser)]
#[command(name = "hyptimbre", version, about = "Hyperbolic timbre VAE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic instrument corpus and save it as a MEL1 file.
    SynthData(SynthArgs),
    /// Train a model and write its parameters, configuration and epoch log.
    Train(TrainArgs),
    /// Timbre accuracy, separability and confusion matrix of a trained model.
    Eval(EvalArgs),
    /// Export posterior and prior means as CSV (and an SVG when D_t = 2).
    Embed(EmbedArgs),
    /// Decode latents drawn from a pitch prior and a timbre prior.
    Sample(SampleArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate over geometry, radius and timbre dimension.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Features {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GeometryArg {
    Euclidean,
    Hyperbolic,
}

impl From<GeometryArg> for Geometry {
    fn from(g: GeometryArg) -> Self {
        match g {
            GeometryArg::Euclidean => Geometry::Euclidean,
            GeometryArg::Hyperbolic => Geometry::Hyperbolic,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Renderings per (instrument, pitch).
    #[arg(long)]
    variations: Option<usize>,
    /// Use only the first N pitches of the default pitch set.
    #[arg(long)]
    pitches: Option<usize>,
    #[arg(long, value_enum, default_value_t = Features::Desk)]
    features: Features,
}

/// Run configuration: a `key = value` file overridden by explicit flags.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    geometry: Option<GeometryArg>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    dt: Option<usize>,
    #[arg(long)]
    dp: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mc_samples: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(g) = self.geometry {
            cfg.model.geometry = g.into();
        }
        if let Some(r) = self.radius {
            cfg.model.radius = r;
        }
        if let Some(d) = self.dt {
            cfg.model.dt = d;
        }
        if let Some(d) = self.dp {
            cfg.model.dp = d;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(m) = self.mc_samples {
            cfg.train.mc_samples = m;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model parameter file; the configuration goes to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    /// Tab-separated epoch log; defaults to `<out>.log.tsv`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `key = value` report; defaults to `<model>.eval.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Posterior-mean CSV; prior means go to `<out>.priors.csv` and the
    /// scatter plot to `<out>.svg`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    timbre: usize,
    #[arg(long)]
    pitch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mel CSV, one row per band.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 10.0, 100.0])]
    radii: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4])]
    dts: Vec<usize>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Concurrent training jobs; defaults to the available parallelism.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_data(path: &Path) -> Result<hyptimbre::Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let mut cfg = CorpusConfig::default();
    if let Some(v) = a.variations {
        cfg.variations = v;
    }
    if let Some(n) = a.pitches {
        if n == 0 || n > cfg.pitches.len() {
            bail!("--pitches must be in 1..={}", cfg.pitches.len());
        }
        cfg.pitches.truncate(n);
    }
    if let Features::Paper = a.features {
        cfg.features = FeatureConfig::paper();
    }
    let ds = build_corpus(&cfg, a.seed)?;
    save_dataset(&ds, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {} examples ({} instruments, {} pitches, {}x{} mel) to {}",
        ds.examples.len(),
        ds.n_timbre(),
        ds.n_pitch(),
        ds.n_mel,
        ds.n_frames,
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let ds = load_data(&a.data)?;
    let mcfg = cfg.model.model_config(ds.n_mel, ds.n_frames, ds.n_pitch(), ds.n_timbre());
    let mut model = Model::new(mcfg, &mut seeded(cfg.train.seed))?;
    let report = train(&ds, &cfg.train, &mut model)?;
    model.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let log = a.log.unwrap_or_else(|| with_suffix(&a.out, ".log.tsv"));
    write(&log, &report.to_tsv())?;
    println!(
        "trained {} epochs ({} steps); best epoch {} with criterion {}",
        report.epochs.len(),
        report.epochs.last().map_or(0, |e| e.steps),
        report.best_epoch,
        report.best_criterion
    );
    println!("model: {}", a.out.display());
    println!("log: {}", log.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let model = load_model(&a.model)?;
    let report = evaluate_model(&model, &ds, a.split.into(), a.seed)?;
    print!("{}", report.to_text());
    let out = a.out.unwrap_or_else(|| with_suffix(&a.model, ".eval.txt"));
    write(&out, &report.to_key_values())?;
    Ok(())
}

fn embed_cmd(a: EmbedArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let model = load_model(&a.model)?;
    let idx = ds.indices(a.split.into());
    write(&a.out, &embed_csv(&model, &ds, &idx)?)?;
    let priors_path = with_suffix(&a.out, ".priors.csv");
    write(&priors_path, &priors_csv(&model, &ds.timbre_names)?)?;
    println!("posterior means: {}", a.out.display());
    println!("prior means: {}", priors_path.display());
    let means = posterior_means(&model, &ds, &idx)?;
    let points: Vec<_> = means
        .into_iter()
        .zip(idx.iter().map(|&i| ds.examples[i].timbre))
        .collect();
    if let Some(svg) = scatter_svg(&points, &model.timbre_prior_means()?) {
        let svg_path = with_suffix(&a.out, ".svg");
        write(&svg_path, &svg)?;
        println!("scatter: {}", svg_path.display());
    }
    Ok(())
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let (z_p, z_t) = model.sample_priors(a.pitch, a.timbre, &mut seeded(a.seed))?;
    let mel = model.decode(&z_p, &z_t)?;
    let frames = model.config().n_frames;
    let mut s = String::from("band");
    for t in 0..frames {
        let _ = write!(s, ",t{t}");
    }
    s.push('\n');
    for (band, row) in mel.chunks(frames).enumerate() {
        let _ = write!(s, "{band}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    write(&a.out, &s)?;
    println!("decoded {} bands x {frames} frames to {}", mel.len() / frames, a.out.display());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let results = run_suite(a.seed)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{status:4} {:<48} max rel error {:.3e} over {} partials", r.name, r.max_rel_error, r.partials);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks exceeded {TOLERANCE:e}", results.len());
    }
    println!("all {} gradient checks within {TOLERANCE:e}", results.len());
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let base = a.run.resolve()?;
    let ds = load_data(&a.data)?;
    let grid = sweep_grid(&a.radii, &a.dts);
    let threads = a
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let results = sweep(&ds, &base, &grid, a.split.into(), threads)?;
    let provenance = format!(
        "synthetic corpus {} ({} examples, {} instruments, {} pitches, {}x{} mel); split {}; seed {}",
        a.data.display(),
        ds.examples.len(),
        ds.n_timbre(),
        ds.n_pitch(),
        ds.n_mel,
        ds.n_frames,
        Split::from(a.split),
        base.train.seed
    );
    let table = sweep_table(&results, &provenance);
    print!("{table}");
    if let Some(out) = a.out {
        write(&out, &table)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Embed(a) => embed_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
