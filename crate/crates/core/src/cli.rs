//! Command-line front end. Every subcommand validates its paths before doing
//! any work, tags TSV outputs with `# seed=… config_hash=…` and writes a run
//! manifest next to its outputs. Exit codes: 0 success, 1 data error, 2 usage.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::corpus::{load_corpus, load_survival, load_survival_table, load_vocabularies, phecode_counts, write_corpus, write_survival, write_vocabularies};
use crate::error::{Error, Result};
use crate::evaluate::{dynamic_auc_curve, group_split_by_topic, kaplan_meier, log_rank_test, quantile_grid, time_grid, KmCurve};
use crate::inference::{train, TrainConfig, Variant};
use crate::model_io::{config_hash, load_model, save_model};
use crate::predict::{predict_risk, PredictConfig};
use crate::prior::{load_prior, write_prior, PriorConfig, PriorMode};
use crate::repro::{build_guidance, run_design1, run_design2, Design1Run, Design2Run};
use crate::simulate::{
    load_design2_inputs, simulate_design1, simulate_design2, standin_design2_inputs, write_design2_inputs, SimConfig1, SimConfig2, SimulatedDataset,
};
use crate::tsv::{self, TsvWriter};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "survtopic", version, about = "Survival-supervised guided topic models")]
pub struct Cli {
    /// Seed recorded in every output; drives all randomness.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 1 keeps the sequential reference E-step.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Simulate a corpus with planted survival signal.
    Simulate(SimulateArgs),
    /// Compute guide probabilities from phenotype counts.
    Prior(PriorArgs),
    /// Train a topic model.
    Train(TrainArgs),
    /// Held-out topics, hazard ratios and survival curves.
    Predict(PredictArgs),
    /// Dynamic AUC of predicted hazard ratios.
    Evaluate(EvaluateArgs),
    /// Kaplan–Meier curves and a log-rank test for a high/low split.
    Km(KmArgs),
    /// Scaled Design 1 end to end.
    ReproDesign1(Repro1Args),
    /// Design 2 on supplied or stand-in inputs.
    ReproDesign2(Repro2Args),
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub design: u8,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8000)]
    pub patients: usize,
    #[arg(long, default_value_t = 500)]
    pub topics: usize,
    #[arg(long, default_value_t = 1000)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 100)]
    pub tokens: usize,
    #[arg(long, default_value_t = 50)]
    pub nonzero: usize,
    #[arg(long, default_value_t = 6.0)]
    pub w_value: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long)]
    pub censoring_rate: Option<f64>,
    #[command(flatten)]
    pub design2: Design2InputArgs,
    #[arg(long, default_value_t = 3.0)]
    pub beta_scale: f64,
    #[arg(long, default_value_t = 0.6)]
    pub beta_offset: f64,
    #[arg(long, default_value_t = 0.10)]
    pub nonzero_fraction: f64,
    #[arg(long)]
    pub dirichlet_concentration: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct Design2InputArgs {
    /// Guide map; with --frequencies and --record-counts replaces the stand-in.
    #[arg(long, requires_all = ["frequencies", "record_counts"])]
    pub guide: Option<PathBuf>,
    #[arg(long)]
    pub frequencies: Option<PathBuf>,
    #[arg(long)]
    pub record_counts: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub standin_topics: usize,
    #[arg(long, default_value_t = 5)]
    pub standin_features_per_topic: usize,
    #[arg(long, default_value_t = 2000)]
    pub standin_patients: usize,
    #[arg(long, default_value_t = 80.0)]
    pub standin_mean_tokens: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct CorpusArgs {
    /// Vocabulary TSV (modality, feature_id).
    #[arg(long)]
    pub vocab: PathBuf,
    /// Corpus TSV (patient_id, modality, feature_id, count).
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PriorArgs {
    #[command(flatten)]
    pub input: CorpusArgs,
    #[arg(long)]
    pub guide: PathBuf,
    /// Modality whose features the guide map covers.
    #[arg(long)]
    pub guide_modality: String,
    #[arg(long, default_value = "mixture")]
    pub mode: PriorMode,
    #[arg(long, default_value_t = 1e-6)]
    pub floor: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: CorpusArgs,
    /// Survival TSV (patient_id, time, event); required by supervised variants.
    #[arg(long)]
    pub survival: Option<PathBuf>,
    #[arg(long, default_value = "mixehr_surg")]
    pub variant: Variant,
    /// Number of topics; guided variants take it from the guide map.
    #[arg(long)]
    pub topics: Option<usize>,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 100)]
    pub max_sweeps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 1)]
    pub cox_refit_every: usize,
    #[arg(long)]
    pub guide: Option<PathBuf>,
    #[arg(long)]
    pub guide_modality: Option<String>,
    #[arg(long, default_value = "mixture")]
    pub prior_mode: PriorMode,
    /// Precomputed prior TSV replacing the one derived from the guide map.
    #[arg(long, requires = "guide")]
    pub prior: Option<PathBuf>,
    /// Output model directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus TSV over the model's vocabularies.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    /// Predictions TSV (patient_id, hazard_ratio, theta columns).
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Optional per-patient survival curves (patient_id, time, survival).
    #[arg(long)]
    #[serde(skip)]
    pub curves: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub survival: PathBuf,
    #[arg(long, default_value_t = 20.0)]
    pub grid_start: f64,
    #[arg(long, default_value_t = 755.0)]
    pub grid_stop: f64,
    #[arg(long, default_value_t = 20.0)]
    pub grid_step: f64,
    /// Use this many interior quantiles of the observed times instead.
    #[arg(long)]
    pub grid_quantiles: Option<usize>,
    /// Score tied hazard ratios ½ instead of 1.
    #[arg(long)]
    pub tie_half: bool,
    /// AUC curve TSV (t, auc).
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct KmArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub survival: PathBuf,
    /// Split on this theta column (index or column suffix); default splits on hazard_ratio.
    #[arg(long)]
    pub topic: Option<String>,
    #[arg(long, default_value_t = 0.70)]
    pub quantile: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct Repro1Args {
    /// Fraction of the full 8000 patients.
    #[arg(long, default_value_t = 0.25)]
    pub scale: f64,
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Also score the unsupervised-topics-then-Cox baseline.
    #[arg(long)]
    pub pipeline: bool,
    #[arg(long)]
    pub max_sweeps: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct Repro2Args {
    #[command(flatten)]
    pub inputs: Design2InputArgs,
    #[arg(long, default_value = "mixture")]
    pub prior_mode: PriorMode,
    #[arg(long)]
    pub max_sweeps: Option<usize>,
    /// Only simulate and check the generator, skip training.
    #[arg(long)]
    pub no_train: bool,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

struct Run<'a> {
    cli: &'a Cli,
    hash: String,
    outputs: Vec<PathBuf>,
}

impl Run<'_> {
    fn provenance(&self) -> String {
        format!("seed={} config_hash={}", self.cli.seed, self.hash)
    }

    fn tsv(&mut self, path: &Path, header: &[&str]) -> Result<TsvWriter> {
        self.outputs.push(path.to_path_buf());
        TsvWriter::create(path, Some(&self.provenance()), header)
    }

    fn json<T: Serialize>(&mut self, path: &Path, value: &T) -> Result<()> {
        self.outputs.push(path.to_path_buf());
        let body = serde_json::json!({ "seed": self.cli.seed, "config_hash": self.hash, "data": value });
        write_bytes(path, &serde_json::to_vec_pretty(&body)?)
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    subcommand: &'a Command,
    seed: u64,
    threads: usize,
    config_hash: &'a str,
    version: &'a str,
    wall_seconds: f64,
    outputs: &'a [PathBuf],
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} is not a directory", path.display())))
    }
}

fn prepare_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn prepare_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(d) => prepare_dir(d),
        None => Ok(()),
    }
}

/// Manifest location: inside an output directory, or `<file>.run.json`.
fn manifest_path(cmd: &Command) -> Option<PathBuf> {
    let file = |p: &Path| {
        let mut s = p.as_os_str().to_owned();
        s.push(".run.json");
        PathBuf::from(s)
    };
    match cmd {
        Command::Simulate(a) => Some(a.out.join(RUN_MANIFEST)),
        Command::Prior(a) => Some(file(&a.out)),
        Command::Train(a) => Some(a.out.join(RUN_MANIFEST)),
        Command::Predict(a) => Some(file(&a.out)),
        Command::Evaluate(a) => Some(file(&a.out)),
        Command::Km(a) => Some(a.out_dir.join(RUN_MANIFEST)),
        Command::ReproDesign1(a) => a.out.as_ref().map(|d| d.join(RUN_MANIFEST)),
        Command::ReproDesign2(a) => a.out.as_ref().map(|d| d.join(RUN_MANIFEST)),
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .target(env_logger::Target::Stderr)
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    validate_paths(&cli.command)?;
    if cli.threads > 1 {
        // a global pool may already exist when called repeatedly in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let mut run = Run {
        cli,
        hash: config_hash(&cli.command)?,
        outputs: Vec::new(),
    };
    match &cli.command {
        Command::Simulate(a) => simulate(&mut run, a)?,
        Command::Prior(a) => prior(&mut run, a)?,
        Command::Train(a) => train_cmd(&mut run, a)?,
        Command::Predict(a) => predict(&mut run, a)?,
        Command::Evaluate(a) => evaluate(&mut run, a)?,
        Command::Km(a) => km(&mut run, a)?,
        Command::ReproDesign1(a) => repro1(&mut run, a)?,
        Command::ReproDesign2(a) => repro2(&mut run, a)?,
    }
    if let Some(path) = manifest_path(&cli.command) {
        let manifest = RunManifest {
            subcommand: &cli.command,
            seed: cli.seed,
            threads: cli.threads,
            config_hash: &run.hash,
            version: env!("CARGO_PKG_VERSION"),
            wall_seconds: start.elapsed().as_secs_f64(),
            outputs: &run.outputs,
        };
        write_bytes(&path, &serde_json::to_vec_pretty(&manifest)?)?;
    }
    Ok(())
}

fn validate_design2_inputs(a: &Design2InputArgs) -> Result<()> {
    for (p, what) in [(&a.guide, "guide map"), (&a.frequencies, "frequency file"), (&a.record_counts, "record-count file")] {
        if let Some(p) = p {
            require_file(p, what)?;
        }
    }
    Ok(())
}

fn validate_paths(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => {
            validate_design2_inputs(&a.design2)?;
            prepare_dir(&a.out)
        }
        Command::Prior(a) => {
            require_file(&a.input.vocab, "vocabulary")?;
            require_file(&a.input.corpus, "corpus")?;
            require_file(&a.guide, "guide map")?;
            prepare_parent(&a.out)
        }
        Command::Train(a) => {
            require_file(&a.input.vocab, "vocabulary")?;
            require_file(&a.input.corpus, "corpus")?;
            for (p, what) in [(&a.survival, "survival file"), (&a.guide, "guide map"), (&a.prior, "prior file")] {
                if let Some(p) = p {
                    require_file(p, what)?;
                }
            }
            if a.guide.is_some() != a.guide_modality.is_some() {
                return Err(Error::Config("--guide and --guide-modality go together".into()));
            }
            prepare_dir(&a.out)
        }
        Command::Predict(a) => {
            require_dir(&a.model, "model directory")?;
            require_file(&a.corpus, "corpus")?;
            prepare_parent(&a.out)?;
            a.curves.as_deref().map(prepare_parent).transpose().map(|_| ())
        }
        Command::Evaluate(a) => {
            require_file(&a.predictions, "predictions")?;
            require_file(&a.survival, "survival file")?;
            prepare_parent(&a.out)
        }
        Command::Km(a) => {
            require_file(&a.predictions, "predictions")?;
            require_file(&a.survival, "survival file")?;
            prepare_dir(&a.out_dir)
        }
        Command::ReproDesign1(a) => a.out.as_deref().map(prepare_dir).transpose().map(|_| ()),
        Command::ReproDesign2(a) => {
            validate_design2_inputs(&a.inputs)?;
            a.out.as_deref().map(prepare_dir).transpose().map(|_| ())
        }
    }
}

fn design2_inputs(a: &Design2InputArgs, seed: u64) -> Result<crate::simulate::Design2Inputs> {
    match (&a.guide, &a.frequencies, &a.record_counts) {
        (Some(g), Some(f), Some(c)) => load_design2_inputs(g, f, c),
        (None, None, None) => standin_design2_inputs(
            a.standin_topics,
            a.standin_features_per_topic,
            a.standin_patients,
            a.standin_mean_tokens,
            seed,
        ),
        _ => Err(Error::Config("--guide, --frequencies and --record-counts go together".into())),
    }
}

fn write_wide(run: &mut Run, path: &Path, ids: &[String], prefix: &str, rows: &[Vec<f64>]) -> Result<()> {
    let k = rows.first().map_or(0, |r| r.len());
    let mut header = vec!["patient_id".to_string()];
    header.extend((0..k).map(|i| format!("{prefix}{i}")));
    let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut w = run.tsv(path, &header)?;
    for (id, row) in ids.iter().zip(rows) {
        let mut fields = vec![id.clone()];
        fields.extend(row.iter().map(|x| x.to_string()));
        w.row(&fields)?;
    }
    w.finish()
}

fn write_dataset(run: &mut Run, out: &Path, data: &SimulatedDataset, config: serde_json::Value) -> Result<()> {
    let prov = run.provenance();
    for (name, res) in [
        ("vocab.tsv", write_vocabularies(data.corpus.vocabularies(), &out.join("vocab.tsv"), Some(&prov))),
        ("corpus.tsv", write_corpus(&data.corpus, &out.join("corpus.tsv"), Some(&prov))),
        ("survival.tsv", write_survival(&data.outcomes, &out.join("survival.tsv"), Some(&prov))),
    ] {
        res?;
        run.outputs.push(out.join(name));
    }
    let ids = data.corpus.patient_ids();
    write_wide(run, &out.join("theta.tsv"), &ids, "topic_", &data.truth.theta)?;
    write_wide(run, &out.join("zbar.tsv"), &ids, "topic_", &data.truth.zbar)?;
    let truth = serde_json::json!({
        "config": config,
        "w": data.truth.w,
        "alpha": data.truth.alpha,
        "flagged": data.flagged,
    });
    run.json(&out.join("truth.json"), &truth)
}

fn simulate(run: &mut Run, a: &SimulateArgs) -> Result<()> {
    let seed = run.cli.seed;
    if a.design == 1 {
        let cfg = SimConfig1 {
            v: a.vocab_size,
            k: a.topics,
            p: a.patients,
            tokens_per_patient: a.tokens,
            n_nonzero: a.nonzero,
            w_value: a.w_value,
            lambda_baseline: a.lambda,
            censoring_rate: a.censoring_rate,
            seed,
            ..SimConfig1::default()
        };
        let data = simulate_design1(&cfg)?;
        write_dataset(run, &a.out, &data, serde_json::to_value(&cfg)?)
    } else {
        let inputs = design2_inputs(&a.design2, seed)?;
        if a.design2.guide.is_none() {
            let prov = run.provenance();
            run.outputs.extend(write_design2_inputs(&inputs, &a.out, Some(&prov))?);
        }
        let cfg = SimConfig2 {
            beta_scale: a.beta_scale,
            beta_offset: a.beta_offset,
            nonzero_fraction: a.nonzero_fraction,
            w_value: a.w_value,
            dirichlet_concentration: a.dirichlet_concentration,
            lambda_baseline: a.lambda,
            censoring_rate: a.censoring_rate,
            seed,
        };
        let data = simulate_design2(&inputs, &cfg)?;
        if !data.flagged.is_empty() {
            log::warn!("{} patients had all-zero frequencies and got uniform θ", data.flagged.len());
        }
        write_dataset(run, &a.out, &data, serde_json::to_value(&cfg)?)
    }
}

fn load_inputs(a: &CorpusArgs) -> Result<crate::corpus::Corpus> {
    let vocabs = load_vocabularies(&a.vocab)?;
    load_corpus(&a.corpus, &vocabs)
}

fn modality_of(corpus: &crate::corpus::Corpus, name: &str) -> Result<usize> {
    corpus
        .modality_index(name)
        .ok_or_else(|| Error::Config(format!("unknown modality {name:?}")))
}

fn prior(run: &mut Run, a: &PriorArgs) -> Result<()> {
    let corpus = load_inputs(&a.input)?;
    let guide = crate::corpus::load_guide_map(&a.guide)?;
    let m = modality_of(&corpus, &a.guide_modality)?;
    let cfg = PriorConfig {
        floor: a.floor,
        ..PriorConfig::default()
    };
    let u = phecode_counts(&corpus, &guide, m)?;
    let matrix = a.mode.fit(&u, &cfg)?.apply(&u);
    write_prior(&matrix, &corpus.patient_ids(), guide.phenotype_ids(), &a.out, Some(&run.provenance()))?;
    run.outputs.push(a.out.clone());
    Ok(())
}

fn train_cmd(run: &mut Run, a: &TrainArgs) -> Result<()> {
    let corpus = load_inputs(&a.input)?;
    let outcomes = a.survival.as_deref().map(|p| load_survival(p, &corpus)).transpose()?;
    let guidance = match (&a.guide, &a.guide_modality) {
        (Some(g), Some(name)) => {
            let guide = crate::corpus::load_guide_map(g)?;
            let m = modality_of(&corpus, name)?;
            let mut guidance = build_guidance(&corpus, &guide, m, a.prior_mode, &PriorConfig::default())?;
            if let Some(p) = &a.prior {
                let (matrix, phen) = load_prior(p, &corpus.patient_ids())?;
                if phen != guide.phenotype_ids() {
                    return Err(Error::Data(format!("{}: phenotype order differs from the guide map", p.display())));
                }
                guidance.matrix = matrix;
            }
            Some(guidance)
        }
        _ => None,
    };
    if a.variant.guided() && guidance.is_none() {
        return Err(Error::Config(format!("variant {} needs --guide and --guide-modality", a.variant)));
    }
    let k = match (&guidance, a.topics) {
        (Some(g), Some(k)) if a.variant.guided() && k != g.matrix.n_topics() => {
            return Err(Error::Config(format!(
                "--topics {k} conflicts with the {} phenotypes of the guide map",
                g.matrix.n_topics()
            )))
        }
        (Some(g), _) if a.variant.guided() => g.matrix.n_topics(),
        (_, Some(k)) => k,
        _ => TrainConfig::default().k,
    };
    let cfg = TrainConfig {
        k,
        max_sweeps: a.max_sweeps,
        tol: a.tol,
        lambda1: a.lambda1,
        lambda2: a.lambda2,
        variant: a.variant,
        seed: run.cli.seed,
        cox_refit_every: a.cox_refit_every,
        threads: run.cli.threads,
        ..TrainConfig::default()
    };
    let guidance = guidance.filter(|_| a.variant.guided());
    let model = train(&corpus, outcomes.as_deref(), guidance.as_ref(), &cfg)?;
    let manifest = save_model(&model, &a.out)?;
    run.outputs.extend(manifest.files.iter().map(|f| a.out.join(&f.name)));
    run.outputs.push(a.out.join(crate::model_io::MANIFEST_FILE));
    println!(
        "trained {} K={} sweeps={} converged={}",
        cfg.variant, cfg.k, model.diagnostics.n_sweeps, model.diagnostics.converged
    );
    Ok(())
}

fn theta_labels(model: &crate::inference::TrainedModel) -> Vec<String> {
    match &model.guide {
        Some(g) => g.map.phenotype_ids().iter().map(|p| format!("theta_{p}")).collect(),
        None => (0..model.k()).map(|k| format!("theta_{k}")).collect(),
    }
}

fn predict(run: &mut Run, a: &PredictArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let corpus = load_corpus(&a.corpus, &model.vocabularies)?;
    let cfg = PredictConfig {
        tol: a.tol,
        max_iter: a.max_iter,
    };
    let preds = predict_risk(&model, &corpus, None, &cfg)?;
    let mut header = vec!["patient_id".to_string(), "hazard_ratio".to_string()];
    header.extend(theta_labels(&model));
    let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut w = run.tsv(&a.out, &header)?;
    for p in &preds {
        let mut row = vec![p.patient_id.clone(), p.hazard_ratio.to_string()];
        row.extend(p.topics.theta.iter().map(|x| x.to_string()));
        w.row(&row)?;
    }
    w.finish()?;
    if let Some(path) = &a.curves {
        let mut w = run.tsv(path, &["patient_id", "time", "survival"])?;
        for p in &preds {
            for (t, s) in p.survival.steps() {
                w.row(&[p.patient_id.clone(), t.to_string(), s.to_string()])?;
            }
        }
        w.finish()?;
    }
    let flagged = preds.iter().filter(|p| p.topics.empty).count();
    if flagged > 0 {
        log::warn!("{flagged} patients had no tokens and fell back to the prior");
    }
    Ok(())
}

/// Predictions file: patient id, hazard ratio and the theta columns.
struct Predictions {
    ids: Vec<String>,
    hr: Vec<f64>,
    theta_labels: Vec<String>,
    theta: Vec<Vec<f64>>,
}

fn read_predictions(path: &Path) -> Result<Predictions> {
    let (header, file) = tsv::read_with_prefix(path, &["patient_id", "hazard_ratio"])?;
    let parse = |line: usize, s: &str| -> Result<f64> {
        s.parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| file.parse_err(line, format!("not a finite number: {s:?}")))
    };
    let mut p = Predictions {
        ids: Vec::new(),
        hr: Vec::new(),
        theta_labels: header[2..].to_vec(),
        theta: Vec::new(),
    };
    for row in &file.rows {
        p.ids.push(row.fields[0].clone());
        p.hr.push(parse(row.line, &row.fields[1])?);
        p.theta.push(row.fields[2..].iter().map(|s| parse(row.line, s)).collect::<Result<_>>()?);
    }
    Ok(p)
}

/// Times and event flags aligned to the prediction ids.
fn aligned_survival(path: &Path, ids: &[String]) -> Result<(Vec<f64>, Vec<bool>)> {
    let table = load_survival_table(path)?;
    let mut times = Vec::with_capacity(ids.len());
    let mut events = Vec::with_capacity(ids.len());
    for id in ids {
        let o = table
            .get(id)
            .ok_or_else(|| Error::Data(format!("{}: no survival record for {id}", path.display())))?;
        times.push(o.time);
        events.push(o.event);
    }
    Ok((times, events))
}

fn evaluate(run: &mut Run, a: &EvaluateArgs) -> Result<()> {
    let preds = read_predictions(&a.predictions)?;
    let (times, _) = aligned_survival(&a.survival, &preds.ids)?;
    let grid = match a.grid_quantiles {
        Some(n) => quantile_grid(&times, n),
        None => time_grid(a.grid_start, a.grid_stop, a.grid_step)?,
    };
    let curve = dynamic_auc_curve(&times, &preds.hr, &grid, a.tie_half)?;
    let mut w = run.tsv(&a.out, &["t", "auc"])?;
    for (t, auc) in curve.times.iter().zip(&curve.auc_at_t) {
        w.row(&[t.to_string(), auc.map_or("NA".to_string(), |x| x.to_string())])?;
    }
    w.finish()?;
    println!("mean_auc\t{}\tdefined_points\t{}/{}", curve.mean_auc, curve.n_defined(), curve.times.len());
    Ok(())
}

fn write_km(run: &mut Run, path: &Path, curve: &KmCurve) -> Result<()> {
    let mut w = run.tsv(path, &["time", "survival", "at_risk", "events"])?;
    for i in 0..curve.times.len() {
        w.row(&[
            curve.times[i].to_string(),
            curve.survival[i].to_string(),
            curve.at_risk[i].to_string(),
            curve.events[i].to_string(),
        ])?;
    }
    w.finish()
}

fn km(run: &mut Run, a: &KmArgs) -> Result<()> {
    let preds = read_predictions(&a.predictions)?;
    let (times, events) = aligned_survival(&a.survival, &preds.ids)?;
    let (column, label): (Vec<Vec<f64>>, String) = match &a.topic {
        None => (preds.hr.iter().map(|&h| vec![h]).collect(), "hazard_ratio".into()),
        Some(t) => {
            let idx = preds
                .theta_labels
                .iter()
                .position(|l| l == t || l.strip_prefix("theta_") == Some(t.as_str()))
                .or_else(|| t.parse::<usize>().ok().filter(|&i| i < preds.theta_labels.len()))
                .ok_or_else(|| Error::Config(format!("no theta column matches {t:?}")))?;
            (preds.theta.iter().map(|r| vec![r[idx]]).collect(), preds.theta_labels[idx].clone())
        }
    };
    let (high, low) = group_split_by_topic(&column, 0, a.quantile)?;
    if low.is_empty() {
        return Err(Error::Degenerate(format!("quantile {} leaves the low group empty", a.quantile)));
    }
    let pick = |idx: &[usize]| -> (Vec<f64>, Vec<bool>) { (idx.iter().map(|&j| times[j]).collect(), idx.iter().map(|&j| events[j]).collect()) };
    let (th, eh) = pick(&high);
    let (tl, el) = pick(&low);
    write_km(run, &a.out_dir.join("km_high.tsv"), &kaplan_meier(&th, &eh)?)?;
    write_km(run, &a.out_dir.join("km_low.tsv"), &kaplan_meier(&tl, &el)?)?;
    let lr = log_rank_test(&th, &eh, &tl, &el)?;
    run.json(&a.out_dir.join("log_rank.json"), &serde_json::json!({ "split_on": label, "quantile": a.quantile, "n_high": high.len(), "n_low": low.len(), "test": lr }))?;
    println!(
        "split_on\t{label}\tn_high\t{}\tn_low\t{}\tchi_square\t{}\tp_value\t{}\tp_value_one_sided\t{}",
        high.len(),
        low.len(),
        lr.chi_square,
        lr.p_value,
        lr.p_value_one_sided
    );
    Ok(())
}

fn repro1(run: &mut Run, a: &Repro1Args) -> Result<()> {
    for seed in run.cli.seed..run.cli.seed + a.seeds.max(1) {
        let mut cfg = Design1Run::scaled(a.scale, seed)?;
        cfg.with_pipeline = a.pipeline;
        cfg.train.threads = run.cli.threads;
        if let Some(n) = a.max_sweeps {
            cfg.train.max_sweeps = n;
        }
        let r = run_design1(&cfg)?;
        let pipe = r
            .pipeline
            .as_ref()
            .map_or(String::new(), |p| format!("\tpipeline_auc\t{}\tpipeline_auc_tie_half\t{}", p.auc, p.auc_tie_half));
        println!(
            "seed\t{seed}\tmean_auc\t{}\tmean_auc_tie_half\t{}\tcoefficient_roc_area\t{}\toracle_auc\t{}{pipe}",
            r.auc.mean_auc, r.auc_tie_half, r.coefficient_roc_area, r.oracle_auc
        );
        if let Some(dir) = &a.out {
            let mut w = run.tsv(&dir.join(format!("auc_seed{seed}.tsv")), &["t", "auc"])?;
            for (t, auc) in r.auc.times.iter().zip(&r.auc.auc_at_t) {
                w.row(&[t.to_string(), auc.map_or("NA".to_string(), |x| x.to_string())])?;
            }
            w.finish()?;
            run.json(&dir.join(format!("report_seed{seed}.json")), &r)?;
        }
    }
    Ok(())
}

fn repro2(run: &mut Run, a: &Repro2Args) -> Result<()> {
    let inputs = design2_inputs(&a.inputs, run.cli.seed)?;
    let mut cfg = Design2Run::new(run.cli.seed);
    cfg.prior_mode = a.prior_mode;
    cfg.train.threads = run.cli.threads;
    if let Some(n) = a.max_sweeps {
        cfg.train.max_sweeps = n;
    }
    let r = run_design2(&inputs, &cfg, !a.no_train)?;
    println!(
        "K\t{}\tbeta_values\t{:?}\tnonzero_w\t{}/{}\tflagged\t{}",
        r.k,
        r.beta_values,
        r.n_nonzero,
        r.expected_nonzero,
        r.flagged.len()
    );
    if let (Some(auc), Some(roc)) = (&r.auc, r.coefficient_roc_area) {
        println!("mean_auc\t{}\tcoefficient_roc_area\t{roc}\toracle_auc\t{}", auc.mean_auc, r.oracle_auc.unwrap_or(f64::NAN));
    }
    if let Some(dir) = &a.out {
        run.json(&dir.join("report.json"), &r)?;
    }
    Ok(())
}
