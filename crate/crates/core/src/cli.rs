//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage error, 1 runtime error. Runtime errors
//! print one line `error: <category>: <detail>` on standard error.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::Settings;
use crate::denoiser::{denoise, Architecture};
use crate::embedding::resolve_pairs;
use crate::error::{Error, Result};
use crate::eval::{evaluate, improvement_table, score_trials, DenoiseSides, EvalReport, ScoreSet};
use crate::io::{self, model_file::ModelMeta};
use crate::nnet::DecayMode;
use crate::pipeline;
use crate::plda::train_plda;
use crate::synth::{gen_corpus, labeled, Corpus};

#[derive(Debug, Parser)]
#[command(
    name = "xvden",
    version,
    about = "Speaker-embedding denoising, PLDA scoring and EER evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Train a denoiser on noisy/clean pairs.
    Train(TrainArgs),
    /// Apply a denoiser to an archive.
    Denoise(DenoiseArgs),
    /// Train a PLDA back-end on labeled embeddings.
    PldaTrain(PldaTrainArgs),
    /// Score a trial list.
    Score(ScoreArgs),
    /// Compute overall and per-bucket EER from scores.
    Eval(EvalArgs),
    /// Relative improvement of one report over another.
    Report(ReportArgs),
    /// EER-vs-SNR grid over denoiser variants.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    arch: Architecture,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    noisy: PathBuf,
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    dev_pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Loss history CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    decay_mode: Option<DecayMode>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DenoiseArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PldaTrainArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    no_length_norm: bool,
    #[arg(long)]
    no_center: bool,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    plda: PathBuf,
    #[arg(long)]
    enroll: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    denoiser: Option<PathBuf>,
    #[arg(long, default_value = "both")]
    denoise_sides: DenoiseSides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Report JSON; DET points go to `<out>.det.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("XVDEN_LOG", "warn");
    let _ = env_logger::Builder::from_env(env)
        .target(env_logger::Target::Stderr)
        .format_timestamp(None)
        .try_init();
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

/// `error: <category>: <detail>` on a single line.
pub fn error_line(e: &Error) -> String {
    let detail = e.to_string().replace(['\n', '\r'], " ");
    format!("error: {}: {}", e.category(), detail)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Denoise(a) => denoise_cmd(a),
        Command::PldaTrain(a) => plda_train(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// File names of a corpus directory.
pub mod corpus_files {
    pub const TRAIN_CLEAN: &str = "train_clean.xvd";
    pub const TRAIN_NOISY: &str = "train_noisy.xvd";
    pub const TRAIN_PAIRS: &str = "train_pairs.tsv";
    pub const DEV_PAIRS: &str = "dev_pairs.tsv";
    pub const TRAIN_LABELS: &str = "train_labels.tsv";
    pub const ENROLL: &str = "enroll.xvd";
    pub const TEST_CLEAN: &str = "test_clean.xvd";
    pub const TEST_NOISY: &str = "test_noisy.xvd";
    pub const TEST_NOISE: &str = "test_noise.tsv";
    pub const TEST_LABELS: &str = "test_labels.tsv";
    pub const TRIALS: &str = "trials.tsv";
    pub const PROTOTYPES: &str = "noise_prototypes.xvd";
    pub const CONFIG: &str = "config.toml";
}

pub fn write_corpus(corpus: &Corpus, settings: &Settings, dir: &Path) -> Result<()> {
    use corpus_files::*;
    create_dir(dir)?;
    io::write_archive(&corpus.train_clean, &dir.join(TRAIN_CLEAN))?;
    io::write_archive(&corpus.train_noisy, &dir.join(TRAIN_NOISY))?;
    io::write_pairs(&corpus.train_pairs, &dir.join(TRAIN_PAIRS))?;
    io::write_pairs(&corpus.dev_pairs, &dir.join(DEV_PAIRS))?;
    io::write_labels(&corpus.train_labels, &dir.join(TRAIN_LABELS))?;
    io::write_archive(&corpus.enroll, &dir.join(ENROLL))?;
    io::write_archive(&corpus.test_clean, &dir.join(TEST_CLEAN))?;
    io::write_archive(&corpus.test_noisy, &dir.join(TEST_NOISY))?;
    io::write_pairs(&corpus.test_noise, &dir.join(TEST_NOISE))?;
    io::write_labels(&corpus.test_labels, &dir.join(TEST_LABELS))?;
    io::write_trials(&corpus.trials, &dir.join(TRIALS))?;
    let protos: Vec<_> = corpus
        .train_prototypes
        .iter()
        .chain(&corpus.unseen_prototypes)
        .map(|p| crate::embedding::Embedding::new(p.id.clone(), p.direction.clone()))
        .collect();
    io::write_archive(&protos, &dir.join(PROTOTYPES))?;
    io::write_atomic(&dir.join(CONFIG), settings.to_toml()?.as_bytes())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut settings = Settings::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        settings.corpus.seed = s;
    }
    let corpus = gen_corpus(&settings.corpus)?;
    write_corpus(&corpus, &settings, &a.out)?;
    log::info!(
        "wrote corpus: {} train pairs, {} dev pairs, {} trials",
        corpus.train_pairs.len(),
        corpus.dev_pairs.len(),
        corpus.trials.len()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let settings = Settings::load(a.config.as_deref())?;
    let mut t = settings.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.decay {
        t.decay = v;
    }
    if let Some(v) = a.decay_mode {
        t.decay_mode = v;
    }
    if let Some(v) = a.batch {
        t.batch = v;
    }
    if let Some(v) = a.hidden {
        t.hidden = v;
    }
    if let Some(v) = a.blocks {
        t.blocks = v;
    }
    let seed = a.seed.unwrap_or(settings.corpus.seed);
    let noisy = io::read_archive(&a.noisy)?;
    let clean = io::read_archive(&a.clean)?;
    let pairs = resolve_pairs(&io::read_pairs(&a.pairs)?, &noisy, &clean)?;
    let dev = resolve_pairs(&io::read_pairs(&a.dev_pairs)?, &noisy, &clean)?;
    let (model, history) = pipeline::train_architecture(a.arch, &t, seed, &pairs, &dev)?;
    let meta = ModelMeta {
        seed: Some(seed),
        config: Some(pipeline::config_echo(a.arch, &t, seed)?),
    };
    io::save_denoiser(&model, &meta, &a.out)?;
    let hist_path = a.history.unwrap_or_else(|| sibling(&a.out, ".history.csv"));
    io::write_atomic(&hist_path, history.to_csv().as_bytes())
}

fn denoise_cmd(a: DenoiseArgs) -> Result<()> {
    let (model, _) = io::load_denoiser(&a.model)?;
    let input = io::read_archive(&a.input)?;
    let out = denoise(&model, &input)?;
    io::archive::encode_with_dim(&out, model.dim())
        .and_then(|bytes| io::write_atomic(&a.out, &bytes))
}

fn plda_train(a: PldaTrainArgs) -> Result<()> {
    let mut p = Settings::load(a.config.as_deref())?.plda;
    if let Some(v) = a.iters {
        p.iters = v;
    }
    if a.no_center {
        p.center = false;
    }
    if a.no_length_norm {
        p.length_norm = false;
    }
    let set = io::read_archive(&a.input)?;
    let labels = io::read_labels(&a.labels)?;
    let rows = labeled(&labels, &set)?;
    let (model, history) = train_plda(&rows, p.center, p.length_norm, p.iters)?;
    log::info!("PLDA log-likelihood per iteration: {history:?}");
    let meta = ModelMeta {
        seed: None,
        config: Some(serde_json::to_value(&p)?),
    };
    io::save_plda(&model, &meta, &a.out)
}

fn score(a: ScoreArgs) -> Result<()> {
    let (plda, _) = io::load_plda(&a.plda)?;
    let denoiser = a.denoiser.as_deref().map(io::load_denoiser).transpose()?;
    let enroll = io::read_archive(&a.enroll)?;
    let test = io::read_archive(&a.test)?;
    let trials = io::read_trials(&a.trials)?;
    let scores = score_trials(
        &enroll,
        &test,
        denoiser.as_ref().map(|(m, _)| (m, a.denoise_sides)),
        &plda,
        &trials,
    )?;
    io::write_scores(&scores.trials, &a.out)
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut scores = io::read_scores(&a.scores)?;
    if scores.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{} holds no scores",
            a.scores.display()
        )));
    }
    let labels = io::read_labels(&a.labels)?;
    let durations: HashMap<&str, Option<f64>> = labels
        .iter()
        .map(|l| (l.key.as_str(), l.duration_s))
        .collect();
    for s in &mut scores {
        s.trial.test_duration_s = durations.get(s.trial.test_key.as_str()).copied().flatten();
    }
    let report = evaluate(&ScoreSet::new(scores))?;
    io::write_atomic(&a.out, report.to_json()?.as_bytes())?;
    io::write_atomic(&sibling(&a.out, ".det.csv"), report.det_csv().as_bytes())
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EvalReport::from_json(&text)
}

/// Tab-separated improvement table with a header row; percentages with two
/// decimals, `NA` where the baseline EER is zero.
pub fn format_improvement(baseline: &EvalReport, system: &EvalReport) -> Result<String> {
    let mut out = String::from("bucket\tbaseline_eer\tsystem_eer\trelative_improvement_pct\n");
    for row in improvement_table(baseline, system)? {
        let pct = row
            .relative_improvement_pct
            .map_or_else(|| "NA".to_string(), |p| format!("{p:.2}"));
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            row.label, row.baseline_eer, row.system_eer, pct
        ));
    }
    Ok(out)
}

fn report(a: ReportArgs) -> Result<()> {
    let baseline = read_report(&a.baseline)?;
    let system = read_report(&a.system)?;
    io::write_atomic(&a.out, format_improvement(&baseline, &system)?.as_bytes())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut settings = Settings::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        settings.corpus.seed = s;
    }
    create_dir(&a.out)?;
    let outcome = pipeline::run_benchmark(&settings)?;
    let rows = pipeline::snr_sweep(
        &outcome,
        &settings.sweep.snr_grid,
        settings.sweep.denoise_sides,
        settings.seed(),
    )?;
    io::write_atomic(
        &a.out.join("sweep.csv"),
        pipeline::sweep_csv(&rows).as_bytes(),
    )?;
    io::write_atomic(
        &a.out.join("report_clean.json"),
        outcome.clean.to_json()?.as_bytes(),
    )?;
    io::write_atomic(
        &a.out.join("report_noisy.json"),
        outcome.noisy.to_json()?.as_bytes(),
    )?;
    for s in &outcome.systems {
        let tag = s.arch.tag();
        io::write_atomic(
            &a.out.join(format!("report_{tag}.json")),
            s.report.to_json()?.as_bytes(),
        )?;
        io::write_atomic(
            &a.out.join(format!("history_{tag}.csv")),
            s.history.to_csv().as_bytes(),
        )?;
        let meta = ModelMeta {
            seed: Some(settings.seed()),
            config: Some(pipeline::config_echo(
                s.arch,
                &settings.train,
                settings.seed(),
            )?),
        };
        io::save_denoiser(&s.model, &meta, &a.out.join(format!("{tag}.xvdm")))?;
    }
    io::write_atomic(&a.out.join("config.toml"), settings.to_toml()?.as_bytes())
}
