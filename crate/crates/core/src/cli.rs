//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::{Config, Patch};
use crate::eval::{self, GroundingPair, Summary};
use crate::synthcorpus::{generate_corpus, Corpus, CorpusSpec, Split};
use crate::trainer::{self, load_checkpoint, read_metrics, TrainOptions, FINAL_CHECKPOINT, METRICS_FILE};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.txt";
const HEATMAP_SCALE: usize = 8;
const FRAME_SCALE: usize = 32;
const MAX_OVERLAYS: usize = 8;

#[derive(Debug, Parser)]
#[command(name = "gvilm", version, about = "Grouped video-language pre-training on a synthetic corpus")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic video-caption corpus
    GenData(GenDataArgs),
    /// Train a model
    Train(TrainArgs),
    /// Compare analytic and finite-difference gradients on a micro model
    Gradcheck(GradcheckArgs),
    /// Text-to-video retrieval on a corpus split
    EvalRetrieval(EvalArgs),
    /// Frame-similarity matrices and boundary gaps on two-scene videos
    EvalTemporal(EvalArgs),
    /// Noun-to-group grounding accuracy against object masks
    EvalGrounding(EvalArgs),
    /// Summarise a training run and its evaluations
    Report(ReportArgs),
    /// Train and evaluate the four loss-ablation scenarios
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Corpus file to write; a manifest is written next to it
    #[arg(long)]
    pub out: PathBuf,
    /// Number of single-scene items (train + val + test)
    #[arg(long, default_value_t = 320)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Frame height and width
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [32, 32])]
    pub hw: Vec<usize>,
    /// Two-scene probe items as a fraction of --size
    #[arg(long, default_value_t = 0.1)]
    pub twoscene_frac: f64,
    /// Patch size the corpus must divide, as TxHxW
    #[arg(long, default_value = "2x8x8")]
    pub patch: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Key-value config file; defaults apply when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Override one config key, e.g. --set train.steps=100
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from a checkpoint written by an earlier run with the same config
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds to check
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Also write gradcheck.json here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    Probe,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
            SplitArg::Probe => Split::Probe,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Split to evaluate (retrieval and grounding; temporal always uses probe items)
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Training run directory
    #[arg(long)]
    pub run: PathBuf,
    /// Directories written by eval-* commands
    #[arg(long = "eval")]
    pub evals: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub quiet: bool,
}

/// Written into every output directory before any work starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub corpus_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint: Option<String>,
    pub started_unix: u64,
}

impl RunManifest {
    fn new(command: &str, argv: &[String]) -> Self {
        Self {
            command: command.into(),
            argv: argv.to_vec(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: None,
            config_hash: None,
            corpus_hash: None,
            checkpoint: None,
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    fn with_config(mut self, c: &Config) -> Self {
        self.config = Some(c.to_kv());
        self.config_hash = Some(c.hash());
        self
    }

    fn with_corpus(mut self, c: &Corpus) -> Self {
        self.corpus_hash = Some(c.content_hash());
        self
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn dispatch(cmd: Command, argv: &[String]) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a, argv),
        Command::Train(a) => train(a, argv),
        Command::Gradcheck(a) => gradcheck(a, argv),
        Command::EvalRetrieval(a) => eval_retrieval(a, argv),
        Command::EvalTemporal(a) => eval_temporal(a, argv),
        Command::EvalGrounding(a) => eval_grounding(a, argv),
        Command::Report(a) => report(a, argv),
        Command::Ablate(a) => ablate(a, argv),
    }
}

/// Config file (or defaults) with `KEY=VALUE` overrides applied, parsed as
/// one listing so derived defaults follow the overrides.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut text = match path {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    for o in overrides {
        if !o.contains('=') {
            return Err(Error::arg(format!("--set expects KEY=VALUE, got {o:?}")));
        }
        text.push('\n');
        text.push_str(o);
    }
    Config::parse_str(&text)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn gen_data(a: GenDataArgs, argv: &[String]) -> Result<()> {
    let spec = CorpusSpec {
        size: a.size,
        frames: a.frames,
        height: a.hw[0],
        width: a.hw[1],
        patch: a.patch.parse::<Patch>()?,
        twoscene_frac: a.twoscene_frac,
        ..CorpusSpec::default()
    };
    spec.validate()?;
    let dir = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    RunManifest::new("gen-data", argv).write(&dir)?;
    let corpus = generate_corpus(&spec, a.seed)?;
    corpus.save(&a.out)?;
    println!(
        "wrote {} items ({} probe) to {}; hash {}",
        corpus.items.len(),
        corpus.indices(Split::Probe).len(),
        a.out.display(),
        corpus.content_hash()
    );
    Ok(())
}

fn train(a: TrainArgs, argv: &[String]) -> Result<()> {
    let corpus = Corpus::load(&a.data)?;
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        stop_after: None,
        progress_every: (!a.quiet).then_some(100),
    };
    let outcome = if let Some(ck_path) = &a.resume {
        let ck = load_checkpoint(ck_path)?;
        if a.config.is_some() || !a.overrides.is_empty() {
            let cfg = resolve_config(a.config.as_deref(), &a.overrides)?;
            ck.expect_hash(&cfg.hash())?;
        }
        let mut m = RunManifest::new("train", argv).with_config(&ck.config).with_corpus(&corpus);
        m.checkpoint = Some(ck_path.display().to_string());
        m.write(&a.out)?;
        fs::write(a.out.join(CONFIG_FILE), ck.config.to_kv())?;
        trainer::train_from(ck.into_state()?, &corpus, &opts)?
    } else {
        let cfg = resolve_config(a.config.as_deref(), &a.overrides)?;
        RunManifest::new("train", argv).with_config(&cfg).with_corpus(&corpus).write(&a.out)?;
        fs::write(a.out.join(CONFIG_FILE), cfg.to_kv())?;
        trainer::train(&cfg, &corpus, &opts)?
    };
    if let Some(last) = outcome.metrics.last() {
        println!("step {} loss {:.4}; checkpoint {}", last.step, last.loss_total, a.out.join(FINAL_CHECKPOINT).display());
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs, argv: &[String]) -> Result<()> {
    if let Some(dir) = &a.out {
        RunManifest::new("gradcheck", argv).write(dir)?;
    }
    let mut reports = Vec::new();
    let mut worst: f64 = 0.0;
    for seed in a.seed..a.seed + a.seeds.max(1) {
        let r = trainer::gradcheck(seed)?;
        for c in &r.checks {
            println!(
                "seed {seed} {:<12} max rel err {:.3e}  ({} [{}])",
                c.loss.name(),
                c.max_rel_err,
                c.param,
                c.index
            );
        }
        worst = worst.max(r.worst());
        reports.push(r);
    }
    if let Some(dir) = &a.out {
        write_json(&dir.join("gradcheck.json"), &reports)?;
    }
    if worst > 1e-4 {
        return Err(Error::Numeric(format!("max relative error {worst:.3e} exceeds 1e-4")));
    }
    Ok(())
}

fn load_eval_inputs(a: &EvalArgs, command: &str, argv: &[String]) -> Result<(crate::encoders::Model<f32>, Corpus)> {
    let ck = load_checkpoint(&a.ckpt)?;
    let corpus = Corpus::load(&a.data)?;
    let mut m = RunManifest::new(command, argv).with_config(&ck.config).with_corpus(&corpus);
    m.checkpoint = Some(a.ckpt.display().to_string());
    m.write(&a.out)?;
    Ok((ck.model()?, corpus))
}

pub const RETRIEVAL_FILE: &str = "retrieval.json";
pub const TEMPORAL_FILE: &str = "temporal.json";
pub const GROUNDING_FILE: &str = "grounding.json";

fn eval_retrieval(a: EvalArgs, argv: &[String]) -> Result<()> {
    let (model, corpus) = load_eval_inputs(&a, "eval-retrieval", argv)?;
    let (sim, rep) = eval::evaluate_retrieval(&model, &corpus, a.split.into())?;
    write_json(&a.out.join(RETRIEVAL_FILE), &rep)?;
    write_json(&a.out.join("retrieval_sim.json"), &sim)?;
    let (w, h, px) = eval::render_heatmap(&sim, HEATMAP_SCALE, -1.0, 1.0);
    eval::write_png(&a.out.join("retrieval_sim.png"), w, h, &px)?;
    println!(
        "text->video over {}: R@1 {:.2}  R@5 {:.2}  R@10 {:.2}  MedR {}",
        rep.pool, rep.r1, rep.r5, rep.r10, rep.medr
    );
    Ok(())
}

fn eval_temporal(a: EvalArgs, argv: &[String]) -> Result<()> {
    let (model, corpus) = load_eval_inputs(&a, "eval-temporal", argv)?;
    let (mats, rep) = eval::evaluate_temporal(&model, &corpus)?;
    write_json(&a.out.join(TEMPORAL_FILE), &rep)?;
    for (m, id) in mats.iter().zip(&rep.items) {
        let (w, h, px) = eval::render_heatmap(m, FRAME_SCALE, -1.0, 1.0);
        eval::write_png(&a.out.join(format!("frames_{id:04}.png")), w, h, &px)?;
    }
    println!("mean boundary gap over {} two-scene videos: {:.4}", rep.items.len(), rep.mean_gap);
    Ok(())
}

#[derive(Serialize)]
struct GroundingFile<'a> {
    #[serde(flatten)]
    report: &'a eval::GroundingReport,
    details: &'a [GroundingPair],
}

fn eval_grounding(a: EvalArgs, argv: &[String]) -> Result<()> {
    let (model, corpus) = load_eval_inputs(&a, "eval-grounding", argv)?;
    let ids = corpus.indices(a.split.into());
    let (pairs, overlaps) = eval::grounding_pairs(&model, &corpus, &ids)?;
    let rep = eval::grounding_report(&pairs, &overlaps);
    write_json(
        &a.out.join(GROUNDING_FILE),
        &GroundingFile {
            report: &rep,
            details: &pairs,
        },
    )?;
    for p in pairs.iter().take(MAX_OVERLAYS) {
        let (w, h, px) = eval::render_overlay(&corpus.items[p.item].video, model.grid(), &p.voxels);
        eval::write_png(&a.out.join(format!("grounding_{:04}_{}.png", p.item, p.object)), w, h, &px)?;
    }
    println!(
        "grounding accuracy {:.4} over {} pairs (permutation null {:.4})",
        rep.accuracy, rep.pairs, rep.null_rate
    );
    Ok(())
}

fn read_if_exists<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
}

/// Summary of a run directory plus any evaluation directories.
pub fn summarize(run: &Path, evals: &[PathBuf]) -> Result<Summary> {
    let mut s = Summary::default();
    let metrics_path = run.join(METRICS_FILE);
    let metrics = if metrics_path.exists() {
        read_metrics(&metrics_path)?
    } else {
        Vec::new()
    };
    s = s.with_metrics(&metrics);
    let cfg_path = run.join(CONFIG_FILE);
    if cfg_path.exists() {
        s.config_hash = Some(Config::from_file(&cfg_path)?.hash());
    }
    for dir in std::iter::once(run).chain(evals.iter().map(PathBuf::as_path)) {
        if let Some(r) = read_if_exists(&dir.join(RETRIEVAL_FILE))? {
            s.retrieval = Some(r);
        }
        if let Some(t) = read_if_exists(&dir.join(TEMPORAL_FILE))? {
            s.temporal = Some(t);
        }
        if let Some(g) = read_if_exists(&dir.join(GROUNDING_FILE))? {
            s.grounding = Some(g);
        }
    }
    Ok(s)
}

fn report(a: ReportArgs, argv: &[String]) -> Result<()> {
    RunManifest::new("report", argv).write(&a.out)?;
    let s = summarize(&a.run, &a.evals)?;
    eval::write_summary(&a.out, &s)?;
    let metrics_path = a.run.join(METRICS_FILE);
    if metrics_path.exists() {
        let (w, h, px) = eval::loss_curve_png(&read_metrics(&metrics_path)?);
        eval::write_png(&a.out.join("loss_curves.png"), w, h, &px)?;
    }
    println!("wrote {}", a.out.join(eval::SUMMARY_FILE).display());
    Ok(())
}

/// Loss weights (temporal, grounding, contrastive) of the four ablation
/// scenarios.
pub const SCENARIOS: [(f64, f64, f64); 4] = [(1.0, 1.0, 1.0), (0.0, 1.0, 1.0), (1.0, 0.0, 1.0), (0.0, 0.0, 1.0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub scenario: usize,
    pub w_temporal: f64,
    pub w_grounding: f64,
    pub w_contrastive: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub gap: f64,
    pub grounding: f64,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("scenario  w_t  w_g  w_c    R@1    R@5   R@10     gap  grounding\n");
    for r in rows {
        out.push_str(&format!(
            "{:>8}  {:>3}  {:>3}  {:>3}  {:>5.1}  {:>5.1}  {:>5.1}  {:>6.3}  {:>9.3}\n",
            r.scenario, r.w_temporal, r.w_grounding, r.w_contrastive, r.r1, r.r5, r.r10, r.gap, r.grounding
        ));
    }
    out
}

fn ablate(a: AblateArgs, argv: &[String]) -> Result<()> {
    let base = resolve_config(a.config.as_deref(), &a.overrides)?;
    let corpus = Corpus::load(&a.data)?;
    RunManifest::new("ablate", argv).with_config(&base).with_corpus(&corpus).write(&a.out)?;
    let mut rows = Vec::new();
    for (i, &(wt, wg, wc)) in SCENARIOS.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.loss.w_temporal = wt;
        cfg.loss.w_grounding = wg;
        cfg.loss.w_contrastive = wc;
        let dir = a.out.join(format!("scenario{}", i + 1));
        RunManifest::new("ablate", argv).with_config(&cfg).with_corpus(&corpus).write(&dir)?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_kv())?;
        if !a.quiet {
            eprintln!("scenario {}: w = ({wt}, {wg}, {wc})", i + 1);
        }
        let opts = TrainOptions {
            out_dir: Some(dir.clone()),
            stop_after: None,
            progress_every: (!a.quiet).then_some(250),
        };
        let out = trainer::train(&cfg, &corpus, &opts)?;
        let model = &out.state.model;
        let (_, ret) = eval::evaluate_retrieval(model, &corpus, Split::Test)?;
        let (_, temp) = eval::evaluate_temporal(model, &corpus)?;
        let gr = eval::grounding_accuracy(model, &corpus, &corpus.indices(Split::Test))?;
        write_json(&dir.join(RETRIEVAL_FILE), &ret)?;
        write_json(&dir.join(TEMPORAL_FILE), &temp)?;
        write_json(&dir.join(GROUNDING_FILE), &gr)?;
        eval::write_summary(&dir, &summarize(&dir, &[])?)?;
        rows.push(AblationRow {
            scenario: i + 1,
            w_temporal: wt,
            w_grounding: wg,
            w_contrastive: wc,
            r1: ret.r1,
            r5: ret.r5,
            r10: ret.r10,
            gap: temp.mean_gap,
            grounding: gr.accuracy,
        });
    }
    write_json(&a.out.join("ablation.json"), &rows)?;
    let table = ablation_table(&rows);
    fs::write(a.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}
