//! Subcommands of the `sslsv` binary.
//!
//! Every command writes its artifacts plus a `config.resolved` file into
//! `--out`. Passing that file back through `--config` replays the run.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use sslsv_core::error::Error as CoreError;
use sslsv_core::features::read_header;
use sslsv_core::gradcheck::run_suite;
use sslsv_core::train::{list_checkpoints, load_checkpoint, score_with_head};
use sslsv_core::{
    build_trials, generate_synthetic_corpus, read_trials, rel_improvement, select_best_checkpoint,
    spearman_rho, subset_speakers, train, write_trials, AdamWConfig, FrameEncoderConfig,
    HeadConfig, Manifest, PoolingConfig, PoolingKind, SynthSpec, TrainConfig, TrialList,
    UtteranceRecord,
};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_INVALID: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

const EXIT_CODES_HELP: &str = "\
Exit codes:
  0  success
  2  usage error (unknown flag, bad flag value)
  3  I/O error or missing file
  4  invalid input: malformed file, broken invariant, bad configuration
  5  numerical failure: non-finite gradient, zero-norm embedding, failed gradient check";

/// Reference zero-shot EERs per SSL model, shipped so `tables` runs offline.
pub const TABLE1_CSV: &str = include_str!("../data/table1.csv");

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn invalid(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError {
            code: EXIT_IO,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::Io { .. } => EXIT_IO,
            CoreError::Csv { source, .. } if matches!(source.kind(), csv::ErrorKind::Io(_)) => {
                EXIT_IO
            }
            CoreError::NonFinite { .. }
            | CoreError::ZeroNorm(_)
            | CoreError::NonFiniteGradient { .. }
            | CoreError::Statistics(_) => EXIT_NUMERIC,
            _ => EXIT_INVALID,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "sslsv",
    version,
    about = "Speaker verification over precomputed multi-layer SSL features",
    after_help = EXIT_CODES_HELP,
    args_override_self = true
)]
pub struct Cli {
    /// Seed for every random draw of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Flat `key=value` file; keys are long flag names. Flags given on the
    /// command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic multi-layer corpus and its manifest.
    GenSynth(GenSynthArgs),
    /// Build a trial list from one or more manifests.
    GenTrials(GenTrialsArgs),
    /// Score trials with pooled raw features, per layer.
    ZeroShot(ZeroShotArgs),
    /// Train an embedding head with AM-softmax.
    Train(TrainArgs),
    /// Pick the best checkpoint of a training run and score trials with it.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    GradCheck(GradCheckArgs),
    /// Relative improvements over the FBank row and the Spearman correlation.
    Tables(TablesArgs),
    /// Train on nested speaker subsets and evaluate each.
    DataEfficiency(DataEfficiencyArgs),
}

#[derive(Args, Debug, Clone)]
pub struct GenSynthArgs {
    #[arg(long, default_value_t = 20)]
    pub speakers: usize,
    #[arg(long, default_value_t = 10)]
    pub utts: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 200)]
    pub min_frames: usize,
    #[arg(long, default_value_t = 600)]
    pub max_frames: usize,
    #[arg(long, default_value_t = 1.0)]
    pub speaker_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub frame_noise: f64,
    /// Per-layer speaker signal gain, comma separated. Defaults to a ramp
    /// from 0 at the first layer to 1 at the last.
    #[arg(long, value_delimiter = ',')]
    pub layer_mix: Vec<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct GenTrialsArgs {
    /// Manifest CSV; repeat to build lists separately and concatenate them.
    #[arg(long, required = true, value_delimiter = ',')]
    pub manifest: Vec<PathBuf>,
    /// Keep utterances strictly longer than this (seconds).
    #[arg(long, default_value_t = 8.0)]
    pub min_dur: f64,
    /// Keep utterances strictly shorter than this (seconds).
    #[arg(long, default_value_t = 12.0)]
    pub max_dur: f64,
    #[arg(long, default_value_t = 5)]
    pub neg_per_pos: usize,
}

#[derive(Args, Debug, Clone)]
pub struct ZeroShotArgs {
    #[arg(long, required = true, value_delimiter = ',')]
    pub manifest: Vec<PathBuf>,
    #[arg(long)]
    pub trials: PathBuf,
    /// Score a single layer instead of all of them.
    #[arg(long)]
    pub layer: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct HeadArgs {
    /// stats, attentive_stats or channel_context_stats.
    #[arg(long, default_value = "stats")]
    pub pooling: PoolingKind,
    #[arg(long, default_value_t = 128)]
    pub attention_hidden: usize,
    /// Condition channel-context attention on utterance statistics.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub context: bool,
    #[arg(long, default_value_t = 1e-6)]
    pub eps_std: f64,
    #[arg(long, default_value_t = 192)]
    pub embed_dim: usize,
    /// Dilated frame-encoder blocks before pooling; 0 disables the encoder.
    #[arg(long, default_value_t = 0)]
    pub encoder_blocks: usize,
    #[arg(long, default_value_t = 512)]
    pub encoder_hidden: usize,
    /// One dilation per block, comma separated; empty means all 1.
    #[arg(long, value_delimiter = ',')]
    pub dilations: Vec<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 100_000)]
    pub steps: u64,
    #[arg(long, default_value_t = 5_000)]
    pub checkpoint_every: u64,
    #[arg(long, default_value_t = 40)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 300)]
    pub crop_frames: usize,
    #[arg(long, default_value_t = 5e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 30.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 0.4)]
    pub margin: f64,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, required = true, value_delimiter = ',')]
    pub manifest: Vec<PathBuf>,
    #[command(flatten)]
    pub head: HeadArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Output directory of a `train` run.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, required = true, value_delimiter = ',')]
    pub manifest: Vec<PathBuf>,
    #[arg(long)]
    pub trials: PathBuf,
    /// Use this checkpoint step instead of selecting the best one.
    #[arg(long)]
    pub checkpoint: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct GradCheckArgs {
    /// Random instances per checked operation.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
}

#[derive(Args, Debug, Clone)]
pub struct TablesArgs {
    /// CSV with columns `model,eer_libri,eer_vox` and an `FBank` row.
    /// Defaults to the bundled reference table.
    #[arg(long)]
    pub table1: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct DataEfficiencyArgs {
    /// Training manifest.
    #[arg(long, required = true, value_delimiter = ',')]
    pub manifest: Vec<PathBuf>,
    /// Manifest holding the trial utterances; defaults to `--manifest`.
    #[arg(long, value_delimiter = ',')]
    pub eval_manifest: Vec<PathBuf>,
    #[arg(long)]
    pub trials: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.6,1.0")]
    pub fractions: Vec<f64>,
    #[command(flatten)]
    pub head: HeadArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

/// Effective parameters of a run, in insertion order.
#[derive(Default)]
struct Resolved(Vec<(String, String)>);

impl Resolved {
    fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.0.push((key.replace('_', "-"), value.to_string()));
        self
    }

    /// Empty lists are left out so a replay falls back to the default.
    fn list<T: Display>(&mut self, key: &str, values: &[T]) -> &mut Self {
        if values.is_empty() {
            return self;
        }
        let joined: Vec<String> = values.iter().map(T::to_string).collect();
        self.put(key, joined.join(","))
    }

    fn paths(&mut self, key: &str, values: &[PathBuf]) -> &mut Self {
        let shown: Vec<String> = values.iter().map(|p| p.display().to_string()).collect();
        self.list(key, &shown)
    }

    fn write(&self, dir: &Path) -> CliResult<()> {
        let text: String = self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let path = dir.join("config.resolved");
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

fn create_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Merges manifests into one; feature paths become resolved paths.
fn load_manifests(paths: &[PathBuf]) -> CliResult<Manifest> {
    if let [single] = paths {
        return Ok(Manifest::load(single)?);
    }
    let mut records = Vec::new();
    for p in paths {
        let m = Manifest::load(p)?;
        for r in &m.records {
            records.push(UtteranceRecord {
                path: m.resolve(r).display().to_string(),
                ..r.clone()
            });
        }
    }
    Ok(Manifest::new(PathBuf::new(), records)?)
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

pub fn cmd_gen_synth(cli: &Cli, a: &GenSynthArgs) -> CliResult<()> {
    let layer_mix = if a.layer_mix.is_empty() {
        (0..a.layers)
            .map(|l| {
                if a.layers == 1 {
                    1.0
                } else {
                    l as f64 / (a.layers - 1) as f64
                }
            })
            .collect()
    } else {
        a.layer_mix.clone()
    };
    let spec = SynthSpec {
        n_speakers: a.speakers,
        utts_per_speaker: a.utts,
        layers: a.layers,
        dim: a.dim,
        frames_range: (a.min_frames, a.max_frames),
        speaker_scale: a.speaker_scale,
        frame_noise: a.frame_noise,
        layer_mix: layer_mix.clone(),
        seed: cli.seed,
    };
    spec.validate()?;
    create_out(&cli.out)?;
    let manifest = generate_synthetic_corpus(&spec, &cli.out)?;
    let mut r = base_resolved(cli, "gen-synth");
    r.put("speakers", a.speakers)
        .put("utts", a.utts)
        .put("layers", a.layers)
        .put("dim", a.dim)
        .put("min_frames", a.min_frames)
        .put("max_frames", a.max_frames)
        .put("speaker_scale", a.speaker_scale)
        .put("frame_noise", a.frame_noise)
        .list("layer_mix", &layer_mix);
    r.write(&cli.out)?;
    println!(
        "wrote {} utterances of {} speakers to {}",
        manifest.records.len(),
        a.speakers,
        cli.out.join("manifest.csv").display()
    );
    Ok(())
}

pub fn cmd_gen_trials(cli: &Cli, a: &GenTrialsArgs) -> CliResult<()> {
    let mut lists = Vec::new();
    for path in &a.manifest {
        let m = Manifest::load(path)?;
        lists.push(build_trials(
            &m,
            a.min_dur,
            a.max_dur,
            a.neg_per_pos,
            cli.seed,
        )?);
    }
    let list = TrialList::concat(lists);
    create_out(&cli.out)?;
    write_trials(&list, cli.out.join("trials.txt"))?;
    let mut r = base_resolved(cli, "gen-trials");
    r.paths("manifest", &a.manifest)
        .put("min_dur", a.min_dur)
        .put("max_dur", a.max_dur)
        .put("neg_per_pos", a.neg_per_pos);
    r.write(&cli.out)?;
    println!(
        "{} trials ({} target, {} nontarget)",
        list.len(),
        list.n_target(),
        list.n_nontarget()
    );
    Ok(())
}

pub fn cmd_zero_shot(cli: &Cli, a: &ZeroShotArgs) -> CliResult<()> {
    let manifest = load_manifests(&a.manifest)?;
    let trials = read_trials(&a.trials)?;
    let sets = sslsv_core::eval::zero_shot_scores(&manifest, &trials, a.layer)?;
    let report = sslsv_core::eval::report_from_layers(&sets)?;
    create_out(&cli.out)?;
    for (l, set) in &sets {
        set.write(cli.out.join(format!("scores_layer{l}.txt")))?;
    }
    report.write_csv(cli.out.join("report.csv"))?;
    let mut r = base_resolved(cli, "zero-shot");
    r.paths("manifest", &a.manifest)
        .put("trials", a.trials.display());
    if let Some(l) = a.layer {
        r.put("layer", l);
    }
    r.write(&cli.out)?;
    if let Some(per_layer) = &report.per_layer {
        for (l, e) in per_layer {
            println!("layer {l}: EER {}%", pct(*e));
        }
    }
    println!(
        "best layer {}: EER {}%",
        report.best_layer.map(|l| l.to_string()).unwrap_or_default(),
        pct(report.eer)
    );
    Ok(())
}

fn head_config(h: &HeadArgs, input_dim: usize, n_layers: usize) -> CliResult<HeadConfig> {
    let frame_encoder = (h.encoder_blocks > 0).then(|| FrameEncoderConfig {
        n_blocks: h.encoder_blocks,
        hidden: h.encoder_hidden,
        dilations: if h.dilations.is_empty() {
            vec![1; h.encoder_blocks]
        } else {
            h.dilations.clone()
        },
    });
    let cfg = HeadConfig {
        input_dim,
        n_layers,
        pooling: PoolingConfig {
            kind: h.pooling,
            attention_hidden: h.attention_hidden,
            context: h.context,
            eps_std: h.eps_std,
        },
        embed_dim: h.embed_dim,
        frame_encoder,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(o: &OptimArgs, seed: u64) -> CliResult<TrainConfig> {
    let cfg = TrainConfig {
        total_steps: o.steps,
        checkpoint_every: o.checkpoint_every,
        batch_size: o.batch_size,
        crop_frames: o.crop_frames,
        seed,
        optimizer: AdamWConfig {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.adam_eps,
            weight_decay: o.weight_decay,
        },
        scale: o.scale,
        margin: o.margin,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Feature dimensions `(layers, dim)` read from the first manifest entry.
fn feature_shape(manifest: &Manifest) -> CliResult<(usize, usize)> {
    let first = manifest
        .records
        .first()
        .ok_or_else(|| CliError::invalid("manifest has no utterances"))?;
    let (layers, _, dim) = read_header(manifest.resolve(first))?;
    Ok((layers, dim))
}

fn put_head_optim(r: &mut Resolved, h: &HeadArgs, o: &OptimArgs) {
    r.put("pooling", h.pooling.as_str())
        .put("attention_hidden", h.attention_hidden)
        .put("context", h.context)
        .put("eps_std", h.eps_std)
        .put("embed_dim", h.embed_dim)
        .put("encoder_blocks", h.encoder_blocks)
        .put("encoder_hidden", h.encoder_hidden)
        .list("dilations", &h.dilations)
        .put("steps", o.steps)
        .put("checkpoint_every", o.checkpoint_every)
        .put("batch_size", o.batch_size)
        .put("crop_frames", o.crop_frames)
        .put("lr", o.lr)
        .put("beta1", o.beta1)
        .put("beta2", o.beta2)
        .put("adam_eps", o.adam_eps)
        .put("weight_decay", o.weight_decay)
        .put("scale", o.scale)
        .put("margin", o.margin);
}

pub fn cmd_train(cli: &Cli, a: &TrainArgs) -> CliResult<()> {
    let manifest = load_manifests(&a.manifest)?;
    let (layers, dim) = feature_shape(&manifest)?;
    let head = head_config(&a.head, dim, layers)?;
    let tcfg = train_config(&a.optim, cli.seed)?;
    create_out(&cli.out)?;
    let outcome = train(&manifest, &tcfg, &head, &cli.out)?;
    let mut r = base_resolved(cli, "train");
    r.paths("manifest", &a.manifest);
    put_head_optim(&mut r, &a.head, &a.optim);
    r.write(&cli.out)?;
    println!(
        "trained {} steps on {} speakers, {} checkpoints, final loss {:.4}",
        tcfg.total_steps,
        outcome.speakers.len(),
        outcome.checkpoints.len(),
        outcome.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Returns `(step, eer)` of the chosen checkpoint after writing scores and
/// reports into `out`.
fn evaluate_run(
    run: &Path,
    manifest: &Manifest,
    trials: &TrialList,
    checkpoint: Option<u64>,
    out: &Path,
) -> CliResult<(u64, f64)> {
    let cfg_path = run.join("head.cfg");
    let text = fs::read_to_string(&cfg_path).map_err(|e| CliError::io(&cfg_path, e))?;
    let head = HeadConfig::from_kv(&text)?;
    let mut checkpoints = list_checkpoints(run)?;
    if let Some(step) = checkpoint {
        checkpoints.retain(|(s, _)| *s == step);
        if checkpoints.is_empty() {
            return Err(CliError {
                code: EXIT_IO,
                message: format!("{}: no checkpoint for step {step}", run.display()),
            });
        }
    }
    let (step, report, all) = select_best_checkpoint(&checkpoints, trials, manifest, &head)?;
    let dir = &checkpoints
        .iter()
        .find(|(s, _)| *s == step)
        .expect("selected")
        .1;
    let params = load_checkpoint(dir, &head)?;
    let scores = score_with_head(&params, &head, manifest, trials)?;
    create_out(out)?;
    scores.write(out.join("scores.txt"))?;
    report.write_csv(out.join("report.csv"))?;
    let path = out.join("checkpoint_eers.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::invalid(e.to_string()))?;
    let csv_err = |e: csv::Error| CliError::invalid(format!("{}: {e}", path.display()));
    w.write_record(["step", "eer"]).map_err(csv_err)?;
    for (s, e) in &all {
        w.write_record([s.to_string(), e.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok((step, report.eer))
}

pub fn cmd_eval(cli: &Cli, a: &EvalArgs) -> CliResult<()> {
    let manifest = load_manifests(&a.manifest)?;
    let trials = read_trials(&a.trials)?;
    let (step, eer) = evaluate_run(&a.run, &manifest, &trials, a.checkpoint, &cli.out)?;
    let mut r = base_resolved(cli, "eval");
    r.put("run", a.run.display())
        .paths("manifest", &a.manifest)
        .put("trials", a.trials.display());
    if let Some(c) = a.checkpoint {
        r.put("checkpoint", c);
    }
    r.write(&cli.out)?;
    println!("checkpoint {step}: EER {}%", pct(eer));
    Ok(())
}

pub fn cmd_grad_check(cli: &Cli, a: &GradCheckArgs) -> CliResult<()> {
    let results = run_suite(cli.seed, a.instances)?;
    create_out(&cli.out)?;
    let path = cli.out.join("grad_check.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::invalid(e.to_string()))?;
    let csv_err = |e: csv::Error| CliError::invalid(format!("{}: {e}", path.display()));
    w.write_record([
        "operation",
        "instances",
        "max_rel_error",
        "tolerance",
        "passed",
    ])
    .map_err(csv_err)?;
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{:<44} n={:<3} max_rel_err={:.3e} {}",
            r.name,
            r.instances,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
        w.write_record([
            r.name.clone(),
            r.instances.to_string(),
            format!("{:e}", r.max_rel_error),
            format!("{:e}", r.tolerance),
            r.passed().to_string(),
        ])
        .map_err(csv_err)?;
        worst = worst.max(r.max_rel_error);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    let mut r = base_resolved(cli, "grad-check");
    r.put("instances", a.instances);
    r.write(&cli.out)?;
    println!("max relative error {worst:.3e}");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_NUMERIC,
            message: format!("gradient check failed for {}", failed.join(", ")),
        })
    }
}

/// One row of the EER table.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub model: String,
    pub eer_libri: f64,
    pub eer_vox: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableSummary {
    /// `(row, delta_libri, delta_vox)` for every row, baseline included.
    pub deltas: Vec<(TableRow, f64, f64)>,
    pub rho: f64,
    pub p: f64,
}

pub fn parse_table1(text: &str, origin: &str) -> CliResult<Vec<TableRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| CliError::invalid(format!("{origin}: {e}")))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CliError::invalid(format!("{origin}: missing column {name}")))
    };
    let (cm, cl, cv) = (col("model")?, col("eer_libri")?, col("eer_vox")?);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::invalid(format!("{origin}: {e}")))?;
        let num = |c: usize| {
            rec.get(c)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::invalid(format!("{origin}: line {}: bad number", i + 2)))
        };
        rows.push(TableRow {
            model: rec.get(cm).unwrap_or_default().trim().to_string(),
            eer_libri: num(cl)?,
            eer_vox: num(cv)?,
        });
    }
    Ok(rows)
}

/// Δ per row against the `FBank` row, and Spearman's ρ between the two Δ
/// columns over the non-baseline rows.
pub fn summarize_table1(rows: &[TableRow]) -> CliResult<TableSummary> {
    let base = rows
        .iter()
        .find(|r| r.model == "FBank")
        .ok_or_else(|| CliError::invalid("table has no FBank baseline row"))?;
    let others: Vec<&TableRow> = rows.iter().filter(|r| r.model != "FBank").collect();
    if others.len() < 3 {
        return Err(CliError::invalid(
            "need at least 3 non-baseline rows for a rank correlation",
        ));
    }
    let deltas = rows
        .iter()
        .map(|r| {
            Ok((
                r.clone(),
                rel_improvement(base.eer_libri, r.eer_libri)?,
                rel_improvement(base.eer_vox, r.eer_vox)?,
            ))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let others: Vec<&(TableRow, f64, f64)> = deltas
        .iter()
        .filter(|(r, _, _)| r.model != "FBank")
        .collect();
    let x: Vec<f64> = others.iter().map(|d| d.1).collect();
    let y: Vec<f64> = others.iter().map(|d| d.2).collect();
    let (rho, p) = spearman_rho(&x, &y)?;
    Ok(TableSummary { deltas, rho, p })
}

pub fn cmd_tables(cli: &Cli, a: &TablesArgs) -> CliResult<TableSummary> {
    let (text, origin) = match &a.table1 {
        Some(p) => (
            fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
            p.display().to_string(),
        ),
        None => (TABLE1_CSV.to_string(), "bundled table1.csv".to_string()),
    };
    let summary = summarize_table1(&parse_table1(&text, &origin)?)?;
    create_out(&cli.out)?;
    let path = cli.out.join("table1_delta.csv");
    let csv_err = |e: csv::Error| CliError::invalid(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["model", "eer_libri", "delta_libri", "eer_vox", "delta_vox"])
        .map_err(csv_err)?;
    for (r, dl, dv) in &summary.deltas {
        w.write_record([
            r.model.clone(),
            r.eer_libri.to_string(),
            format!("{dl:.1}"),
            r.eer_vox.to_string(),
            format!("{dv:.1}"),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    let path = cli.out.join("spearman.csv");
    let csv_err = |e: csv::Error| CliError::invalid(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["spearman_rho", "p"]).map_err(csv_err)?;
    w.write_record([summary.rho.to_string(), summary.p.to_string()])
        .map_err(csv_err)?;
    w.flush().map_err(|e| CliError::io(&path, e))?;
    let mut r = base_resolved(cli, "tables");
    if let Some(p) = &a.table1 {
        r.put("table1", p.display());
    }
    r.write(&cli.out)?;
    for (row, dl, dv) in &summary.deltas {
        println!("{:<36} {dl:>6.1} {dv:>6.1}", row.model);
    }
    println!("spearman_rho,p");
    println!("{:.4},{:.4}", summary.rho, summary.p);
    Ok(summary)
}

/// Returns `(fraction, n_speakers, eer)` rows. Each row is appended to
/// `data_efficiency.csv` as soon as its condition finishes.
pub fn cmd_data_efficiency(cli: &Cli, a: &DataEfficiencyArgs) -> CliResult<Vec<(f64, usize, f64)>> {
    let manifest = load_manifests(&a.manifest)?;
    let eval_manifest = if a.eval_manifest.is_empty() {
        manifest.clone()
    } else {
        load_manifests(&a.eval_manifest)?
    };
    let trials = read_trials(&a.trials)?;
    let (layers, dim) = feature_shape(&manifest)?;
    let head = head_config(&a.head, dim, layers)?;
    let tcfg = train_config(&a.optim, cli.seed)?;
    let subsets = subset_speakers(&manifest, &a.fractions, cli.seed)?;
    create_out(&cli.out)?;
    let mut r = base_resolved(cli, "data-efficiency");
    r.paths("manifest", &a.manifest)
        .paths("eval_manifest", &a.eval_manifest)
        .put("trials", a.trials.display())
        .list("fractions", &a.fractions);
    put_head_optim(&mut r, &a.head, &a.optim);
    r.write(&cli.out)?;

    let path = cli.out.join("data_efficiency.csv");
    let csv_err = |e: csv::Error| CliError::invalid(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["fraction", "eer"]).map_err(csv_err)?;
    w.flush().map_err(|e| CliError::io(&path, e))?;
    let mut rows = Vec::new();
    for (f, subset) in a.fractions.iter().zip(&subsets) {
        let dir = cli.out.join(format!("fraction_{f}"));
        let outcome = train(subset, &tcfg, &head, &dir)?;
        let (_, eer) = evaluate_run(&dir, &eval_manifest, &trials, None, &dir.join("eval"))?;
        w.write_record([f.to_string(), eer.to_string()])
            .map_err(csv_err)?;
        w.flush().map_err(|e| CliError::io(&path, e))?;
        println!(
            "fraction {f}: {} speakers, EER {}%",
            outcome.speakers.len(),
            pct(eer)
        );
        rows.push((*f, outcome.speakers.len(), eer));
    }
    Ok(rows)
}

fn base_resolved(cli: &Cli, command: &str) -> Resolved {
    let mut r = Resolved::default();
    r.put("command", command)
        .put("seed", cli.seed)
        .put("out", cli.out.display());
    if let Some(t) = cli.threads {
        r.put("threads", t);
    }
    r
}

const GLOBAL_KEYS: [&str; 4] = ["seed", "out", "threads", "verbose"];

const SUBCOMMANDS: [&str; 8] = [
    "gen-synth",
    "gen-trials",
    "zero-shot",
    "train",
    "eval",
    "grad-check",
    "tables",
    "data-efficiency",
];

/// Parses a flat `key=value` file. Blank lines and `#` comments are skipped.
pub fn parse_config_file(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::invalid(format!(
                "{}: line {}: expected key=value",
                path.display(),
                i + 1
            ))
        })?;
        out.insert(k.trim().replace('_', "-"), v.trim().to_string());
    }
    Ok(out)
}

/// Splices `--config` entries into the argument list. Global keys go right
/// after the program name, the rest right after the subcommand, so any flag
/// typed on the command line comes later and overrides the file.
fn expand_config(args: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let strs: Vec<String> = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let mut config = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            config = strs.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.to_string());
        }
    }
    let Some(config) = config else {
        return Ok(args);
    };
    let entries = parse_config_file(Path::new(&config))?;
    let sub_pos = strs.iter().position(|a| SUBCOMMANDS.contains(&a.as_str()));
    if let (Some(cmd), Some(pos)) = (entries.get("command"), sub_pos) {
        if cmd != &strs[pos] {
            return Err(CliError::invalid(format!(
                "{config}: written for `{cmd}`, not `{}`",
                strs[pos]
            )));
        }
    }
    let mut globals = Vec::new();
    let mut locals = Vec::new();
    for (k, v) in entries {
        if k == "command" || k == "config" {
            continue;
        }
        let flag = OsString::from(format!("--{k}={v}"));
        if GLOBAL_KEYS.contains(&k.as_str()) {
            globals.push(flag);
        } else {
            locals.push(flag);
        }
    }
    let mut out = args;
    if let Some(pos) = sub_pos {
        let tail = out.split_off(pos + 1);
        out.extend(locals);
        out.extend(tail);
    }
    let tail = out.split_off(1.min(out.len()));
    out.extend(globals);
    out.extend(tail);
    Ok(out)
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenSynth(a) => cmd_gen_synth(cli, a),
        Command::GenTrials(a) => cmd_gen_trials(cli, a),
        Command::ZeroShot(a) => cmd_zero_shot(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::GradCheck(a) => cmd_grad_check(cli, a),
        Command::Tables(a) => cmd_tables(cli, a).map(|_| ()),
        Command::DataEfficiency(a) => cmd_data_efficiency(cli, a).map(|_| ()),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr as one line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}", e.message);
            return e.code;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return EXIT_USAGE;
        }
        // A pool may already exist when `run` is called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
