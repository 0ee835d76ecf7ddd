//! `lrx`: corpus generation, training, distillation, factorization,
//! evaluation and reporting for x-vector and low-rank lrx-vector models.

mod config;
mod data;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use lrx::eval::{evaluate_model, roc_points, write_roc_csv, DcfParams, EvalResult, TrialList};
use lrx::factorize::{factorize_model, parse_ranks, resolve_ranks, singular_spectrum, svd_finetune, write_spectrum_csv};
use lrx::model::{self, count_params, ModelConfig, WeightSet};
use lrx::rng::substream;
use lrx::synthdata::{expand_4x, gen_corpus, make_trials, write_corpus};
use lrx::trainer::{train, write_loss_csv, KdKind, KdTarget, Teacher, TrainConfig, TrainMode, TrainReport};
use lrx::{Error, Result};

use config::{load_run_file, parse_decay, TrainKeys};
use data::Dataset;

#[derive(Parser)]
#[command(name = "lrx", version, about = "Low-rank x-vector speaker embedding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-speaker corpus (WAVs + manifest).
    GenData(GenDataArgs),
    /// Train a model with the AM-softmax objective.
    Train(TrainArgs),
    /// Train a student against a frozen teacher.
    Distill(DistillArgs),
    /// Replace TDNN layers 2-5 by truncated-SVD factor pairs.
    Factorize(FactorizeArgs),
    /// Score a trial list and compute EER / minDCF.
    Evaluate(EvaluateArgs),
    /// Evaluate several models and write a size/accuracy frontier.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    speakers: u64,
    #[arg(long)]
    utts: usize,
    /// Seconds per utterance.
    #[arg(long, default_value_t = 3.0)]
    duration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Add three augmented copies of every utterance.
    #[arg(long)]
    augment4x: bool,
    /// Also write `trials.txt` with this many target and nontarget trials.
    #[arg(long, default_value_t = 0)]
    trials: usize,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_initial: Option<f64>,
    #[arg(long)]
    lr_final: Option<f64>,
    /// exponential or linear
    #[arg(long)]
    decay: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    chunk_frames: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    ams_scale: Option<f64>,
    #[arg(long)]
    ams_margin: Option<f64>,
    #[arg(long)]
    no_early_stop: bool,
    /// Loss curve CSV (default: next to the output model).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

impl TrainFlags {
    fn build(&self, mode: TrainMode, file: &TrainKeys) -> Result<TrainConfig> {
        let mut tc = TrainConfig::new(mode);
        file.apply(&mut tc)?;
        tc.seed = self.seed;
        if let Some(v) = self.epochs {
            tc.epochs = v;
        }
        if let Some(v) = self.lr_initial {
            tc.lr_initial = v;
        }
        if let Some(v) = self.lr_final {
            tc.lr_final = v;
        }
        if let Some(v) = &self.decay {
            tc.decay = parse_decay(v)?;
        }
        if let Some(v) = self.batch_size {
            tc.batch_size = v;
        }
        if let Some(v) = self.chunk_frames {
            tc.chunk_frames = v;
        }
        if let Some(v) = self.weight_decay {
            tc.weight_decay = v;
        }
        if let Some(v) = self.ams_scale {
            tc.ams.scale = v;
        }
        if let Some(v) = self.ams_margin {
            tc.ams.margin = v;
        }
        if self.no_early_stop {
            tc.early_stop = false;
        }
        tc.validate()?;
        Ok(tc)
    }

    fn loss_path(&self, out: &Path) -> PathBuf {
        self.loss_csv.clone().unwrap_or_else(|| out.with_extension("loss.csv"))
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Run file with model (and optional training) keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// baseline-ams or finetune
    #[arg(long, default_value = "baseline-ams")]
    mode: String,
    /// Start from an existing model instead of a seeded random init.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("student").required(true).args(["student_config", "student_init"]))]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    /// Run file for a randomly initialized student.
    #[arg(long)]
    student_config: Option<PathBuf>,
    /// Existing model to start the student from.
    #[arg(long)]
    student_init: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// kld, mse or cos
    #[arg(long, default_value = "mse")]
    kd: String,
    /// Gate the distillation gradient by its cosine with the task gradient.
    #[arg(long)]
    gcs: bool,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// logits or embeddings (default depends on --kd)
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct FactorizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "l2=0.5,l3=0.5,l4=0.75,l5=0.75")]
    ranks: String,
    /// Singular value spectrum CSV of the input model.
    #[arg(long)]
    spectrum: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Fine-tune the factorized model on --data afterwards.
    #[arg(long, requires = "data")]
    finetune: bool,
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Clone)]
struct DcfFlags {
    #[arg(long, default_value_t = 0.01)]
    p_target: f64,
    #[arg(long, default_value_t = 1.0)]
    c_miss: f64,
    #[arg(long, default_value_t = 1.0)]
    c_fa: f64,
}

impl DcfFlags {
    fn params(&self) -> Result<DcfParams> {
        let p = DcfParams { p_target: self.p_target, c_miss: self.c_miss, c_fa: self.c_fa };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Trial list (default: `trials.txt` in the data directory).
    #[arg(long)]
    trials: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
    /// ROC CSV (threshold,p_miss,p_fa).
    #[arg(long)]
    roc: Option<PathBuf>,
    #[command(flatten)]
    dcf: DcfFlags,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    trials: Option<PathBuf>,
    /// Columns: model,num_params,eer,min_dcf; rows ascending by num_params.
    #[arg(long)]
    csv: PathBuf,
    #[command(flatten)]
    dcf: DcfFlags,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let msg = text.trim().strip_prefix("error: ").unwrap_or(text.trim());
            eprintln!("error[usage]: {msg}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Distill(a) => distill(a),
        Command::Factorize(a) => factorize(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

fn config_digest(cfg: &ModelConfig) -> String {
    hex_digest(cfg.to_kv().as_bytes())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut corpus = gen_corpus(a.speakers as usize, a.utts, a.duration, a.seed)?;
    if a.augment4x {
        corpus = expand_4x(&corpus, a.seed)?;
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Config(format!("cannot create {}: {e}", a.out.display())))?;
    let entries = write_corpus(&a.out, &corpus)?;
    if a.trials > 0 {
        let pairs: Vec<(String, String)> = entries.iter().map(|e| (e.utt_id.clone(), e.speaker_id.clone())).collect();
        let trials = make_trials(&pairs, a.trials, a.trials, a.seed)?;
        std::fs::write(a.out.join("trials.txt"), trials.to_text())?;
    }
    let manifest = std::fs::read(a.out.join(lrx::synthdata::MANIFEST_NAME))?;
    println!("wrote {} utterances from {} speakers to {}", entries.len(), a.speakers, a.out.display());
    println!("manifest sha256 {}", hex_digest(&manifest));
    Ok(())
}

fn print_curve(report: &TrainReport) {
    for s in &report.curve {
        let gcs = s.gcs_open_fraction.map(|f| format!(" gcs_open {f:.3}")).unwrap_or_default();
        println!("epoch {:>3} loss {:.5} acc {:.3} lr {:.3e}{gcs}", s.epoch, s.mean_loss, s.accuracy, s.lr);
    }
    if report.stopped_early {
        println!("stopped early after {} epochs", report.curve.len());
    }
}

fn finish_training(cfg: &ModelConfig, report: &TrainReport, out: &Path, flags: &TrainFlags) -> Result<()> {
    print_curve(report);
    model::save(out, cfg, &report.weights)?;
    write_loss_csv(flags.loss_path(out), &report.curve)?;
    println!("saved {} ({} parameters)", out.display(), count_params(cfg).total);
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mode: TrainMode = a.mode.parse()?;
    if mode.kd_kind().is_some() {
        return Err(Error::Config(format!("mode {mode} needs a teacher; use `lrx distill`")));
    }
    let ds = Dataset::open(&a.data)?;
    let (cfg, keys, init) = match (&a.config, &a.init) {
        (_, Some(path)) => {
            let (cfg, w) = model::load(path)?;
            let keys = match &a.config {
                Some(c) => load_run_file(c, Some(cfg.num_speakers))?.1,
                None => TrainKeys::default(),
            };
            (cfg, keys, w)
        }
        (Some(c), None) => {
            let (cfg, keys) = load_run_file(c, Some(ds.speakers.len()))?;
            let w = WeightSet::init_random(&cfg, &mut substream(a.flags.seed, "init", &[]));
            (cfg, keys, w)
        }
        (None, None) => {
            let cfg = ModelConfig::xvector(ds.speakers.len());
            let w = WeightSet::init_random(&cfg, &mut substream(a.flags.seed, "init", &[]));
            (cfg, TrainKeys::default(), w)
        }
    };
    let tc = a.flags.build(mode, &keys)?;
    let corpus = ds.examples()?;
    let report = if mode == TrainMode::Finetune {
        svd_finetune(&cfg, init, &corpus, &tc)?
    } else {
        train(&cfg, init, &corpus, &tc, None)?
    };
    finish_training(&cfg, &report, &a.out, &a.flags)
}

fn distill(a: DistillArgs) -> Result<()> {
    let (tcfg, tw) = model::load(&a.teacher)?;
    let kind: KdKind = a.kd.parse()?;
    let mode = if a.gcs { TrainMode::Gcs(kind) } else { TrainMode::Kd(kind) };
    let ds = Dataset::open(&a.data)?;
    let (cfg, keys, init) = match (&a.student_config, &a.student_init) {
        (Some(c), None) => {
            let (cfg, keys) = load_run_file(c, Some(tcfg.num_speakers))?;
            let w = WeightSet::init_random(&cfg, &mut substream(a.flags.seed, "init", &[]));
            (cfg, keys, w)
        }
        (None, Some(p)) => {
            let (cfg, w) = model::load(p)?;
            (cfg, TrainKeys::default(), w)
        }
        _ => return Err(Error::Config("give exactly one of --student-config and --student-init".into())),
    };
    if cfg.input_dim != tcfg.input_dim {
        return Err(Error::Config(format!(
            "teacher expects {}-dim features but the student expects {}",
            tcfg.input_dim, cfg.input_dim
        )));
    }
    let mut tc = a.flags.build(mode, &keys)?;
    if let Some(v) = a.alpha {
        tc.alpha = v;
    }
    if let Some(v) = a.temperature {
        tc.temperature = v;
    }
    if let Some(t) = &a.target {
        tc.kd_target = Some(t.parse::<KdTarget>()?);
    }
    tc.validate()?;
    let target = match tc.kd_target().expect("distillation mode") {
        KdTarget::Logits => "logits",
        KdTarget::Embeddings => "embeddings",
    };
    println!("mode {mode} target {target} alpha {} temperature {}", tc.alpha, tc.temperature);
    let corpus = ds.examples()?;
    let report = train(&cfg, init, &corpus, &tc, Some(Teacher { config: &tcfg, weights: &tw }))?;
    finish_training(&cfg, &report, &a.out, &a.flags)
}

fn factorize(a: FactorizeArgs) -> Result<()> {
    let (cfg, w) = model::load(&a.model)?;
    if let Some(path) = &a.spectrum {
        write_spectrum_csv(path, &singular_spectrum(&cfg, &w)?)?;
    }
    let ranks = resolve_ranks(&cfg, &parse_ranks(&a.ranks)?)?;
    let (lcfg, lw) = factorize_model(&cfg, &w, &ranks)?;
    let (before, after) = (count_params(&cfg), count_params(&lcfg));
    println!("{:<8} {:>12} {:>12}", "layer", "before", "after");
    for ((name, b), (_, f)) in before.layers.iter().zip(&after.layers) {
        println!("{name:<8} {b:>12} {f:>12}");
    }
    println!("{:<8} {:>12} {:>12}", "total", before.total, after.total);
    println!("reduction {:.2}%", 100.0 * (1.0 - after.total as f64 / before.total as f64));
    if a.finetune {
        let ds = Dataset::open(a.data.as_deref().expect("clap requires --data"))?;
        let tc = a.flags.build(TrainMode::Finetune, &TrainKeys::default())?;
        let report = svd_finetune(&lcfg, lw, &ds.examples()?, &tc)?;
        finish_training(&lcfg, &report, &a.out, &a.flags)
    } else {
        model::save(&a.out, &lcfg, &lw)?;
        println!("saved {}", a.out.display());
        Ok(())
    }
}

fn load_trials(data: &Path, trials: Option<&Path>) -> Result<TrialList> {
    let path = trials.map(Path::to_path_buf).unwrap_or_else(|| data.join("trials.txt"));
    if !path.exists() {
        return Err(Error::Ingest(format!("trial list {} not found", path.display())));
    }
    let list = TrialList::load(&path)?;
    if list.is_empty() {
        return Err(Error::Ingest(format!("trial list {} is empty", path.display())));
    }
    Ok(list)
}

fn run_eval(path: &Path, ds: &Dataset, trials: &TrialList, dcf: DcfParams) -> Result<(ModelConfig, EvalResult, String)> {
    let bytes = std::fs::read(path)?;
    let (cfg, w) = model::from_bytes(&bytes)?;
    let feats = ds.features(&trials.utterance_ids())?;
    let r = evaluate_model(&cfg, &w, &feats, trials, dcf)?;
    Ok((cfg, r, hex_digest(&bytes)))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let trials = load_trials(&a.data, a.trials.as_deref())?;
    let dcf = a.dcf.params()?;
    let (cfg, r, model_digest) = run_eval(&a.model, &ds, &trials, dcf)?;
    println!("eer {:.6} min_dcf {:.6} trials {} params {}", r.eer, r.min_dcf, r.num_trials, r.num_params);
    if let Some(path) = &a.json {
        let doc = serde_json::json!({
            "eer": r.eer,
            "min_dcf": r.min_dcf,
            "num_params": r.num_params,
            "num_trials": r.num_trials,
            "p_target": dcf.p_target,
            "c_miss": dcf.c_miss,
            "c_fa": dcf.c_fa,
            "config_digest": config_digest(&cfg),
            "model_digest": model_digest,
        });
        let mut text = serde_json::to_string_pretty(&doc).expect("plain JSON values");
        text.push('\n');
        std::fs::write(path, text)?;
    }
    if let Some(path) = &a.roc {
        write_roc_csv(path, &roc_points(&r.scores)?)?;
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let trials = load_trials(&a.data, a.trials.as_deref())?;
    let dcf = a.dcf.params()?;
    let mut rows = Vec::new();
    for path in &a.models {
        let (_, r, _) = run_eval(path, &ds, &trials, dcf)?;
        rows.push((path.display().to_string(), r));
    }
    rows.sort_by_key(|(_, r)| r.num_params);
    let mut csv = String::from("model,num_params,eer,min_dcf\n");
    for (name, r) in &rows {
        writeln!(csv, "{name},{},{},{}", r.num_params, r.eer, r.min_dcf).unwrap();
        println!("{:>10} eer {:.4} min_dcf {:.4}  {name}", r.num_params, r.eer, r.min_dcf);
    }
    std::fs::write(&a.csv, csv)?;
    Ok(())
}
