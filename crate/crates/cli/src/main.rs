use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use depfusion_core::config::Config;
use depfusion_core::corpus::{self, Manifest, SynthConfig};
use depfusion_core::fusion::FusionMethod;
use depfusion_core::io::Checkpoint;
use depfusion_core::model::{self, Modality, Model};
use depfusion_core::report::{self, ClipPredictionRow};
use depfusion_core::train::{self, EPOCH_LOG_HEADER};
use depfusion_core::{Error, Result};

/// Multi-modal depression estimation from interview audio, facial keypoints
/// and sentence embeddings.
#[derive(Parser)]
#[command(name = "depfusion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus and its manifest.
    SynthData(SynthArgs),
    /// Cut manifest sessions into clip bundles.
    Preprocess(PreprocessArgs),
    /// Train a model on a clip directory.
    Train(TrainArgs),
    /// Predict every clip of a directory with a checkpoint.
    Eval(EvalArgs),
    /// Recombine clip predictions into participant verdicts.
    Aggregate(AggregateArgs),
    /// Print checkpoint metadata and tensor shapes.
    InspectCheckpoint(InspectArgs),
    /// Train one model per fusion method and modality set and tabulate results.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Compact,
}

#[derive(Args)]
struct ConfigArgs {
    /// Key = value file overlaid on the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    modality: Option<Modality>,
    #[arg(long)]
    fusion: Option<FusionMethod>,
    #[arg(long)]
    sam_rho: Option<f64>,
    /// Disable gender balancing in the sampler.
    #[arg(long)]
    no_gb: bool,
    #[arg(long)]
    epochs: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self, base: Option<Config>) -> Result<Config> {
        let mut cfg = match (base, self.preset) {
            (_, Some(Preset::Compact)) => Config::compact(),
            (_, Some(Preset::Default)) => Config::default(),
            (Some(b), None) => b,
            (None, None) => Config::default(),
        };
        if let Some(p) = &self.config {
            cfg.apply_file(p)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(m) = self.modality {
            cfg.model.modality = m;
        }
        if let Some(f) = self.fusion {
            cfg.model.fusion = f;
        }
        if let Some(r) = self.sam_rho {
            cfg.train.sam_rho = r;
        }
        if self.no_gb {
            cfg.train.gender_balance = false;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    participants: usize,
    #[arg(long, default_value_t = 160.0)]
    min_duration: f64,
    #[arg(long, default_value_t = 200.0)]
    max_duration: f64,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `preprocess`.
    #[arg(long)]
    clips: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Resume from this checkpoint; its config hash must match.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Copy the branch weights of a single-modality checkpoint.
    #[arg(long)]
    init_branch: Vec<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    clips: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Without `--config` or `--preset` the checkpoint's own config is used.
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct AggregateArgs {
    /// `clip_predictions.csv` from `eval`.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    clips: PathBuf,
    /// Held-out clips; defaults to the training clips.
    #[arg(long)]
    eval_clips: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "av,avt")]
    modalities: Vec<Modality>,
    #[arg(long, value_delimiter = ',', default_value = "mult,concat,median,max,sum,mean,atten,subatten")]
    methods: Vec<FusionMethod>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        n_participants: a.participants,
        min_duration_s: a.min_duration,
        max_duration_s: a.max_duration,
        ..SynthConfig::default()
    };
    let m = corpus::generate_synthetic_corpus(&a.out_dir, &cfg)?;
    println!("wrote {} participants to {}", m.entries.len(), a.out_dir.display());
    Ok(())
}

fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let cfg = a.cfg.resolve(None)?;
    let manifest = Manifest::load(&a.manifest)?;
    let rows = corpus::preprocess(&manifest, &cfg.prep, &a.out_dir)?;
    write(&a.out_dir.join("config.conf"), &cfg.to_text())?;
    println!("wrote {} clips to {}", rows.len(), a.out_dir.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve(None)?;
    let model = Model::new(cfg.model.clone())?;
    let set = corpus::load_clips(&a.clips)?;
    let hash = cfg.hash();
    let text = cfg.to_text();
    let (mut init, start_epoch) = match &a.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config_hash != hash {
                return Err(Error::Mismatch(format!(
                    "{} was trained with config hash {:016x}, current config hashes to {hash:016x}",
                    p.display(),
                    ck.config_hash
                )));
            }
            (Some(ck.store), ck.epoch)
        }
        None => (None, 0),
    };
    for p in &a.init_branch {
        let src = Checkpoint::load(p)?;
        let store = init.get_or_insert_with(|| model.init(cfg.train.seed));
        let mut copied = 0;
        for b in cfg.model.modality.branches() {
            copied += store.copy_prefix_from(&src.store, &b.prefix())?;
        }
        if copied == 0 {
            return Err(Error::Mismatch(format!("{} holds no branch shared with this model", p.display())));
        }
        println!("copied {copied} tensors from {}", p.display());
    }
    fs::create_dir_all(&a.out_dir)?;
    write(&a.out_dir.join("config.conf"), &text)?;
    let log_path = a.out_dir.join("epoch_log.csv");
    let ck_path = a.out_dir.join("checkpoint.mfck");
    let mut log = format!("{EPOCH_LOG_HEADER}\n");
    println!("{EPOCH_LOG_HEADER}");
    let out = train::run_training(&model, &set.clips, &cfg.train, init, |rec, store| {
        println!("{}", rec.log_line());
        log.push_str(&rec.log_line());
        log.push('\n');
        write(&log_path, &log)?;
        Checkpoint {
            epoch: start_epoch + rec.epoch as u32,
            config_hash: hash,
            config_text: text.clone(),
            store: store.clone(),
        }
        .save(&ck_path)
    })?;
    if let Some(t) = cfg.train.target_accuracy {
        let verdict = if out.reached_target { "reached" } else { "did not reach" };
        println!("{verdict} target accuracy {t} after {} epochs", out.log.len());
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let base = Config::parse_text(&ck.config_text)?;
    let cfg = a.cfg.resolve(Some(base))?;
    if cfg.hash() != ck.config_hash {
        return Err(Error::Mismatch(format!(
            "config hash {:016x} does not match checkpoint {} ({:016x}); refusing to evaluate",
            cfg.hash(),
            a.checkpoint.display(),
            ck.config_hash
        )));
    }
    let model = Model::new(cfg.model.clone())?;
    let set = corpus::load_clips(&a.clips)?;
    let preds = model::predict_clips(&model, &ck.store, &set.clips, cfg.train.batch_size)?;
    let rows: Vec<ClipPredictionRow> = set.rows.iter().zip(&preds).map(|(r, p)| ClipPredictionRow::new(r, p)).collect();
    fs::create_dir_all(&a.out_dir)?;
    report::write_predictions(&a.out_dir.join("clip_predictions.csv"), &rows)?;
    let split = depfusion_core::phq::gender_split_report(&report::clip_entries(&rows)?)?;
    write(&a.out_dir.join("clip_metrics.json"), &to_json(&split)?)?;
    print!("{}", split.render());
    Ok(())
}

fn aggregate_cmd(a: &AggregateArgs) -> Result<()> {
    let rows = report::read_predictions(&a.predictions)?;
    let summaries = report::aggregate_predictions(&rows)?;
    let split = report::participant_report(&summaries)?;
    fs::create_dir_all(&a.out_dir)?;
    write(&a.out_dir.join("participants.csv"), &report::render_participants(&summaries))?;
    write(&a.out_dir.join("gender_report.tsv"), &split.render())?;
    write(&a.out_dir.join("participant_report.json"), &to_json(&split)?)?;
    print!("{}", split.render());
    Ok(())
}

fn inspect(a: &InspectArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    println!("epoch\t{}", ck.epoch);
    println!("config_hash\t{:016x}", ck.config_hash);
    println!("parameters\t{}", ck.store.num_params());
    for (kind, map) in [("param", ck.store.params()), ("buffer", ck.store.buffers())] {
        for (name, t) in map {
            println!("{kind}\t{name}\t{:?}", t.shape());
        }
    }
    Ok(())
}

fn compare(a: &CompareArgs) -> Result<()> {
    let cfg = a.cfg.resolve(None)?;
    let train_set = corpus::load_clips(&a.clips)?;
    let eval_set = match &a.eval_clips {
        Some(p) => corpus::load_clips(p)?,
        None => train_set.clone(),
    };
    let rows = train::compare_fusions(
        &cfg.model,
        &cfg.train,
        &a.modalities,
        &a.methods,
        &train_set.clips,
        &eval_set.clips,
    )?;
    let table = train::render_comparison(&rows);
    fs::create_dir_all(&a.out_dir)?;
    write(&a.out_dir.join("comparison.tsv"), &table)?;
    write(&a.out_dir.join("comparison.json"), &to_json(&rows)?)?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Aggregate(a) => aggregate_cmd(a),
        Command::InspectCheckpoint(a) => inspect(a),
        Command::Compare(a) => compare(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
