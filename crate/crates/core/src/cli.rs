//! Command-line surface. Each subcommand wraps one pipeline stage, reads
//! and writes files only (inputs are never mutated), writes outputs
//! atomically, and prints a one-line summary on success.
//!
//! Exit codes: 0 success, 1 validation problem (bad flags, bad config,
//! malformed inputs), 2 runtime failure (I/O, corrupt binary files).
//!
//! An optional `--config FILE` names a key=value file whose entries are
//! treated as defaults for the invoked subcommand; explicit flags win.
//! Keys are long flag names without the leading dashes.

use std::path::{Path, PathBuf};

use clap::builder::ArgAction;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::archive::{load_cmvn, save_cmvn, EmbeddingTable, FeatureArchive};
use crate::audio::Waveform;
use crate::dsp::FeatureConfig;
use crate::error::{Error, Result};
use crate::eval::{report, sweep_fusion, sweep_lambda, token_pairs, SweepTable};
use crate::extractor::{Checkpoint, ExtractorConfig};
use crate::ioutil::write_atomic;
use crate::manifest::{load_manifest, save_manifest, SegmentKind};
use crate::pipeline::{embed_corpus, featurize_corpus, relation_of, train_from_archive};
use crate::scoring::{build_eval_pairs, Aggregation, PairSet, PairingParams};
use crate::synth::{synth_cv_corpus, SynthSpec};

#[derive(Parser)]
#[command(
    name = "segembed",
    about = "Consonant-error detection via speech segment embeddings",
    version,
    args_override_self = true
)]
struct Cli {
    /// Key=value file of defaults for the invoked subcommand.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for feature extraction and embedding. Results are
    /// identical for any value; 1 is the reproducible-by-construction
    /// default.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic consonant-vowel corpus (WAVs + manifest).
    Synth(SynthArgs),
    /// Extract log-mel features and fit normalization stats.
    Featurize(FeaturizeArgs),
    /// Train an embedding extractor for one segment kind.
    Train(TrainArgs),
    /// Embed every segment of a checkpoint's kind.
    Embed(EmbedArgs),
    /// Score test segments against reference sets.
    Score(ScoreArgs),
    /// Evaluate scored pairs: EER/AUC report with sweeps.
    Eval(EvalArgs),
    /// Sweep one blend weight over scored pairs.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindArg {
    #[value(name = "C")]
    C,
    #[value(name = "CV")]
    Cv,
}

impl From<KindArg> for SegmentKind {
    fn from(k: KindArg) -> SegmentKind {
        match k {
            KindArg::C => SegmentKind::C,
            KindArg::Cv => SegmentKind::Cv,
        }
    }
}

fn parse_list(text: &str, what: &str) -> Result<Vec<f64>> {
    if text.trim() == "none" || text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("{what}: `{t}` is not a number")))
        })
        .collect()
}

fn parse_labels(text: &str) -> Vec<String> {
    text.split(',')
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (audio/ subtree plus manifest.txt).
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Comma-separated consonant class labels.
    #[arg(long, default_value = "b,s,l,m")]
    consonants: String,
    /// Comma-separated vowel class labels.
    #[arg(long, default_value = "a,i,u")]
    vowels: String,
    /// Tokens per consonant-vowel combination.
    #[arg(long, default_value_t = 20)]
    tokens_per_class: usize,
    #[arg(long, default_value_t = 4)]
    train_speakers: usize,
    #[arg(long, default_value_t = 3)]
    test_speakers: usize,
    /// Fraction of test tokens given a substituted consonant.
    #[arg(long, default_value_t = 0.1)]
    atypical_fraction: f64,
    /// 0 = clean consonants, 1 = consonant spans replaced by noise.
    #[arg(long, default_value_t = 0.0)]
    consonant_noise: f64,
    /// Scale of random vowel formant deviation.
    #[arg(long, default_value_t = 0.0)]
    vowel_jitter: f64,
    #[arg(long, default_value_t = 16000)]
    sample_rate: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FeatureFlags {
    #[arg(long, default_value_t = 25.0)]
    frame_length_ms: f64,
    #[arg(long, default_value_t = 10.0)]
    frame_shift_ms: f64,
    /// Filterbank size (80 log-mel dimensions).
    #[arg(long, default_value_t = 80)]
    num_mels: usize,
    #[arg(long, default_value_t = 512)]
    fft_size: usize,
    #[arg(long, default_value_t = 0.97)]
    preemphasis: f64,
    #[arg(long, default_value_t = 20.0)]
    low_freq: f64,
    #[arg(long, default_value_t = 7600.0)]
    high_freq: f64,
    #[arg(long, default_value_t = 1e-10)]
    log_floor: f64,
}

impl FeatureFlags {
    fn to_config(&self) -> FeatureConfig {
        FeatureConfig {
            frame_length_ms: self.frame_length_ms,
            frame_shift_ms: self.frame_shift_ms,
            num_mels: self.num_mels,
            fft_size: self.fft_size,
            preemphasis: self.preemphasis,
            low_freq: self.low_freq,
            high_freq: self.high_freq,
            log_floor: self.log_floor,
        }
    }
}

#[derive(Args)]
struct FeaturizeArgs {
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Directory audio_ref paths are resolved against.
    #[arg(long, value_name = "DIR")]
    audio_root: PathBuf,
    #[arg(long, value_name = "FILE")]
    out_archive: PathBuf,
    #[arg(long, value_name = "FILE")]
    out_cmvn: PathBuf,
    /// Speed-perturbation factors applied to training records
    /// (90%/110% speaking rate); `none` disables.
    #[arg(long, default_value = "0.9,1.1")]
    speed_factors: String,
    #[command(flatten)]
    features: FeatureFlags,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest of the original corpus; training copies are re-derived
    /// from --speed-factors, which must match the featurize invocation.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    #[arg(long, value_name = "FILE")]
    archive: PathBuf,
    #[arg(long, value_name = "FILE")]
    cmvn: PathBuf,
    /// Segment kind to train on.
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long, value_name = "FILE")]
    out_checkpoint: PathBuf,
    #[arg(long, default_value = "0.9,1.1")]
    speed_factors: String,
    /// Stacked bidirectional recurrent layers.
    #[arg(long, default_value_t = 3)]
    num_layers: usize,
    /// Hidden units per direction.
    #[arg(long, default_value_t = 400)]
    hidden_units: usize,
    #[arg(long, default_value_t = 128)]
    embedding_dim: usize,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    #[arg(long, default_value_t = 0.001)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.0005)]
    weight_decay: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    /// Within-batch comparison partners per sample for the pair task.
    #[arg(long, default_value_t = 4)]
    pairs_per_sample: usize,
    /// Weight of the classification loss; 1−weight goes to the pair loss.
    #[arg(long, default_value_t = 0.5)]
    task_weight: f64,
    /// Mean-pool the recurrent outputs instead of taking the final states.
    #[arg(long, action = ArgAction::Set, default_value_t = false)]
    mean_pool: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    #[arg(long, value_name = "FILE")]
    archive: PathBuf,
    #[arg(long, value_name = "FILE")]
    out_table: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    #[arg(long, value_name = "FILE")]
    c_table: PathBuf,
    #[arg(long, value_name = "FILE")]
    cv_table: PathBuf,
    /// Checkpoint supplying the C relation head.
    #[arg(long, value_name = "FILE")]
    c_checkpoint: PathBuf,
    /// Checkpoint supplying the CV relation head.
    #[arg(long, value_name = "FILE")]
    cv_checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    out_pairs: PathBuf,
    /// Cosine weight in the C score blend.
    #[arg(long, default_value_t = 0.5)]
    lambda_c: f64,
    /// Cosine weight in the CV score blend.
    #[arg(long, default_value_t = 0.5)]
    lambda_cv: f64,
    /// C-score weight in the fused score.
    #[arg(long, default_value_t = 0.5)]
    fusion_weight: f64,
    /// Collapse each test token's references to one row pair
    /// (mean or max); omit to score every pair separately.
    #[arg(long, value_name = "MODE")]
    aggregate: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pairs: PathBuf,
    #[arg(long, value_name = "FILE")]
    out_report: PathBuf,
    /// Structured report; defaults to the report path with a .json
    /// extension.
    #[arg(long, value_name = "FILE")]
    out_json: Option<PathBuf>,
    /// Comma-separated sweep grid.
    #[arg(long, default_value = "0.0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    grid: String,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_name = "FILE")]
    pairs: PathBuf,
    /// Which blend weight to sweep.
    #[arg(long, default_value = "w", value_parser = ["w", "lambda_c", "lambda_cv"])]
    parameter: String,
    #[arg(long, default_value = "0.0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    grid: String,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

/// Entry point used by both the binary and the integration tests.
/// Prints errors to stderr and returns the process exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global();
    match dispatch(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Splices `--key=value` pairs from a `--config FILE` in front of the
/// user's own flags, so explicit flags override the file.
fn expand_config(argv: Vec<String>) -> Result<Vec<String>> {
    let mut config_path: Option<(usize, PathBuf)> = None;
    for (i, arg) in argv.iter().enumerate() {
        if arg == "--config" {
            let value = argv
                .get(i + 1)
                .ok_or_else(|| Error::InvalidArgument("--config needs a file".into()))?;
            config_path = Some((i, PathBuf::from(value)));
        } else if let Some(v) = arg.strip_prefix("--config=") {
            config_path = Some((i, PathBuf::from(v)));
        }
    }
    let Some((_, path)) = config_path else {
        return Ok(argv);
    };
    if argv.len() < 2 || argv[1].starts_with('-') {
        return Err(Error::InvalidArgument(
            "--config requires the subcommand to come first".into(),
        ));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut injected = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
            path: path.clone(),
            line: lineno + 1,
            message: format!("`{line}` is not key=value"),
        })?;
        let key = key.trim();
        if key.is_empty()
            || !key
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-' || c == '_')
        {
            return Err(Error::Config {
                path: path.clone(),
                line: lineno + 1,
                message: format!("bad key `{key}`"),
            });
        }
        injected.push(format!("--{}={}", key.replace('_', "-"), value.trim()));
    }
    let mut out = vec![argv[0].clone(), argv[1].clone()];
    out.extend(injected);
    out.extend(argv[2..].iter().cloned());
    Ok(out)
}

fn dispatch(command: Command) -> Result<String> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Featurize(a) => cmd_featurize(a),
        Command::Train(a) => cmd_train(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

/// WAV writes go through a temp file in the target directory so a crash
/// never leaves a half-written file behind.
fn write_wav_atomic(path: &Path, wave: &Waveform) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let tmp = tempfile::Builder::new()
        .suffix(".wav")
        .tempfile_in(dir)
        .map_err(|e| Error::io(path, e))?;
    crate::audio::write_wav(tmp.path(), wave)?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<String> {
    let spec = SynthSpec {
        consonants: parse_labels(&a.consonants),
        vowels: parse_labels(&a.vowels),
        tokens_per_class: a.tokens_per_class,
        sample_rate: a.sample_rate,
        train_speakers: a.train_speakers,
        test_speakers: a.test_speakers,
        atypical_fraction: a.atypical_fraction,
        consonant_noise: a.consonant_noise,
        vowel_jitter: a.vowel_jitter,
    };
    let out = synth_cv_corpus(&spec, a.seed)?;
    std::fs::create_dir_all(a.out_dir.join("audio")).map_err(|e| Error::io(&a.out_dir, e))?;
    for (audio_ref, wave) in &out.waveforms {
        write_wav_atomic(&a.out_dir.join(audio_ref), wave)?;
    }
    let manifest_path = a.out_dir.join("manifest.txt");
    save_manifest(&out.manifest, &manifest_path)?;
    Ok(format!(
        "synth: {} tokens, {} records ({} consonants x {} vowels) -> {}",
        out.waveforms.len(),
        out.manifest.records.len(),
        spec.consonants.len(),
        spec.vowels.len(),
        manifest_path.display()
    ))
}

fn cmd_featurize(a: FeaturizeArgs) -> Result<String> {
    let manifest = load_manifest(&a.manifest)?;
    let factors = parse_list(&a.speed_factors, "--speed-factors")?;
    let config = a.features.to_config();
    let out = featurize_corpus(&manifest, &a.audio_root, &config, &factors)?;
    out.archive.save(&a.out_archive)?;
    save_cmvn(&out.stats, &a.out_cmvn)?;
    Ok(format!(
        "featurize: {} records ({}-dim log-mel), stats over {} training frames -> {}",
        out.archive.len(),
        config.num_mels,
        out.stats.frame_count,
        a.out_archive.display()
    ))
}

fn cmd_train(a: TrainArgs) -> Result<String> {
    let manifest = load_manifest(&a.manifest)?;
    let factors = parse_list(&a.speed_factors, "--speed-factors")?;
    let augmented = crate::manifest::augment_training_set(&manifest, &factors)?;
    let archive = FeatureArchive::load(&a.archive)?;
    let stats = load_cmvn(&a.cmvn)?;
    let kind: SegmentKind = a.kind.into();
    let inventory_len = match kind {
        SegmentKind::C => manifest.consonant_inventory.len(),
        SegmentKind::Cv => manifest.cv_inventory.len(),
    };
    let cfg = ExtractorConfig {
        num_layers: a.num_layers,
        hidden_units: a.hidden_units,
        embedding_dim: a.embedding_dim,
        num_classes: inventory_len,
        dropout: a.dropout,
        learning_rate: a.learning_rate,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        epochs: a.epochs,
        pairs_per_sample: a.pairs_per_sample,
        task_weight: a.task_weight,
        mean_pool: a.mean_pool,
        seed: a.seed,
    };
    let mut ckpt = train_from_archive(&augmented, &archive, &stats, kind, &cfg)?;
    ckpt.save(&a.out_checkpoint)?;
    let last = ckpt.log.epochs.last();
    Ok(format!(
        "train: kind {kind}, {} classes, {} epochs, final loss {:.4}, train accuracy {:.4} -> {}",
        inventory_len,
        ckpt.log.epochs.len(),
        last.map(|e| e.mean_loss).unwrap_or(f64::NAN),
        ckpt.log.final_train_accuracy,
        a.out_checkpoint.display()
    ))
}

fn cmd_embed(a: EmbedArgs) -> Result<String> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    let archive = FeatureArchive::load(&a.archive)?;
    let table = embed_corpus(&ckpt, &manifest, &archive)?;
    table.save(&a.out_table)?;
    Ok(format!(
        "embed: {} {} embeddings (dim {}) -> {}",
        table.len(),
        ckpt.kind,
        table.dim(),
        a.out_table.display()
    ))
}

fn cmd_score(a: ScoreArgs) -> Result<String> {
    let manifest = load_manifest(&a.manifest)?;
    let c_table = EmbeddingTable::load(&a.c_table)?;
    let cv_table = EmbeddingTable::load(&a.cv_table)?;
    let c_ckpt = Checkpoint::load(&a.c_checkpoint)?;
    let cv_ckpt = Checkpoint::load(&a.cv_checkpoint)?;
    if c_ckpt.kind != SegmentKind::C || cv_ckpt.kind != SegmentKind::Cv {
        return Err(Error::InvalidArgument(
            "checkpoints passed for the wrong kinds".into(),
        ));
    }
    let aggregation = match a.aggregate.as_deref() {
        None => None,
        Some(mode) => Some(
            mode.parse::<Aggregation>()
                .map_err(Error::InvalidArgument)?,
        ),
    };
    let params = PairingParams {
        lambda_c: a.lambda_c,
        lambda_cv: a.lambda_cv,
        fusion_weight: a.fusion_weight,
        aggregation,
    };
    let (rows, stats) = build_eval_pairs(
        &manifest,
        &c_table,
        &cv_table,
        &relation_of(&c_ckpt),
        &relation_of(&cv_ckpt),
        &params,
    )?;
    let set = PairSet {
        params,
        rows,
    };
    set.save(&a.out_pairs)?;
    let mut warning = String::new();
    if stats.tests_skipped > 0 {
        warning = format!(", skipped {} without references", stats.tests_skipped);
    }
    if stats.incomplete_tokens > 0 {
        warning.push_str(&format!(
            ", {} incomplete (missing a C or CV record)",
            stats.incomplete_tokens
        ));
    }
    Ok(format!(
        "score: {} test tokens, {} rows{warning} -> {}",
        stats.tests_scored,
        set.rows.len(),
        a.out_pairs.display()
    ))
}

fn cmd_eval(a: EvalArgs) -> Result<String> {
    let set = PairSet::load(&a.pairs)?;
    let grid = parse_list(&a.grid, "--grid")?;
    let rep = report(&set.rows, &grid)?;
    write_atomic(&a.out_report, rep.text_table().as_bytes())?;
    let json_path = a
        .out_json
        .unwrap_or_else(|| a.out_report.with_extension("json"));
    write_atomic(&json_path, rep.to_json().as_bytes())?;
    Ok(format!(
        "eval: EER C {:.4} / CV {:.4} / fused {:.4}, AUC fused {:.4} -> {} {}",
        rep.overall.c.eer,
        rep.overall.cv.eer,
        rep.overall.fused.eer,
        rep.overall.fused.auc,
        a.out_report.display(),
        json_path.display()
    ))
}

fn sweep_text(table: &SweepTable) -> String {
    let mut out = format!("# sweep over {}\n# {} EER AUC\n", table.parameter, table.parameter);
    for (i, row) in table.rows.iter().enumerate() {
        let flag = if i == table.best { " *" } else { "" };
        out.push_str(&format!("{} {} {}{flag}\n", row.weight, row.eer, row.auc));
    }
    out
}

fn cmd_sweep(a: SweepArgs) -> Result<String> {
    let set = PairSet::load(&a.pairs)?;
    let grid = parse_list(&a.grid, "--grid")?;
    let pairs = token_pairs(&set.rows)?;
    let table = match a.parameter.as_str() {
        "w" => sweep_fusion(&pairs, &grid)?,
        "lambda_c" => sweep_lambda(&pairs, SegmentKind::C, &grid)?,
        _ => sweep_lambda(&pairs, SegmentKind::Cv, &grid)?,
    };
    write_atomic(&a.out, sweep_text(&table).as_bytes())?;
    let best = &table.rows[table.best];
    Ok(format!(
        "sweep {}: best {} (EER {:.4}, AUC {:.4}) -> {}",
        table.parameter,
        best.weight,
        best.eer,
        best.auc,
        a.out.display()
    ))
}
