//! `tpcap`: synthetic data, backbone pretraining, captioner training,
//! captioning, evaluation, ablations and parameter accounting.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use tpcap_core::config::ProjectorPair;
use tpcap_core::data::{load_karpathy, read_ppm, SyntheticConfig};
use tpcap_core::eval::{ablation_grid, ablation_markdown, run_ablation, AblationRow};
use tpcap_core::pipeline::prompt_words;
use tpcap_core::tokenizer::build_tokenizer_with;
use tpcap_core::training::{gradcheck_variant, train};
use tpcap_core::{
    count_trainable_params, evaluate_encoded, pretrain_backbone, Backbone, ModelConfig, ProjectorConfig,
    Purification, RunConfig, Split, TpCap, VariantConfig,
};

#[derive(Parser)]
#[command(name = "tpcap", version, about = "Trigger-projector zero-shot captioning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shapes corpus with Karpathy-style annotations.
    GenData(GenDataArgs),
    /// Pretrain the language model backbone on the training captions.
    Pretrain(PretrainArgs),
    /// Train the captioner on top of a pretrained backbone.
    Train(TrainArgs),
    /// Caption one PPM image.
    Caption(CaptionArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Train and score the ablation grid.
    Ablate(AblateArgs),
    /// Trainable-parameter counts per projector variant.
    Params(ParamsArgs),
    /// Finite-difference gradient check at tiny dimensions.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    val: usize,
    #[arg(long, default_value_t = 200)]
    test: usize,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self, fallback: Option<&RunConfig>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, fallback) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(cfg)) => cfg.clone(),
            (None, None) => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Where to write the `{step, loss, lr}` stream (default: `losses.jsonl` in `--out`).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Print `{image_id, entity_info_text, caption}` instead of the bare caption.
    #[arg(long)]
    dump_entity_info: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Metric report path (default: stdout).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Print one `{image_id, entity_info_text, caption}` line per image.
    #[arg(long)]
    dump_entity_info: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Purification variants for the full-model rows.
    #[arg(long, value_delimiter = ',', default_value = "mp", value_parser = parse_purification)]
    purification: Vec<Purification>,
    /// Projector pairs; each gets the whole grid.
    #[arg(long, value_delimiter = ',', default_value = "ours", value_parser = parse_pair)]
    projector: Vec<ProjectorPair>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long, value_enum, default_value_t = Dims::Paper)]
    dims: Dims,
    /// One projector pair; all six when omitted.
    #[arg(long, value_parser = parse_pair)]
    variant: Option<ProjectorPair>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
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
enum Dims {
    Paper,
    Toy,
}

fn parse_pair(s: &str) -> Result<ProjectorPair, String> {
    s.parse().map_err(|e: tpcap_core::Error| e.to_string())
}

fn parse_purification(s: &str) -> Result<Purification, String> {
    s.parse().map_err(|e: tpcap_core::Error| e.to_string())
}

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout().lock(), $($arg)*)?
    };
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        // A reader such as `head` closing the pipe early is not a failure.
        Err(e) if e.downcast_ref::<std::io::Error>().map(|e| e.kind()) == Some(std::io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train_cmd(a),
        Command::Caption(a) => caption(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Params(a) => params(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        train: a.train,
        val: a.val,
        test: a.test,
        ..SyntheticConfig::default()
    };
    let path = tpcap_core::data::generate_synthetic_dataset(&cfg, a.seed, &a.out)?;
    out!("{}", path.display());
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = a.cfg.load(None)?;
    let train = load_karpathy(&a.data, Split::Train)?;
    let heldout = load_karpathy(&a.data, Split::Val)?;
    let tokenizer = build_tokenizer_with(&train, &prompt_words())?;
    let mut backbone = Backbone::init(&cfg, tokenizer)?;
    let train = backbone.encode_corpus(&train)?;
    let heldout = backbone.encode_corpus(&heldout)?;
    let report = pretrain_backbone(&mut backbone, &train, &heldout, &cfg.pretrain, cfg.seed)?;
    backbone.save(&a.out, report.metrics())?;
    out!(
        "{}",
        json!({"heldout_loss": report.heldout_loss, "steps": report.steps, "config_hash": cfg.hash()})
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let backbone = Backbone::load(&a.backbone)?;
    let default = RunConfig {
        variant: VariantConfig::default(),
        ..backbone.config.clone()
    };
    let cfg = a.cfg.load(Some(&default))?;
    let corpus = load_karpathy(&a.data, Split::Train)?;
    let mut model = TpCap::from_backbone(backbone, &cfg)?;
    let samples = model.encode_corpus(&corpus)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let loss_path = a.report.unwrap_or_else(|| a.out.join("losses.jsonl"));
    let mut losses = fs::File::create(&loss_path).with_context(|| format!("creating {}", loss_path.display()))?;
    let mut io_err = None;
    let report = train(&mut model, &samples, |r| {
        if let Err(e) = writeln!(losses, "{}", r.to_json_line()) {
            io_err.get_or_insert(e);
        }
        Ok(())
    })?;
    if let Some(e) = io_err {
        bail!("writing {}: {e}", loss_path.display());
    }
    let mut metrics = report.metrics();
    metrics.insert("frozen_checksum".into(), report.frozen_checksum_after.clone().into());
    model.save(&a.out, metrics.clone())?;
    out!("{}", Value::Object(metrics));
    Ok(())
}

fn caption(a: CaptionArgs) -> Result<()> {
    let model = TpCap::load(&a.ckpt)?;
    let image = read_ppm(&a.image)?;
    let out = model.caption_image(&image)?;
    if a.dump_entity_info {
        let image_id = a
            .image
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u64>().ok());
        out!(
            "{}",
            json!({"image_id": image_id, "entity_info_text": out.entity_text, "caption": out.caption})
        );
    } else {
        out!("{}", out.caption);
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let model = TpCap::load(&a.ckpt)?;
    let corpus = load_karpathy(&a.data, a.split.into())?;
    let samples = model.encode_corpus(&corpus)?;
    let eval = evaluate_encoded(&model, &samples)?;
    if a.dump_entity_info {
        for d in &eval.dumps {
            out!("{}", serde_json::to_string(d)?);
        }
    }
    match a.report {
        Some(path) => write_json(&path, &eval.report)?,
        None if !a.dump_entity_info => out!("{}", serde_json::to_string_pretty(&eval.report)?),
        None => {}
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let backbone = Backbone::load(&a.backbone)?;
    let base = a.cfg.load(Some(&backbone.config))?;
    let train_corpus = load_karpathy(&a.data, Split::Train)?;
    let test_corpus = load_karpathy(&a.data, a.split.into())?;
    let train_set = backbone.encode_corpus(&train_corpus)?;
    let test_set = backbone.encode_corpus(&test_corpus)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let cells = ablation_grid(&a.purification, &a.projector);
    let mut done: Vec<AblationRow> = Vec::new();
    let mut flush_err = None;
    let rows = run_ablation(&backbone, &base, &train_set, &test_set, &cells, |row| {
        done.push(row.clone());
        eprintln!("{}: CIDEr-D {:.4}", row.name, row.report.cider_d);
        if let Err(e) = write_tables(&a.out, &done, &base) {
            flush_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = flush_err {
        return Err(e);
    }
    write_tables(&a.out, &rows, &base)?;
    write!(std::io::stdout().lock(), "{}", ablation_markdown(&rows))?;
    Ok(())
}

fn write_tables(out: &Path, rows: &[AblationRow], base: &RunConfig) -> Result<()> {
    let doc = json!({
        "format_version": tpcap_core::FORMAT_VERSION,
        "seed": base.seed,
        "config_hash": base.hash(),
        "rows": rows,
    });
    write_json(&out.join("ablation.json"), &doc)?;
    let md = out.join("ablation.md");
    fs::write(&md, ablation_markdown(rows)).with_context(|| format!("writing {}", md.display()))
}

fn params(a: ParamsArgs) -> Result<()> {
    let model = match a.dims {
        Dims::Paper => ModelConfig::paper(),
        Dims::Toy => ModelConfig::toy(),
    };
    let count = |pair: ProjectorPair| count_trainable_params(&ProjectorConfig::from_model(&model, pair));
    let out = match a.variant {
        Some(pair) => json!({"variant": variant_name(pair), "trainable_params": count(pair)}),
        None => Value::Array(
            ProjectorPair::table_rows()
                .into_iter()
                .map(|(name, pair)| json!({"variant": name, "trainable_params": count(pair)}))
                .collect(),
        ),
    };
    out!("{out}");
    Ok(())
}

fn variant_name(pair: ProjectorPair) -> &'static str {
    ProjectorPair::table_rows()
        .into_iter()
        .find(|(_, p)| *p == pair)
        .map(|(name, _)| name)
        .expect("every parsed pair is a table row")
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    const TOL: f64 = 1e-4;
    let combos = [
        ("ours", Purification::Mp),
        ("l-hdl", Purification::Refine),
        ("dl", Purification::Fusion),
        ("s", Purification::None),
    ];
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for (pair, purification) in combos {
        let variant = VariantConfig {
            projector: pair.parse()?,
            purification,
            ta1: true,
        };
        let r = gradcheck_variant(variant, a.seed)?;
        for f in r.failures(TOL) {
            failed.push(format!("{} ({}): {:.3e}", f.name, r.variant, f.max_rel_error));
        }
        reports.push(r);
    }
    let mut doc = Map::new();
    doc.insert("tolerance".into(), TOL.into());
    doc.insert("reports".into(), serde_json::to_value(&reports)?);
    doc.insert("passed".into(), failed.is_empty().into());
    match a.report {
        Some(path) => write_json(&path, &doc)?,
        None => out!("{}", serde_json::to_string_pretty(&doc)?),
    }
    if !failed.is_empty() {
        bail!("gradient mismatch: {}", failed.join("; "));
    }
    Ok(())
}
