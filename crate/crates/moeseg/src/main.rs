//! Command-line surface: corpus generation, the two training phases,
//! assembly, evaluation, ablations, and parameter accounting.
//!
//! Every failure exits nonzero with a single machine-parseable line on
//! stderr: `error: <category>: <message>`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use autograd::checkpoint::{load_into_module, load_records, save_records};
use moeseg::backbone::SegModel;
use moeseg::config::{ExperimentConfig, MoePlacement};
use moeseg::data::{generate, load_corpus, save_corpus, SynthSpec};
use moeseg::heads::LabelSpace;
use moeseg::metrics::{count_params, evaluate, validate_against_schema};
use moeseg::train::{
    assemble_moe, checkpoint_records, phase1_pretrain, phase2_finetune, run_ablation, MergeMode,
};
use moeseg::{Error, Result};

#[derive(Parser)]
#[command(name = "moeseg", version, about = "Mixture-of-experts multimodal segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a spec file.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Phase 1: masked-autoencoder pre-training of one modality's expert.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        modality: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Merge phase-1 checkpoints into the gated mixture model.
    Assemble {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated phase-1 checkpoints, one per expert slot.
        #[arg(long, value_delimiter = ',')]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "average")]
        merge: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Phase 2: end-to-end segmentation fine-tuning.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Run directory; defaults to run-<timestamp>-seed<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint over a corpus and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Overrides the checkpoint's sidecar config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train placement/gating variants from scratch and compare.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated placement:gating pairs, e.g. both:on,none:off.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the parameter breakdown of the configured model.
    Params {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

/// Sidecar stored beside every checkpoint so `eval` can rebuild the model.
#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ExperimentConfig,
    label_space: LabelSpace,
}

fn meta_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_os_string();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn write_meta(ckpt: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let label_space = build_space(cfg)?;
    let meta = CheckpointMeta { config: cfg.clone(), label_space };
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Config(format!("meta serialize: {e}")))?;
    std::fs::write(meta_path(ckpt), text)?;
    Ok(())
}

fn read_meta(ckpt: &Path) -> Result<CheckpointMeta> {
    let p = meta_path(ckpt);
    let text = std::fs::read_to_string(&p).map_err(|_| {
        Error::Checkpoint(format!("missing sidecar {} (pass --config to supply one)", p.display()))
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))
}

fn build_space(cfg: &ExperimentConfig) -> Result<LabelSpace> {
    LabelSpace::build(&cfg.modalities, cfg.channel_assignment, &Default::default())
}

/// Seed precedence: --seed flag, then M4OE_SEED, then the config file.
fn resolve_seed(cfg: &mut ExperimentConfig, flag: Option<u64>) -> Result<()> {
    if let Some(s) = flag {
        cfg.seed = s;
    } else if let Ok(v) = std::env::var("M4OE_SEED") {
        cfg.seed = v
            .parse()
            .map_err(|_| Error::Config(format!("M4OE_SEED '{v}' is not an integer")))?;
    }
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    resolve_seed(&mut cfg, seed)?;
    Ok(cfg)
}

fn parse_variant(s: &str) -> Result<(MoePlacement, bool)> {
    let (p, g) = s
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("variant '{s}' must look like placement:on|off")))?;
    let placement: MoePlacement = p.parse()?;
    let gated = match g {
        "on" => true,
        "off" => false,
        other => return Err(Error::Config(format!("gating must be on or off, got '{other}'"))),
    };
    if gated && !matches!(placement, MoePlacement::None) {
        return Ok((placement, true));
    }
    Ok((placement, gated))
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Gen { spec, out, seed } => {
            let mut spec = SynthSpec::load(&spec)?;
            if let Some(s) = seed {
                spec.seed = s;
            } else if let Ok(v) = std::env::var("M4OE_SEED") {
                spec.seed = v
                    .parse()
                    .map_err(|_| Error::Config(format!("M4OE_SEED '{v}' is not an integer")))?;
            }
            let corpus = generate(&spec)?;
            save_corpus(&corpus, &out)?;
            println!(
                "wrote {} samples ({} modalities) to {}",
                corpus.samples.len(),
                corpus.modality_ids().len(),
                out.display()
            );
        }
        Command::Pretrain { config, corpus, modality, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let corpus = load_corpus(&corpus)?;
            let (model, report) = phase1_pretrain(&cfg, &corpus, modality)?;
            save_records(&out, &checkpoint_records(&model)).map_err(Error::from)?;
            write_meta(&out, &cfg)?;
            report.save_json(&with_suffix(&out, ".report.json"))?;
            report.save_loss_csv(&with_suffix(&out, ".loss.csv"))?;
            let first = report.loss_curve.first().copied().unwrap_or(0.0);
            let last = report.loss_curve.last().copied().unwrap_or(0.0);
            println!(
                "modality {modality}: {} epochs, loss {first:.4} -> {last:.4}, checkpoint {}",
                report.epochs,
                out.display()
            );
        }
        Command::Assemble { config, ckpts, out, merge, seed } => {
            let cfg = load_config(&config, seed)?;
            let mode: MergeMode = merge.parse()?;
            let mut records = Vec::with_capacity(ckpts.len());
            for p in &ckpts {
                records.push(load_records(p).map_err(Error::from)?);
            }
            let model = assemble_moe(&records, &cfg, mode)?;
            save_records(&out, &checkpoint_records(&model)).map_err(Error::from)?;
            write_meta(&out, &cfg)?;
            println!(
                "assembled {} experts ({} parameters) into {}",
                cfg.moe.num_experts,
                count_params(&model).total,
                out.display()
            );
        }
        Command::Finetune { config, ckpt, corpus, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let corpus = load_corpus(&corpus)?;
            let space = build_space(&cfg)?;
            let mut model = SegModel::build(cfg.model_config(), cfg.seed)?;
            load_into_module(&ckpt, &mut model, true).map_err(Error::from)?;
            space.check_head_rows(model.head.w.tensor.shape[0])?;

            let run_dir = out.unwrap_or_else(|| {
                let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
                PathBuf::from(format!("run-{stamp}-seed{}", cfg.seed))
            });
            std::fs::create_dir_all(&run_dir)?;
            let report = phase2_finetune(&mut model, &cfg, &corpus, &space)?;
            let ckpt_out = run_dir.join("checkpoint.bin");
            save_records(&ckpt_out, &checkpoint_records(&model)).map_err(Error::from)?;
            write_meta(&ckpt_out, &cfg)?;
            report.save_json(&run_dir.join("report.json"))?;
            report.save_loss_csv(&run_dir.join("loss_curve.csv"))?;
            if let Some(m) = &report.final_metrics {
                println!(
                    "fine-tuned {} epochs, mean DSC {:.4}, artifacts in {}",
                    report.epochs,
                    m.mean_dsc,
                    run_dir.display()
                );
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Eval { ckpt, corpus, report, config } => {
            let (cfg, space) = match config {
                Some(path) => {
                    let cfg = ExperimentConfig::load(&path)?;
                    let space = build_space(&cfg)?;
                    (cfg, space)
                }
                None => {
                    let meta = read_meta(&ckpt)?;
                    (meta.config, meta.label_space)
                }
            };
            let corpus = load_corpus(&corpus)?;
            let mut model = SegModel::build(cfg.model_config(), cfg.seed)?;
            load_into_module(&ckpt, &mut model, true).map_err(Error::from)?;
            space.check_head_rows(model.head.w.tensor.shape[0])?;
            let result = evaluate(&model, &corpus, &space, &cfg.metrics, cfg.phase2.batch_size)?;
            let value = serde_json::to_value(&result)
                .map_err(|e| Error::Data(format!("report serialize: {e}")))?;
            validate_against_schema(&value, &moeseg::metrics::eval_report_schema())?;
            std::fs::write(&report, serde_json::to_string_pretty(&value).unwrap())?;
            println!("mean DSC {:.4}, mean IoU {:.4}, report {}", result.mean_dsc, result.mean_iou, report.display());
            for m in &result.per_modality {
                println!("  {}: DSC {:.4} over {} samples", m.name, m.mean_dsc, m.sample_count);
            }
        }
        Command::Ablate { config, corpus, variants, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let corpus = load_corpus(&corpus)?;
            let space = build_space(&cfg)?;
            let parsed: Vec<(MoePlacement, bool)> =
                variants.iter().map(|v| parse_variant(v)).collect::<Result<_>>()?;
            if parsed.is_empty() {
                return Err(Error::Config("ablate needs at least one variant".into()));
            }
            let table = run_ablation(&cfg, &corpus, &parsed, &space)?;
            print!("{table}");
            if let Some(path) = out {
                let text = serde_json::to_string_pretty(&table)
                    .map_err(|e| Error::Data(format!("table serialize: {e}")))?;
                std::fs::write(path, text)?;
            }
        }
        Command::Params { config, json } => {
            let cfg = ExperimentConfig::load(&config)?;
            let model = SegModel::build(cfg.model_config(), cfg.seed)?;
            let b = count_params(&model);
            if json {
                println!("{}", serde_json::to_string_pretty(&b).unwrap());
            } else {
                println!("total      {:>10}", b.total);
                println!("attention  {:>10}", b.attention);
                println!("experts    {:>10}", b.experts);
                println!("gating     {:>10}", b.gating);
                println!("heads      {:>10}", b.heads);
                println!("other      {:>10}", b.other);
            }
        }
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {}: {e}", e.category());
        std::process::exit(1);
    }
}
