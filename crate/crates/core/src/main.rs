use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lrta::perturb::{CueLexicons, MaskKind};
use lrta::pipeline::{
    evaluate_split, full_report, parse_override_args, perturbation_rows, run_explain, train_to_dir, Ablation, Model,
    PipelineConfig,
};
use lrta::worldgen::{build_dataset, load_dataset, write_dataset, WorldSchema};
use lrta::{Error, Result};

/// Look-Read-Think-Answer visual question answering on synthetic scenes.
///
/// Any configuration field can be overridden with `--key value`, using
/// dots for nested fields, e.g. `--epochs 5 --optimizer.learning_rate 0.001`.
#[derive(Parser, Debug)]
#[command(name = "lrta", version)]
struct Cli {
    /// JSON configuration file; defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate scenes, questions and answers into `data_dir`.
    GenData {
        /// World schema JSON; the built-in schema when absent.
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Train on `data_dir` and write the checkpoint and log to `out_dir`.
    Train,
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "testdev")]
        split: String,
        /// none, strip_attributes or strip_relations.
        #[arg(long, default_value = "none")]
        ablation: String,
    },
    /// Accuracy drops under question masking.
    PerturbEval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "testdev")]
        split: String,
        #[arg(long)]
        lexicons: Option<PathBuf>,
        #[arg(long)]
        mask_copulas: bool,
    },
    /// Step-by-step trace for one question.
    Explain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "testdev")]
        split: String,
        #[arg(long)]
        question_id: String,
    },
    /// Clean, ablated and perturbed evaluation; writes `report.json` and
    /// `drop_table.csv` into `out_dir`.
    Report {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "testdev")]
        split: String,
        #[arg(long)]
        lexicons: Option<PathBuf>,
        #[arg(long)]
        mask_copulas: bool,
    },
    /// Mask a questions JSONL file.
    Perturb {
        #[arg(long = "in")]
        input: PathBuf,
        /// attributes or vb_prpn.
        #[arg(long)]
        mask: String,
        #[arg(long)]
        lexicons: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mask_copulas: bool,
    },
}

type Overrides = Vec<(String, String)>;

/// Separates `--key value` config overrides from ordinary arguments.
fn split_args(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let keys: BTreeSet<String> = match serde_json::to_value(PipelineConfig::default())? {
        serde_json::Value::Object(m) => m.keys().cloned().collect(),
        _ => BTreeSet::new(),
    };
    let mut cli = Vec::new();
    let mut extra = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let root = a
            .strip_prefix("--")
            .map(|k| k.split(['.', '=']).next().unwrap_or_default().to_string());
        match root {
            Some(r) if keys.contains(&r) => {
                extra.push(a.clone());
                if !a.contains('=') {
                    extra.push(it.next().ok_or_else(|| Error::Config(format!("{a} needs a value")))?);
                }
            }
            _ => cli.push(a),
        }
    }
    Ok((cli, parse_override_args(&extra)?))
}

fn lexicons(dir: Option<&Path>, schema: &WorldSchema, copulas: bool) -> Result<CueLexicons> {
    let mut lex = match dir {
        Some(d) => CueLexicons::load(d)?,
        None => CueLexicons::for_schema(schema),
    };
    lex.mask_copulas = copulas;
    Ok(lex)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run() -> Result<()> {
    let (args, overrides) = split_args(std::env::args().collect())?;
    let cli = Cli::parse_from(args);
    let base = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let cfg = base.with_overrides(&overrides)?;
    let checkpoint = |c: &Option<PathBuf>| c.clone().unwrap_or_else(|| cfg.out_dir.join("model.ckpt"));
    match cli.command {
        Command::GenData { schema } => {
            let schema = match schema {
                Some(p) => WorldSchema::load(&p)?,
                None => WorldSchema::default(),
            };
            let data = build_dataset(&schema, &cfg.data)?;
            write_dataset(&cfg.data_dir, &data)?;
            print_json(&serde_json::json!({
                "data_dir": cfg.data_dir,
                "train": data.train.questions.len(),
                "valid": data.valid.questions.len(),
                "testdev": data.testdev.questions.len(),
            }))
        }
        Command::Train => {
            let data = load_dataset(&cfg.data_dir)?;
            let (_, log) = train_to_dir(&cfg, &data, &cfg.out_dir, &mut |e| {
                eprintln!(
                    "epoch {:>3}  loss {:>9.4}  valid short {:.4}  full {:.4}  {:.1}s",
                    e.epoch, e.loss.total, e.valid_short_acc, e.valid_full_acc, e.wall_seconds
                )
            })?;
            print_json(&log)
        }
        Command::Eval {
            checkpoint: c,
            split,
            ablation,
        } => {
            let data = load_dataset(&cfg.data_dir)?;
            let model = Model::load(&checkpoint(&c), &data.schema)?;
            print_json(&evaluate_split(&model, data.split(&split)?, &split, Ablation::parse(&ablation)?)?)
        }
        Command::PerturbEval {
            checkpoint: c,
            split,
            lexicons: dir,
            mask_copulas,
        } => {
            let data = load_dataset(&cfg.data_dir)?;
            let model = Model::load(&checkpoint(&c), &data.schema)?;
            let lex = lexicons(dir.as_deref(), &data.schema, mask_copulas)?;
            print_json(&perturbation_rows(&model, data.split(&split)?, &lex)?)
        }
        Command::Explain {
            checkpoint: c,
            split,
            question_id,
        } => {
            let data = load_dataset(&cfg.data_dir)?;
            let model = Model::load(&checkpoint(&c), &data.schema)?;
            print_json(&run_explain(&model, data.split(&split)?, &question_id)?)
        }
        Command::Report {
            checkpoint: c,
            split,
            lexicons: dir,
            mask_copulas,
        } => {
            let data = load_dataset(&cfg.data_dir)?;
            let model = Model::load(&checkpoint(&c), &data.schema)?;
            let lex = lexicons(dir.as_deref(), &data.schema, mask_copulas)?;
            let report = full_report(&model, data.split(&split)?, &split, &lex)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            std::fs::write(cfg.out_dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            std::fs::write(cfg.out_dir.join("drop_table.csv"), report.drop_table_csv())?;
            print_json(&report)
        }
        Command::Perturb {
            input,
            mask,
            lexicons: dir,
            out,
            mask_copulas,
        } => {
            let kind = MaskKind::parse(&mask)?;
            let lex = lexicons(dir.as_deref(), &WorldSchema::default(), mask_copulas)?;
            let r = BufReader::new(
                std::fs::File::open(&input).map_err(|e| Error::Data(format!("{}: {e}", input.display())))?,
            );
            let mut w = BufWriter::new(std::fs::File::create(&out)?);
            for line in r.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let v = lrta::perturb::mask_json_line(&line, kind, &lex)?;
                serde_json::to_writer(&mut w, &v)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
