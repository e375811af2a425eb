use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use vqfont_core::config::{Preset, Variant};
use vqfont_core::pipeline::{self, device_from_env, parse_codepoint, RunDir, Split, DATA_DIR, FINAL_CHECKPOINT};
use vqfont_core::structure::StructureTable;
use vqfont_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "vqfont", version, about = "Few-shot glyph generation with a learned glyph codebook")]
struct Cli {
    /// Run directory for data, checkpoints, logs and reports.
    #[arg(long, global = true, default_value = "runs/default")]
    run_dir: PathBuf,
    /// TOML config; unspecified keys take the selected preset's values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, conflicts_with = "config")]
    preset: Option<Preset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render glyphs and write the character and font splits.
    PrepareData,
    /// Stage one: train the glyph autoencoder and its codebook.
    PretrainVqgan {
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Stage two: train the index predictor against a frozen codebook.
    TrainVqfont {
        /// Stage-one checkpoint; defaults to the run's final one.
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Write generated glyph PNGs for evaluation splits.
    Generate {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum, num_args = 1.., default_values = ["sfuc", "ufuc"])]
        split: Vec<Split>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score generated glyphs against ground truth.
    Evaluate {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum, num_args = 1.., default_values = ["sfuc", "ufuc"])]
        split: Vec<Split>,
        /// Comparison grid PNG (content, references, generated, ground truth).
        #[arg(long)]
        grid: Option<PathBuf>,
        /// VGG16 safetensors with optional `lin{0..4}` weights; enables LPIPS.
        #[arg(long)]
        lpips_weights: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a character's structure category and component positions.
    Decompose {
        #[arg(long = "char")]
        character: String,
        /// Composition table; defaults to the run's prepared one.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Patch grid side; defaults to the config's latent size.
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Write head-averaged cross-attention of one sample as JSON.
    DumpAttention {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long = "char")]
        character: String,
        #[arg(long)]
        font: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn default_stage_two(run: &RunDir) -> PathBuf {
    run.join(pipeline::stage_two_dir(Variant::Full)).join(FINAL_CHECKPOINT)
}

fn eval_dir(run: &RunDir, ckpt: &Path) -> PathBuf {
    let stage = ckpt.parent().and_then(Path::file_name).and_then(|s| s.to_str()).unwrap_or("model");
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("ckpt");
    run.join("eval").join(format!("{stage}-{stem}"))
}

fn run(cli: Cli) -> Result<Value> {
    let device = device_from_env()?;
    if let Command::Evaluate { ckpt: None, .. } = cli.command {
        return Err(Error::MissingCheckpoint("evaluate needs --ckpt".into()));
    }
    if let Command::Decompose { character, table, grid } = &cli.command {
        let cp = parse_codepoint(character)?;
        let table = StructureTable::load(&table.clone().unwrap_or_else(|| cli.run_dir.join(DATA_DIR).join("structure.tsv")))?;
        let grid = match (grid, &cli.config) {
            (Some(g), _) => *g,
            (None, Some(path)) => vqfont_core::config::RunConfig::load(path)?.vqgan.latent_size,
            (None, None) => vqfont_core::config::RunConfig::preset(cli.preset.unwrap_or(Preset::Tiny)).vqgan.latent_size,
        };
        return pipeline::decompose_char(&table, cp, grid);
    }
    let run = RunDir::open(&cli.run_dir)?;
    let mut cfg = run.config(cli.config.as_deref(), cli.preset)?;
    match cli.command {
        Command::PrepareData => pipeline::prepare_data(&run, &cfg),
        Command::PretrainVqgan { iterations } => {
            if let Some(n) = iterations {
                cfg.stage1.iterations = n;
            }
            pipeline::pretrain_vqgan(&run, &cfg, &device)
        }
        Command::TrainVqfont { stage1, variant, iterations } => {
            if let Some(n) = iterations {
                cfg.stage2.iterations = n;
            }
            if let Some(v) = variant {
                cfg.stage2.variant = v;
            }
            let stage1 = stage1.unwrap_or_else(|| run.join("vqgan").join(FINAL_CHECKPOINT));
            pipeline::train_vqfont_stage(&run, &cfg, &stage1, &device)
        }
        Command::Generate { ckpt, split, out } => {
            let ckpt = ckpt.unwrap_or_else(|| default_stage_two(&run));
            let out = out.unwrap_or_else(|| run.join("generated"));
            pipeline::generate_split(&run, &ckpt, &split, &out, &device)
        }
        Command::Evaluate {
            ckpt,
            split,
            grid,
            lpips_weights,
            out,
        } => {
            let ckpt = ckpt.expect("checked above");
            let out = out.unwrap_or_else(|| eval_dir(&run, &ckpt));
            let report = pipeline::evaluate(&run, &ckpt, &split, lpips_weights.as_deref(), grid.as_deref(), &out, &device)?;
            Ok(json!({ "out": out, "summaries": report.summaries }))
        }
        Command::DumpAttention { ckpt, character, font, out } => {
            let cp = parse_codepoint(&character)?;
            let ckpt = ckpt.unwrap_or_else(|| default_stage_two(&run));
            let dump = pipeline::dump_attention(&run, &ckpt, cp, font.as_deref(), &device)?;
            let out = out.unwrap_or_else(|| run.join("attention").join(format!("{}-{cp:04X}.json", dump["font"].as_str().unwrap_or("font"))));
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&out, serde_json::to_string(&dump)? + "\n")?;
            Ok(json!({ "out": out, "rows": dump["rows"], "cols": dump["cols"] }))
        }
        Command::Decompose { .. } => unreachable!("handled before the run directory is opened"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            eprintln!("USAGE_ERROR: {}", msg.lines().next().unwrap_or_default().trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("{}: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
