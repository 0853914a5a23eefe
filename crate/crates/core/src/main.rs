use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dirhoi::attention::AttentionRecorder;
use dirhoi::data::DatasetSplit;
use dirhoi::evaluation::evaluate_model;
use dirhoi::model::{DirModel, Mode};
use dirhoi::nn::Bound;
use dirhoi::tensor::{load_checkpoint, Tape};
use dirhoi::train::{ablate, train, write_ablation, TrainConfig, Variant, CHECKPOINT_FILE};

#[derive(Parser)]
#[command(name = "dirhoi", version, about = "Desk-scale HOI detection with disentangled interaction representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines; the desk profile when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Applies a named ablation variant to the model flags.
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset as JSON lines.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint, metric log and resolved config.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Dataset file from `generate`; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint in both modes.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file or training output directory; freshly initialized weights when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Directory for `report.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and test every variant over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Restrict to these variants (comma-separated).
        #[arg(long, value_delimiter = ',')]
        only: Vec<Variant>,
    },
    /// Write cross-attention grids of every decoder layer, head and query for one scene.
    DumpAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Include box-coordinate queries and their masks.
        #[arg(long)]
        train_mode: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the tensors stored in a checkpoint.
    InspectCheckpoint {
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(c: &Common) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(v) = c.variant {
        cfg.model = v.apply(&cfg.model);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &TrainConfig, path: Option<&Path>) -> Result<DatasetSplit> {
    match path {
        Some(p) => Ok(DatasetSplit::load(p).with_context(|| format!("reading {}", p.display()))?),
        None => Ok(cfg.dataset()),
    }
}

fn load_model(cfg: &TrainConfig, checkpoint: Option<&Path>) -> Result<DirModel> {
    let mut model = DirModel::new(cfg.model.clone(), cfg.seed)?;
    if let Some(p) = checkpoint {
        let file = if p.is_dir() { p.join(CHECKPOINT_FILE) } else { p.to_path_buf() };
        let entries = load_checkpoint(&file).with_context(|| format!("reading {}", file.display()))?;
        model.store.load_entries(entries).context("checkpoint does not fit the configured model")?;
    }
    Ok(model)
}

fn pick(data: &DatasetSplit, split: Split) -> &[dirhoi::data::Scene] {
    match split {
        Split::Train => &data.train,
        Split::Val => &data.val,
        Split::Test => &data.test,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, out } => {
            let cfg = load_config(&common)?;
            let data = cfg.dataset();
            fs::create_dir_all(&out)?;
            let path = out.join("dataset.jsonl");
            data.save(&path)?;
            println!("{data}");
            println!("wrote {}", path.display());
        }
        Command::Train { common, out, data } => {
            let cfg = load_config(&common)?;
            let data = load_data(&cfg, data.as_deref())?;
            let start = Instant::now();
            let outcome = train(&cfg, &data, |r| {
                let val = r.val_map.map_or_else(String::new, |m| format!(" val mAP {:.2}", 100.0 * m));
                eprintln!(
                    "epoch {:>3} loss {:.4} (L_l {:.4} L_s {:.4} L_p {:.4}){val} [{:.0}s]",
                    r.epoch,
                    r.total,
                    r.l_l,
                    r.l_s,
                    r.l_p,
                    start.elapsed().as_secs_f64()
                );
            })?;
            outcome.save(&out, &cfg)?;
            println!("best epoch {} written to {}", outcome.best_epoch, out.display());
        }
        Command::Eval { common, checkpoint, data, split, out } => {
            let cfg = load_config(&common)?;
            let data = load_data(&cfg, data.as_deref())?;
            let model = load_model(&cfg, checkpoint.as_deref())?;
            let report = evaluate_model(&model, pick(&data, split), &data.rare_categories(), cfg.top_k)?;
            print!("{report}");
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("report.txt"), report.records_text())?;
            }
        }
        Command::Ablate { common, out, seeds, only } => {
            let cfg = load_config(&common)?;
            let variants = if only.is_empty() { Variant::ALL.to_vec() } else { only };
            if seeds.is_empty() {
                bail!("no seeds given");
            }
            let start = Instant::now();
            let table = ablate(&cfg, &variants, &seeds, |v, s, r| {
                let full = r.default.full.map_or_else(|| "-".into(), |m| format!("{:.2}", 100.0 * m));
                eprintln!("{v} seed {s}: DT full {full} [{:.0}s]", start.elapsed().as_secs_f64());
            })?;
            write_ablation(&out, &table)?;
            print!("{table}");
        }
        Command::DumpAttention { common, checkpoint, data, split, scene, train_mode, out } => {
            let cfg = load_config(&common)?;
            let data = load_data(&cfg, data.as_deref())?;
            let model = load_model(&cfg, checkpoint.as_deref())?;
            let scenes = pick(&data, split);
            let Some(s) = scenes.get(scene) else {
                bail!("scene {scene} out of range ({} scenes in split)", scenes.len());
            };
            let mut rec = AttentionRecorder::enabled(cfg.model.grid_rows, cfg.model.grid_cols);
            let mut tape = Tape::new();
            let p = Bound::bind(&model.store, &mut tape, false);
            let pairs = s.box_pairs();
            let mode = if train_mode { Mode::Train(&pairs) } else { Mode::Infer };
            model.forward(&mut tape, &p, &s.feature_tensor(), mode, Some(&mut rec))?;
            let n = rec.write_dumps(&out)?;
            println!("wrote {n} attention grids to {}", out.display());
        }
        Command::InspectCheckpoint { checkpoint, common } => {
            let entries = load_checkpoint(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let mut total = 0;
            for (name, t) in &entries {
                println!("{name:<28} {:?}", t.shape());
                total += t.len();
            }
            println!("{} tensors, {total} scalars", entries.len());
            if common.config.is_some() {
                let cfg = load_config(&common)?;
                let expected = DirModel::expected_num_params(&cfg.model);
                let verdict = if expected == total { "matches" } else { "does not match" };
                println!("{verdict} the configured model ({expected} scalars)");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cause = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {cause}");
            ExitCode::FAILURE
        }
    }
}
