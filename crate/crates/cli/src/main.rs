//! `unigrid`: run training stages, evaluate checkpoints, and poke at the world.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use unigrid_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use unigrid_core::codec::{parse_caption, parse_words, vocab_json};
use unigrid_core::data::World;
use unigrid_core::pipeline::{
    check_order, edit_from_text, generate_from_text, render_scene, run_ablate, run_align, run_eval, run_pretrain,
    run_rl, run_sft, MetricsLog, RunConfig, SceneFile, Stage, SuiteKind,
};
use unigrid_core::rewards::{ensemble, score_scene};
use unigrid_core::world::describe;

#[derive(Parser)]
#[command(name = "unigrid", version, about = "Unified masked-token generation and editing on a synthetic grid world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct StageArgs {
    /// RunConfig JSON (defaults apply to missing keys).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Permit starting from an earlier stage than the immediate predecessor.
    #[arg(long)]
    allow_skip: bool,
    /// Run directory for checkpoints, metrics and reports.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Input checkpoint (default: the predecessor's checkpoint in --out).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    T2i,
    Edit,
    Vqa,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    cfg_scale_image: Option<f64>,
    #[arg(long)]
    cfg_scale_text: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    Pretrain(StageArgs),
    Sft(StageArgs),
    Align(StageArgs),
    Rl(StageArgs),
    /// RL grid over task alternation with and without alignment, plus the condition-order study.
    Ablate(StageArgs),
    Eval {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Evaluation suite seed (overrides eval.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Report path.
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Text-to-image from --prompt, or an edit from --edit-scene and --edit-instruction.
    Generate {
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        edit_scene: Option<PathBuf>,
        #[arg(long)]
        edit_instruction: Option<String>,
    },
    Edit {
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        edit_scene: PathBuf,
        #[arg(long)]
        edit_instruction: String,
    },
    DumpVocab,
    /// Score a scene file against a caption with every reward.
    Score {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        caption: String,
    },
    /// Print world scenes with their descriptions as JSON lines.
    DumpData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        first_id: u64,
        #[arg(long, default_value_t = 10)]
        n: u64,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>, stage: Stage) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => RunConfig::default(),
    };
    if let (Some(s), Some(_)) = (cfg.stage, stage.rank()) {
        if s != stage {
            bail!("config is for stage {}, not {}", s.name(), stage.name());
        }
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ckpt_path(out: &Path, stage: Stage) -> PathBuf {
    out.join(format!("{}.ug15", stage.name()))
}

/// The explicit checkpoint, else the newest admissible stage checkpoint in the run directory.
fn input_checkpoint(args: &StageArgs, stage: Stage) -> Result<Checkpoint> {
    if let Some(p) = &args.checkpoint {
        return load_checkpoint(p).with_context(|| format!("loading {}", p.display()));
    }
    let chain = [Stage::Pretrain, Stage::Sft, Stage::Align, Stage::Rl];
    let rank = stage.rank().expect("training stage");
    let candidates: Vec<Stage> = if args.allow_skip {
        chain[..rank].iter().rev().copied().collect()
    } else {
        chain[..rank].last().copied().into_iter().collect()
    };
    for s in candidates {
        let p = ckpt_path(&args.out, s);
        if p.exists() {
            return load_checkpoint(&p).with_context(|| format!("loading {}", p.display()));
        }
    }
    Err(unigrid_core::Error::Ordering(format!(
        "{} needs a prerequisite checkpoint in {} (chain pretrain, sft, align, rl)",
        stage.name(),
        args.out.display()
    ))
    .into())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run_stage(stage: Stage, args: &StageArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), args.seed, stage)?;
    fs::create_dir_all(&args.out)?;
    let mut log = MetricsLog::to_file(&args.out.join(format!("{}.metrics.jsonl", stage.name())))?;
    let ckpt = match stage {
        Stage::Pretrain => run_pretrain(&cfg, &mut log)?,
        Stage::Sft => run_sft(&cfg, &input_checkpoint(args, stage)?, args.allow_skip, &mut log)?,
        Stage::Align => {
            let (c, eval) = run_align(&cfg, &input_checkpoint(args, stage)?, args.allow_skip, &mut log)?;
            write_json(&args.out.join("align_eval.json"), &eval)?;
            c
        }
        Stage::Rl => {
            let (c, report) = run_rl(&cfg, &input_checkpoint(args, stage)?, args.allow_skip, &mut log)?;
            write_json(&args.out.join("rl_report.json"), &report)?;
            c
        }
        _ => unreachable!("training stages only"),
    };
    let path = ckpt_path(&args.out, stage);
    let hash = save_checkpoint(&path, &ckpt)?;
    println!("{}", json!({"stage": stage.name(), "checkpoint": path, "sha256": hash}));
    Ok(())
}

fn decode_config(d: &DecodeArgs) -> Result<(RunConfig, Checkpoint)> {
    let mut cfg = load_config(d.config.as_deref(), None, Stage::Generate)?;
    let dc = &mut cfg.eval.decode;
    dc.seed = d.seed;
    if let Some(s) = d.steps {
        dc.steps = s;
    }
    if let Some(s) = d.cfg_scale {
        dc.s = s;
    }
    if let Some(s) = d.cfg_scale_image {
        dc.s_i = s;
    }
    if let Some(s) = d.cfg_scale_text {
        dc.s_t = s;
    }
    dc.validate()?;
    let ckpt = load_checkpoint(&d.checkpoint).with_context(|| format!("loading {}", d.checkpoint.display()))?;
    check_order(Stage::Generate, &ckpt.provenance, true)?;
    Ok((cfg, ckpt))
}

fn read_scene(path: &Path) -> Result<unigrid_core::world::Scene> {
    let f: SceneFile = serde_json::from_str(&fs::read_to_string(path)?).context("scene file")?;
    Ok(f.to_scene()?)
}

fn print_scene(scene: &unigrid_core::world::Scene) -> Result<()> {
    println!("{}", serde_json::to_string(&SceneFile::from_scene(scene))?);
    print!("{}", render_scene(scene));
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain(a) => run_stage(Stage::Pretrain, &a)?,
        Command::Sft(a) => run_stage(Stage::Sft, &a)?,
        Command::Align(a) => run_stage(Stage::Align, &a)?,
        Command::Rl(a) => run_stage(Stage::Rl, &a)?,
        Command::Ablate(a) => {
            let cfg = load_config(a.config.as_deref(), a.seed, Stage::Ablate)?;
            let align = load_checkpoint(&ckpt_path(&a.out, Stage::Align)).context("ablate needs align.ug15")?;
            let sft = load_checkpoint(&ckpt_path(&a.out, Stage::Sft)).context("ablate needs sft.ug15")?;
            let pre = load_checkpoint(&ckpt_path(&a.out, Stage::Pretrain)).ok();
            let mut log = MetricsLog::to_file(&a.out.join("ablate.metrics.jsonl"))?;
            let report = run_ablate(&cfg, &align, &sft, pre.as_ref(), &mut log)?;
            write_json(&a.out.join("ablation.json"), &report)?;
            for s in &report.soft {
                println!("{} {}: {}", if s.pass { "PASS" } else { "FAIL" }, s.name, s.detail);
            }
        }
        Command::Eval { suite, checkpoint, config, seed, out } => {
            let mut cfg = load_config(config.as_deref(), None, Stage::Eval)?;
            if let Some(seed) = seed {
                cfg.eval.seed = seed;
            }
            let ckpt = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let kind = match suite {
                Suite::T2i => SuiteKind::T2i,
                Suite::Edit => SuiteKind::Edit,
                Suite::Vqa => SuiteKind::Vqa,
            };
            let r = run_eval(&cfg, &ckpt, kind)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_json(&out, &r)?;
            println!("{}", serde_json::to_string(&r)?);
        }
        Command::Generate { decode, prompt, edit_scene, edit_instruction } => {
            let (cfg, ckpt) = decode_config(&decode)?;
            let scene = match (prompt, edit_scene, edit_instruction) {
                (Some(p), None, None) => generate_from_text(&ckpt.model, &p, &cfg.eval.decode)?,
                (None, Some(s), Some(i)) => edit_from_text(&ckpt.model, &read_scene(&s)?, &i, cfg.order, &cfg.eval.decode)?,
                _ => bail!("give either --prompt, or both --edit-scene and --edit-instruction"),
            };
            print_scene(&scene)?;
        }
        Command::Edit { decode, edit_scene, edit_instruction } => {
            let (cfg, ckpt) = decode_config(&decode)?;
            let scene = edit_from_text(&ckpt.model, &read_scene(&edit_scene)?, &edit_instruction, cfg.order, &cfg.eval.decode)?;
            print_scene(&scene)?;
        }
        Command::DumpVocab => println!("{}", serde_json::to_string_pretty(&vocab_json())?),
        Command::Score { scene, caption } => {
            let scene = read_scene(&scene)?;
            let caption = parse_caption(&parse_words(&caption)?)?;
            let r = score_scene(&scene, &caption)?;
            println!("{}", json!({"rewards": r, "ensemble": ensemble(&r)}));
        }
        Command::DumpData { config, first_id, n } => {
            let cfg = load_config(config.as_deref(), None, Stage::Eval)?;
            let world = World::new(cfg.data)?;
            for id in first_id..first_id + n {
                let s = world.scene(id);
                let words = unigrid_core::codec::caption_words(&describe(&s));
                println!(
                    "{}",
                    json!({"id": id, "scene": SceneFile::from_scene(&s), "description": unigrid_core::codec::render_words(&words)})
                );
            }
        }
    }
    Ok(())
}
