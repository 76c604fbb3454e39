use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hsvit::analytics::{closed_form_itr, itr_hsvit_schedule, measured_itr, simulate_timeline, CostModel, Strategy};
use hsvit::data::{load_idx_dir, make_synthetic, write_idx, Dataset};
use hsvit::executor::ExecutionMode;
use hsvit::model::{ModelConfig, Variant};
use hsvit::train::{evaluate, train, DataConfig, RunConfig};

#[derive(Parser)]
#[command(
    name = "hsvit",
    version,
    about = "Train, evaluate and analyse horizontally scalable HSViT models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config and write metrics and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the number of workers.
        #[arg(long)]
        workers: Option<usize>,
        /// Override the execution mode (seq or conc).
        #[arg(long)]
        mode: Option<ExecutionMode>,
        /// Override the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Top-1 accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A directory holding images.idx and labels.idx, or a TOML file
        /// describing the data the way a run config's [data] table does.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = ExecutionMode::SequentialSim)]
        mode: ExecutionMode,
    },
    /// Closed-form and simulated idle-time ratio of one parallel strategy.
    Itr(CostArgs),
    /// Simulate a strategy's GPU timeline and write it as CSV.
    Timeline {
        #[command(flatten)]
        cost: CostArgs,
        #[arg(long)]
        out: PathBuf,
        /// Width of the text rendering printed to stdout.
        #[arg(long, default_value_t = 72)]
        width: usize,
    },
    /// Print the conv extents and sizes of a preset variant.
    Shapes {
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        input: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Write a synthetic dataset as IDX files.
    GenData {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        seed: u64,
        /// Output directory; receives images.idx and labels.idx.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    strategy: Strategy,
    /// Number of GPUs.
    #[arg(long)]
    k: usize,
    /// Microbatches (pp only).
    #[arg(long, default_value_t = 1)]
    s: usize,
    /// Forward time per layer (mp, pp).
    #[arg(long, default_value_t = 1.0)]
    tf: f64,
    /// Backward time per layer (mp, pp).
    #[arg(long, default_value_t = 1.0)]
    tb: f64,
    /// Forward time of one submodule (hsvit).
    #[arg(long, default_value_t = 1.0)]
    tf_sub: f64,
    /// Backward time of one submodule (hsvit).
    #[arg(long, default_value_t = 1.0)]
    tb_sub: f64,
    /// Forward time of the aggregation (hsvit).
    #[arg(long, default_value_t = 0.0)]
    tf_agg: f64,
    /// Backward time of the aggregation (hsvit).
    #[arg(long, default_value_t = 0.0)]
    tb_agg: f64,
}

impl CostArgs {
    fn cost(&self) -> CostModel {
        CostModel {
            t_f: self.tf,
            t_b: self.tb,
            k: self.k,
            s: self.s,
            t_f_sub: self.tf_sub,
            t_b_sub: self.tb_sub,
            t_f_agg: self.tf_agg,
            t_b_agg: self.tb_agg,
        }
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        return Ok(load_idx_dir(path)?);
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut data: DataConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let DataConfig::Idx { images, labels } = &mut data {
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [images, labels] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(data.load()?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            workers,
            mode,
            epochs,
        } => {
            let mut run = RunConfig::from_file(&config)?;
            if let Some(k) = workers {
                run.workers = k;
            }
            if let Some(m) = mode {
                run.mode = m;
            }
            if let Some(e) = epochs {
                run.epochs = e;
            }
            run.validate()?;
            println!(
                "training {} parameters for {} epochs on {} worker(s), {} mode",
                run.model.param_count(),
                run.epochs,
                run.workers,
                run.mode
            );
            let report = train(&run)?;
            for e in &report.epochs {
                println!(
                    "epoch {:>4}  step {:>6}  lr {:.6}  loss {:.6}  acc {:.4}",
                    e.epoch, e.step, e.lr, e.loss, e.accuracy
                );
            }
            println!("final train accuracy {:.4}", report.final_accuracy);
            println!(
                "checkpoint {} sha256 {}",
                report.checkpoint_dir.display(),
                report.checkpoint_hash
            );
        }
        Command::Eval {
            checkpoint,
            data,
            workers,
            mode,
        } => {
            let data = load_data(&data)?;
            let acc = evaluate(&checkpoint, &data, workers, mode)?;
            println!("top-1 accuracy {acc:.4} on {} samples", data.len());
        }
        Command::Itr(args) => {
            let cost = args.cost();
            let closed = closed_form_itr(args.strategy, &cost)?;
            let measured = measured_itr(&simulate_timeline(args.strategy, &cost)?)?;
            println!("closed form {closed}");
            if args.strategy == Strategy::Hsvit {
                println!("schedule form {}", itr_hsvit_schedule(&cost)?);
            }
            println!("simulated {measured}");
        }
        Command::Timeline { cost, out, width } => {
            let model = cost.cost();
            let timeline = simulate_timeline(cost.strategy, &model)?;
            fs::write(&out, timeline.to_csv()).with_context(|| format!("writing {}", out.display()))?;
            print!("{}", timeline.render_text(width));
            println!(
                "makespan {}  busy {}  idle {}  itr {}",
                timeline.makespan(),
                timeline.busy_time(),
                timeline.idle_time(),
                measured_itr(&timeline)?
            );
        }
        Command::Shapes {
            variant,
            input,
            classes,
        } => {
            if variant == Variant::Custom {
                bail!("shapes needs a preset variant: c2a2, c3a4 or c4a8");
            }
            let cfg = ModelConfig::preset(variant, input, classes)?;
            let ladder = cfg.shape_ladder()?;
            println!("{variant} @ {input}x{input}");
            for (b, (k, h, w)) in ladder.blocks.iter().enumerate() {
                println!("  CB{} {k} kernels, {h}x{w}", b + 1);
            }
            println!("  {} x MHSA, embedding {}", cfg.attn_depth, ladder.embedding_dim);
            println!(
                "  {} tokens in {} groups of {}",
                ladder.num_tokens, ladder.num_groups, ladder.tokens_per_group
            );
            println!("  {} parameters", cfg.param_count());
        }
        Command::GenData {
            classes,
            samples,
            size,
            seed,
            out,
        } => {
            let data = make_synthetic(classes, samples, size, seed)?;
            fs::create_dir_all(&out)?;
            write_idx(&data, &out.join("images.idx"), &out.join("labels.idx"))?;
            println!(
                "wrote {samples} {size}x{size} images in {classes} classes to {}",
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
