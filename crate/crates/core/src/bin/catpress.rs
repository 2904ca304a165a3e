use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use catpress::arch::{BlockKind, GeneratorArch, NormKind, Shape, TemplateOptions};
use catpress::checkpoint::{self, Checkpoint};
use catpress::config::{KdMode, PairedMode, RunConfig};
use catpress::gan::{evaluate, train_student, train_teacher};
use catpress::macs::{arch_macs, parse_mac_count};
use catpress::prune::{prune, PruneBudget};
use catpress::verify::run_suite;
use catpress::Error;

#[derive(Parser)]
#[command(name = "catpress", version, about = "Train, prune and distill image-to-image generators")]
struct Cli {
    /// Run configuration JSON. Command-line flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Architecture files.
    #[command(subcommand)]
    Arch(ArchCommand),
    /// Analytic multiply-accumulate count of an architecture.
    Macs {
        #[arg(long)]
        arch: PathBuf,
        /// Input shape as CxHxW.
        #[arg(long)]
        input: Shape,
        #[arg(long)]
        json: bool,
    },
    /// Train a teacher generator and its discriminator.
    TrainTeacher {
        #[arg(long)]
        arch: PathBuf,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive a student architecture meeting a MAC budget.
    Prune(PruneArgs),
    /// Train a pruned student against a trained teacher.
    TrainStudent(StudentArgs),
    /// Validation metrics of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Seed of the validation split.
        #[arg(long)]
        seed: Option<u64>,
        /// Require the checkpoint to match this architecture's structure.
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Cross-check analytic and searched results against brute-force oracles.
    Verify {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum ArchCommand {
    /// Write a ResNet-style generator template.
    New {
        #[arg(long, value_enum)]
        template: Template,
        #[arg(long)]
        base_channels: usize,
        #[arg(long)]
        blocks: usize,
        #[arg(long, default_value_t = 3)]
        in_channels: usize,
        #[arg(long, default_value_t = 3)]
        out_channels: usize,
        #[arg(long, default_value_t = 256)]
        image_size: usize,
        #[arg(long, value_enum, default_value_t = Norm::Instance)]
        norm: Norm,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Template {
    PlainResnet,
    IncresResnet,
}

#[derive(Clone, Copy, ValueEnum)]
enum Norm {
    Instance,
    Batch,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kd {
    Ka,
    Mse,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum Paired {
    Dataset,
    Teacher,
}

#[derive(Args)]
struct RunFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct PruneArgs {
    /// Teacher checkpoint directory.
    #[arg(long, conflicts_with = "arch", required_unless_present = "arch")]
    teacher: Option<PathBuf>,
    /// Architecture file to prune directly, using its stored scales.
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Budget in MACs; accepts k, M and G suffixes.
    #[arg(long, value_parser = mac_count)]
    budget_macs: Option<u64>,
    #[arg(long)]
    floor: Option<usize>,
    /// Input shape as CxHxW. Defaults to the architecture's.
    #[arg(long)]
    input: Option<Shape>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct StudentArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    student_arch: PathBuf,
    #[arg(long, value_enum)]
    kd: Option<Kd>,
    #[arg(long)]
    lambda_adv: Option<f64>,
    #[arg(long)]
    lambda_recon: Option<f64>,
    #[arg(long)]
    lambda_dist: Option<f64>,
    #[arg(long, value_enum)]
    paired: Option<Paired>,
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    out: PathBuf,
}

fn mac_count(s: &str) -> Result<u64, String> {
    parse_mac_count(s).map_err(|e| e.to_string())
}

/// Process exit statuses.
const EXIT_USAGE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::BudgetInfeasible { .. } => EXIT_INFEASIBLE,
        Error::Divergence(_) => EXIT_DIVERGED,
        Error::Io(_) => EXIT_USAGE,
        _ => EXIT_INVALID,
    }
}

fn base_config(path: Option<&Path>) -> catpress::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn apply_run_flags(cfg: &mut RunConfig, run: &RunFlags) {
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(e) = run.epochs {
        cfg.epochs = e;
    }
}

fn read_arch(path: &Path) -> catpress::Result<GeneratorArch> {
    GeneratorArch::from_json(&fs::read_to_string(path)?)
}

fn write_out(path: &Path, text: &str) -> catpress::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> catpress::Result<u8> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Arch(ArchCommand::New {
            template,
            base_channels,
            blocks,
            in_channels,
            out_channels,
            image_size,
            norm,
            out,
        }) => {
            let kind = match template {
                Template::PlainResnet => BlockKind::Plain,
                Template::IncresResnet => BlockKind::IncRes,
            };
            let norm = match norm {
                Norm::Instance => NormKind::Instance,
                Norm::Batch => NormKind::Batch,
            };
            let arch = TemplateOptions::new(base_channels, blocks, in_channels, out_channels, kind)
                .with_norm(norm)
                .with_size(image_size, image_size)
                .build()?;
            write_out(&out, &arch.to_json())?;
        }
        Command::Macs { arch, input, json } => {
            let cost = arch_macs(&read_arch(&arch)?, input)?;
            if json {
                print!("{}", cost.to_json());
            } else {
                let width = cost.layers.iter().map(|l| l.id.len()).max().unwrap_or(0);
                for l in &cost.layers {
                    println!("{:width$}  {}", l.id, l.macs);
                }
                println!("total  {}", cost.total);
            }
        }
        Command::TrainTeacher { arch, run, out } => {
            let mut cfg = base_config(config)?;
            apply_run_flags(&mut cfg, &run);
            cfg.validate()?;
            let arch = read_arch(&arch)?;
            let (model, report) = train_teacher(&arch, &cfg)?;
            checkpoint::save(&out, &model, Some(&report), Some(&cfg))?;
            print!("{}", report.to_json());
        }
        Command::Prune(args) => {
            let cfg = base_config(config)?;
            let arch = match (&args.teacher, &args.arch) {
                (Some(dir), _) => checkpoint::load(dir)?.model.arch,
                (None, Some(path)) => read_arch(path)?,
                (None, None) => unreachable!("clap requires one source"),
            };
            let target = args
                .budget_macs
                .or(cfg.budget_macs)
                .ok_or_else(|| Error::InvalidArgument("a budget is required (--budget-macs)".into()))?;
            let input = args.input.unwrap_or_else(|| arch.input());
            let budget = PruneBudget::new(target, args.floor.unwrap_or(cfg.floor), input)?;
            let start = Instant::now();
            let result = prune(&arch, &budget)?;
            let report = result.report(start.elapsed().as_millis() as u64);
            if report.vacuous {
                eprintln!("note: the unpruned model already meets the budget; nothing was pruned");
            }
            write_out(&args.out, &result.arch.to_json())?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            if let Some(path) = &args.report {
                write_out(path, &text)?;
            }
            print!("{text}");
        }
        Command::TrainStudent(args) => {
            let mut cfg = base_config(config)?;
            apply_run_flags(&mut cfg, &args.run);
            if let Some(kd) = args.kd {
                cfg.kd = match kd {
                    Kd::Ka => KdMode::Ka,
                    Kd::Mse => KdMode::Mse,
                    Kd::None => KdMode::None,
                };
            }
            if let Some(p) = args.paired {
                cfg.paired = match p {
                    Paired::Dataset => PairedMode::Dataset,
                    Paired::Teacher => PairedMode::Teacher,
                };
            }
            for (flag, field) in [
                (args.lambda_adv, &mut cfg.lambda_adv),
                (args.lambda_recon, &mut cfg.lambda_recon),
                (args.lambda_dist, &mut cfg.lambda_dist),
            ] {
                if let Some(v) = flag {
                    *field = v;
                }
            }
            cfg.validate()?;
            let teacher = checkpoint::load(&args.teacher)?;
            let student = read_arch(&args.student_arch)?;
            let (model, report) = train_student(&teacher.model, &student, &cfg)?;
            checkpoint::save(&args.out, &model, Some(&report), Some(&cfg))?;
            print!("{}", report.to_json());
        }
        Command::Eval { ckpt, seed, arch, json } => {
            let Checkpoint { model, config: saved, .. } = match arch {
                Some(path) => checkpoint::load_for(&ckpt, &read_arch(&path)?)?,
                None => checkpoint::load(&ckpt)?,
            };
            let mut cfg = match (config, saved) {
                (Some(p), _) => RunConfig::load(p)?,
                (None, Some(c)) => c,
                (None, None) => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.task_seed = s;
            }
            cfg.image_size = model.arch.input().h;
            let metrics = evaluate(&model.arch, &model.gen, &cfg.task().val())?;
            if json {
                println!("{}", serde_json::to_string(&metrics).expect("metrics serialize"));
            } else {
                println!("l1    {:.6}", metrics.l1);
                println!("psnr  {:.3}", metrics.psnr);
            }
        }
        Command::Verify { json } => {
            let report = run_suite();
            if json {
                print!("{}", report.to_json());
            } else {
                for c in &report.checks {
                    let status = if c.failures == 0 { "ok" } else { "FAILED" };
                    println!("{:20} {:4} cases  {:3} failures  {status}", c.name, c.cases, c.failures);
                }
            }
            if !report.ok {
                return Ok(EXIT_INVALID);
            }
        }
    }
    Ok(0)
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("CATPRESS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("CATPRESS_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
