use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use pdpha_cli::{bench, run_method, write_settings_csv, Method, ModelCache, Reference, RunOptions, Setting};
use pdpha_core::instances::{generate_many, load_instances, save_instances, Distribution, GeneratorConfig};
use pdpha_core::model::PolicyModel;
use pdpha_core::training::{train_to_files, TrainConfig};

#[derive(Parser)]
#[command(name = "pdpha", version, about = "Heterogeneous-attention policies for the pickup-and-delivery problem")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Dist {
    Uniform,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Greedy,
    Sample,
}

#[derive(clap::Args)]
struct Exec {
    /// Worker threads (1 gives bit-reproducible output).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Encoder batch size for the neural methods.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, env = "PDPHA_SEED", default_value_t = 0)]
    seed: u64,
    /// Report every time as zero.
    #[arg(long)]
    no_timing: bool,
}

impl Exec {
    fn options(&self) -> RunOptions {
        RunOptions {
            jobs: self.jobs,
            batch: self.batch,
            seed: self.seed,
            timing: !self.no_timing,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write random instances as JSON lines.
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, value_enum, default_value = "uniform")]
        dist: Dist,
        /// Standard deviation of the Gaussian distribution.
        #[arg(long, required_if_eq("dist", "gaussian"))]
        sdv: Option<f64>,
        #[arg(long, env = "PDPHA_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy; writes the checkpoint and a per-epoch CSV log.
    Train {
        /// JSON training configuration; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the checkpoint path with a `.csv` extension.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides the seed of the configuration.
        #[arg(long, env = "PDPHA_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        no_timing: bool,
    },
    /// Decode routes with a trained policy; writes one JSON route per line.
    Solve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: Mode,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        exec: Exec,
    },
    /// Compare methods on an instance file.
    Bench {
        #[arg(long)]
        instances: PathBuf,
        /// Comma-separated: dp, bf, sa, nn, greedy:CKPT, sampleN:CKPT.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<Method>,
        /// Method label or `best`; defaults to dp when n <= 10, otherwise best.
        #[arg(long = "ref")]
        reference: Option<Reference>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        exec: Exec,
    },
    /// Evaluate a checkpoint on other sizes and distributions.
    Generalize {
        #[arg(long)]
        ckpt: PathBuf,
        /// Expected training size recorded in the checkpoint.
        #[arg(long)]
        train_n: Option<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        eval_n: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "uniform")]
        dist: Vec<Dist>,
        #[arg(long, value_delimiter = ',', default_value = "0.6,0.8,1.0")]
        sdv: Vec<f64>,
        /// Bare greedy/sampleN tokens use --ckpt.
        #[arg(long, value_delimiter = ',', default_value = "greedy")]
        methods: Vec<Method>,
        #[arg(long = "ref")]
        reference: Option<Reference>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        exec: Exec,
    },
}

fn usage_error(msg: String) -> ! {
    Cli::command().error(ErrorKind::ValueValidation, msg).exit()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn default_reference(n: usize) -> Reference {
    if n <= pdpha_core::baselines::EXACT_DP_MAX_N {
        Reference::Method(Method::Dp)
    } else {
        Reference::Best
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { n, count, dist, sdv, seed, out } => {
            let distribution = match dist {
                Dist::Uniform => Distribution::Uniform,
                Dist::Gaussian => Distribution::Gaussian { sdv: sdv.expect("required by clap") },
            };
            let instances = generate_many(&GeneratorConfig { n, distribution, seed }, count)?;
            save_instances(&instances, &out)?;
            println!("wrote {count} instances to {}", out.display());
        }
        Command::Train {
            config,
            out,
            log,
            seed,
            no_timing,
        } => {
            let mut cfg: TrainConfig = match &config {
                Some(p) => serde_json::from_reader(File::open(p).with_context(|| format!("opening {}", p.display()))?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let log = log.unwrap_or_else(|| out.with_extension("csv"));
            let (model, report) = train_to_files(cfg, &out, &log, !no_timing)?;
            println!(
                "trained {} epochs ({} parameters, {} baseline replacements); initial greedy objective {:.4}, final {:.4}",
                report.epochs.len(),
                model.num_parameters(),
                report.replacements(),
                report.initial_greedy_obj,
                report.epochs.last().map_or(report.initial_greedy_obj, |e| e.mean_greedy_obj)
            );
        }
        Command::Solve {
            ckpt,
            instances,
            mode,
            samples,
            out,
            exec,
        } => {
            if samples == 0 {
                usage_error("--samples must be at least 1".into());
            }
            let insts = load_instances(&instances)?;
            let method = match mode {
                Mode::Greedy => Method::Greedy(Some(ckpt)),
                Mode::Sample => Method::Sample(samples, Some(ckpt)),
            };
            let run = run_method(&method, &insts, &exec.options(), &mut ModelCache::default())?;
            let mut w = create(&out)?;
            for r in &run.routes {
                serde_json::to_writer(&mut w, r)?;
                writeln!(w)?;
            }
            w.flush()?;
            let infeasible = run.routes.iter().filter(|r| !r.feasible).count();
            println!("solved {} instances with {}; {infeasible} infeasible", run.routes.len(), run.label);
        }
        Command::Bench {
            instances,
            methods,
            reference,
            out,
            exec,
        } => {
            if methods.is_empty() {
                usage_error("--methods needs at least one method".into());
            }
            if let Some(m) = methods.iter().find(|m| m.is_neural() && m.checkpoint().is_none()) {
                usage_error(format!("method `{m}` needs a checkpoint in bench (use `{m}:PATH`)"));
            }
            let insts = load_instances(&instances)?;
            let n = insts.iter().map(|i| i.n()).max().unwrap_or(0);
            let reference = reference.unwrap_or_else(|| default_reference(n));
            let (report, _) = bench(&insts, &methods, &reference, &exec.options())?;
            print!("{}", report.table());
            if let Some(out) = out {
                let mut w = create(&out)?;
                report.write_csv(&mut w)?;
                w.flush()?;
            }
        }
        Command::Generalize {
            ckpt,
            train_n,
            eval_n,
            count,
            dist,
            sdv,
            methods,
            reference,
            out,
            exec,
        } => {
            let (_, recorded) = PolicyModel::load(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            if let Some(expected) = train_n {
                match recorded {
                    Some(n) if n != expected => bail!("checkpoint was trained on n = {n}, not --train-n {expected}"),
                    None => bail!("checkpoint does not record its training size"),
                    _ => {}
                }
            }
            let methods: Vec<Method> = methods.into_iter().map(|m| m.with_default_checkpoint(&ckpt)).collect();
            let mut settings = Vec::new();
            for &n in &eval_n {
                for d in &dist {
                    match d {
                        Dist::Uniform => settings.push(Setting { n, sdv: None }),
                        Dist::Gaussian => settings.extend(sdv.iter().map(|&s| Setting { n, sdv: Some(s) })),
                    }
                }
            }
            let opts = exec.options();
            let mut blocks = Vec::new();
            for setting in settings {
                let distribution = setting.sdv.map_or(Distribution::Uniform, |sdv| Distribution::Gaussian { sdv });
                let insts = generate_many(
                    &GeneratorConfig {
                        n: setting.n,
                        distribution,
                        seed: opts.seed,
                    },
                    count,
                )?;
                let r = reference.clone().unwrap_or_else(|| default_reference(setting.n));
                let (report, _) = bench(&insts, &methods, &r, &opts)?;
                println!("{setting}");
                print!("{}", report.table());
                blocks.push((setting, report));
            }
            if let Some(out) = out {
                let mut w = create(&out)?;
                write_settings_csv(&mut w, &blocks)?;
                w.flush()?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
