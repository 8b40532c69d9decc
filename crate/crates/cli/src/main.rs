use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use logonet::ablation::{paired_table, pretrain_effect, results_csv, results_table, run_ablation, Ablation};
use logonet::config::{RunConfig, Variant};
use logonet::io::write_file;
use logonet::perf::{REFERENCE_GFLOPS, REFERENCE_PARAMS_M};
use logonet::pipeline::{self, PretrainOptions, CONFIG_ECHO};
use logonet::Error;

#[derive(Parser, Debug)]
#[command(name = "logonet", version, about = "LoGoNet training, inference and cost analysis on volumetric data")]
struct Cli {
    /// TOML run configuration; defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every random stream derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (file for infer and analyze-flops).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model size: tiny, normal or large.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic phantom volumes and their labels.
    GenData {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Pseudo-labels, clusterer ensemble and masked pre-training.
    Pretrain {
        /// Directory of LGV1 volumes.
        #[arg(long)]
        data: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop once this many schedule steps are done.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Override `pretrain.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Supervised Dice+CE training of the segmentation model.
    Finetune {
        /// Directory of image/label LGV1 pairs.
        #[arg(long)]
        data: PathBuf,
        /// Pre-training checkpoint providing the backbone.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Override `finetune.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Argmax segmentation of one volume.
    Infer {
        /// Fine-tuned checkpoint; its directory's config.toml is used when --config is absent.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Per-layer parameter and FLOP report.
    AnalyzeFlops {
        /// Input shape `b,c,s,h,w`; defaults to one volume of the data extent.
        #[arg(long, value_delimiter = ',')]
        shape: Option<Vec<usize>>,
        #[arg(long)]
        csv: bool,
    },
    /// Phantom ablation study, or `pretrain_effect` for the paired table.
    Ablation {
        /// mask_onoff, clusterer_sweep, loss_weights, logo_vs_ulka or pretrain_effect.
        #[arg(long)]
        name: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1")]
        seeds: Vec<u64>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Argument(_) => 1,
        Error::Format(_) | Error::Io { .. } | Error::MissingParameters { .. } => 2,
        Error::Shape(_) | Error::Partition(_) => 3,
    }
}

fn read_config(path: &Path) -> logonet::Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_toml(&text)
}

fn resolve_config(cli: &Cli, fallback: Option<PathBuf>) -> logonet::Result<RunConfig> {
    let file = cli.config.clone().or(fallback.filter(|p| p.exists()));
    let mut cfg = match (&file, cli.variant) {
        (Some(p), _) => read_config(p)?,
        (None, Some(v)) => RunConfig::with_variant(v),
        (None, None) => RunConfig::default(),
    };
    if let Some(v) = cli.variant {
        cfg.model.variant = v;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> logonet::Result<PathBuf> {
    cli.out.clone().ok_or_else(|| Error::Argument("--out is required".into()))
}

fn run(cli: &Cli) -> logonet::Result<()> {
    match &cli.command {
        Command::GenData { count } => {
            let mut cfg = resolve_config(cli, None)?;
            if let Some(n) = count {
                cfg.data.count = *n;
            }
            cfg.validate()?;
            let files = pipeline::gen_data(&cfg, &out_dir(cli)?)?;
            println!("wrote {} files", files.len());
        }
        Command::Pretrain { data, resume, stop_after, steps } => {
            let mut cfg = resolve_config(cli, None)?;
            if let Some(n) = steps {
                cfg.pretrain.steps = *n;
            }
            let opts = PretrainOptions {
                resume: *resume,
                stop_after: *stop_after,
            };
            let r = pipeline::pretrain(&cfg, data, &out_dir(cli)?, &opts)?;
            if let (Some(a), Some(b)) = (r.losses.first(), r.losses.last()) {
                println!("steps {}..{}  loss {a:.5} -> {b:.5}  K = {:?}", r.first_step, r.first_step + r.losses.len(), r.ks);
            }
        }
        Command::Finetune { data, init, steps } => {
            let mut cfg = resolve_config(cli, None)?;
            if let Some(n) = steps {
                cfg.finetune.steps = *n;
            }
            let log = pipeline::finetune(&cfg, data, init.as_deref(), &out_dir(cli)?)?;
            for (step, d) in &log.evals {
                println!("step {step:>6}  Dice {d:.4}");
            }
        }
        Command::Infer { checkpoint, input } => {
            let echo = checkpoint.parent().map(|d| d.join(CONFIG_ECHO));
            let cfg = resolve_config(cli, echo)?;
            pipeline::infer(&cfg, checkpoint, input, &out_dir(cli)?)?;
        }
        Command::AnalyzeFlops { shape, csv } => {
            let cfg = resolve_config(cli, None)?;
            cfg.logonet().validate()?;
            let e = cfg.data.extent;
            let input = match shape.as_deref() {
                Some(&[b, c, s, h, w]) => [b, c, s, h, w],
                Some(other) => return Err(Error::Argument(format!("--shape needs 5 values, got {}", other.len()))),
                None => [1, 1, e, e, e],
            };
            let report = pipeline::analyze(&cfg, input)?;
            let text = if *csv {
                report.to_csv()
            } else {
                report.to_text(Some((REFERENCE_GFLOPS, REFERENCE_PARAMS_M)))
            };
            match &cli.out {
                Some(p) => write_file(p, text.as_bytes())?,
                None => print!("{text}"),
            }
        }
        Command::Ablation { name, seeds } => {
            let cfg = resolve_config(cli, None)?;
            cfg.validate()?;
            let (csv, table) = if name == "pretrain_effect" {
                let rows = pretrain_effect(&cfg, seeds)?;
                let target = cfg.finetune.target_dice.unwrap_or_default();
                let csv = rows
                    .iter()
                    .map(|r| {
                        let s = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
                        format!("{},{},{},{:.6},{:.6}\n", r.seed, s(r.scratch_steps), s(r.pretrained_steps), r.scratch_dice, r.pretrained_dice)
                    })
                    .collect::<String>();
                (format!("seed,scratch_steps,pretrained_steps,scratch_dice,pretrained_dice\n{csv}"), paired_table(&rows, target))
            } else {
                let results = run_ablation(name.parse::<Ablation>()?, &cfg, seeds)?;
                (results_csv(&results), results_table(&results))
            };
            print!("{table}");
            if let Some(dir) = &cli.out {
                write_file(&dir.join(format!("{name}.csv")), csv.as_bytes())?;
                write_file(&dir.join(format!("{name}.txt")), table.as_bytes())?;
                pipeline::write_config_echo(&cfg, dir)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
