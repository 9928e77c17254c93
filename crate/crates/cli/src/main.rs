use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hsi_peft::adapters::{AdapterSpec, Method};
use hsi_peft::checkpoint::Checkpoint;
use hsi_peft::config::{DataSource, RunConfig};
use hsi_peft::harness::{
    classification_map, eval_checkpoint, fuse_checkpoint, model_from_checkpoint, prepare, render_ppm, run_train,
    sweep_csv, sweep_lambda, write_synth, CountReport,
};
use hsi_peft::model::ModelConfig;
use hsi_peft::presets::Dataset;
use hsi_peft::{Error, Result};

#[derive(Parser)]
#[command(name = "hsi-peft", version, about = "Parameter-efficient fine-tuning for hyperspectral classification")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene as a .hsic/.hsgt pair.
    Synth {
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        bands: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        noise_std: Option<f64>,
        /// File stem inside the output directory.
        #[arg(long, default_value = "synth")]
        name: String,
    },
    /// Train and write the log, checkpoints and report.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Merge adapters into the backbone and write a full-model file.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `fused.peft` in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Trainable parameters and adapter storage.
    CountParams {
        #[arg(long)]
        method: Option<Method>,
        /// Class count; defaults to the dataset's, else 9.
        #[arg(long)]
        classes: Option<usize>,
        /// Dataset whose tuned adapter shape to use.
        #[arg(long)]
        dataset: Option<Dataset>,
        /// Model preset when no config is given.
        #[arg(long, default_value = "base")]
        model: String,
    },
    /// One training run per λ; writes lambda_sweep.csv.
    SweepLambda {
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
    },
    /// Render predicted classes of every labeled pixel as a PPM image.
    Map {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Synth {
            height,
            width,
            bands,
            classes,
            noise_std,
            name,
        } => {
            let DataSource::Synth(s) = &mut cfg.data else {
                return Err(Error::Config("config reads data from files; nothing to synthesize".into()));
            };
            s.height = height.unwrap_or(s.height);
            s.width = width.unwrap_or(s.width);
            s.bands = bands.unwrap_or(s.bands);
            s.classes = classes.unwrap_or(s.classes);
            s.noise_std = noise_std.unwrap_or(s.noise_std);
            if let Some(seed) = cli.global.seed {
                s.seed = seed;
            }
            if s.classes == 0 || s.classes > 64 {
                return Err(Error::Config(format!("--classes must be in 1..=64, got {}", s.classes)));
            }
            if s.bands < 12 {
                log::warn!("{} bands is fewer than the 12 PCA components training needs", s.bands);
            }
            let (c, l) = write_synth(&cfg, &cfg.out_dir, &name)?;
            println!("wrote {} and {}", c.display(), l.display());
        }
        Command::Train => {
            let result = run_train(&cfg)?;
            print!("{}", result.report());
            println!("artifacts in {}", cfg.out_dir.display());
        }
        Command::Eval { checkpoint } => {
            let report = eval_checkpoint(&cfg, &Checkpoint::load(&checkpoint)?)?;
            print!("{}\n{}", report.table(), report.key_values());
            write(&cfg.out_dir.join("eval.txt"), report.key_values())?;
        }
        Command::Fuse { checkpoint, output } => {
            let fused = fuse_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let path = output.unwrap_or_else(|| cfg.out_dir.join("fused.peft"));
            write(&path, fused.to_bytes())?;
            println!("wrote {}", path.display());
        }
        Command::CountParams {
            method,
            classes,
            dataset,
            model,
        } => {
            let dataset = dataset.or(cfg.dataset);
            let k = classes
                .or(dataset.map(Dataset::n_classes))
                .unwrap_or(9);
            let (config, spec) = if cli.global.config.is_some() {
                let mut spec = cfg.adapter.clone();
                if let Some(m) = method {
                    spec.method = m;
                }
                (cfg.model_config(k)?, spec)
            } else {
                let m = method.unwrap_or(Method::Lora);
                let spec = match dataset {
                    Some(d) => d.adapter_spec(m),
                    None => AdapterSpec {
                        krona_shape: Some((384, 2)),
                        ..AdapterSpec::new(m)
                    },
                };
                (ModelConfig::preset(&model, k)?, spec)
            };
            print!("{}", CountReport::new(&config, &spec)?.render());
        }
        Command::SweepLambda { lambdas } => {
            let rows = sweep_lambda(&cfg, &lambdas)?;
            let csv = sweep_csv(&rows);
            print!("{csv}");
            write(&cfg.out_dir.join("lambda_sweep.csv"), csv)?;
        }
        Command::Map { checkpoint } => {
            let data = prepare(&cfg)?;
            let model = model_from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let map = classification_map(&model, &data, cfg.train.batch_size)?;
            let cube = &data.source.cube;
            let path = cfg.out_dir.join("map.ppm");
            write(&path, render_ppm(&map, cube.height, cube.width, data.n_classes))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
