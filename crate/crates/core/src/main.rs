use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use diffusion_tad::ablate::{run_study, Study};
use diffusion_tad::config::RunConfig;
use diffusion_tad::data::{generate_synthetic, read_annotations, write_atomic, write_dataset, Dataset, ANNOTATION_FILE};
use diffusion_tad::eval::{activitynet_grid, evaluate, format_metrics, format_report, normalize, THUMOS_GRID};
use diffusion_tad::pipeline::{sample_dataset, to_records, train_model};
use diffusion_tad::sampler::{read_prediction_header, read_predictions, write_predictions};
use diffusion_tad::{checkpoint, Error, Result};

#[derive(Parser)]
#[command(name = "diffusion-tad", version, about = "Temporal action detection by denoising diffusion over proposals")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    MakeSynth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines metrics log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Override the number of optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Denoise random proposals for every video of a dataset.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        proposals: Option<usize>,
        /// Disable selective conditioning.
        #[arg(long)]
        no_sc: bool,
        /// Disable iterative denoising.
        #[arg(long)]
        no_id: bool,
        #[arg(long, allow_negative_numbers = true)]
        gamma: Option<f64>,
        /// Per-class NMS IoU threshold.
        #[arg(long)]
        nms: Option<f64>,
    },
    /// Score a prediction file against a dataset's annotations.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Human-readable report; printed when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `key = value` metrics file.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Grid::Thumos)]
        grid: Grid,
    },
    /// Run one ablation sweep and write its table.
    Ablate {
        #[arg(value_enum)]
        study: Study,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trained model for the inference-only studies.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sampling seeds averaged per cell.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        train_steps: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    Thumos,
    Activitynet,
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Loads a dataset and makes the model section match its feature width.
fn load_data(cfg: &mut RunConfig, dir: &Path) -> Result<Dataset> {
    let data = Dataset::load(dir, cfg.model.num_classes)?;
    let width = data
        .videos
        .first()
        .map(|v| v.rgb.snippets.ncols())
        .ok_or_else(|| Error::InvalidArgument(format!("{}: dataset has no videos", dir.display())))?;
    cfg.fit_model_to_data(width, cfg.model.num_classes);
    cfg.validate()?;
    Ok(data)
}

/// Files a command has created; removed unless the command succeeds.
#[derive(Default)]
struct Outputs(Vec<PathBuf>);

impl Outputs {
    fn add(&mut self, p: &Path) -> PathBuf {
        self.0.push(p.to_path_buf());
        p.to_path_buf()
    }

    fn discard(&self) {
        for p in &self.0 {
            let _ = fs::remove_file(p);
        }
    }
}

fn run(cli: Cli, outputs: &mut Outputs) -> Result<()> {
    let mut cfg = base_config(&cli.common)?;
    match cli.command {
        Command::MakeSynth { out } => {
            let ds = generate_synthetic(&cfg.synth, cfg.seed)?;
            fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
            write_atomic(&outputs.add(&out.join("config.toml")), cfg.to_toml().as_bytes())?;
            write_dataset(&ds, &out)
        }
        Command::Train { data, out, log, steps } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let ds = load_data(&mut cfg, &data)?;
            let mut log_file = match &log {
                Some(p) => Some(fs::File::create(outputs.add(p)).map_err(|e| io_error(p, e))?),
                None => None,
            };
            let every = cfg.train.checkpoint_every;
            let (model, _) = train_model(&cfg, &ds, |m, model| {
                if let (Some(f), Some(p)) = (log_file.as_mut(), &log) {
                    let line = serde_json::to_string(m).expect("metrics serialize");
                    writeln!(f, "{line}").map_err(|e| io_error(p, e))?;
                }
                if every > 0 && m.step % every == 0 && m.step < cfg.train.steps {
                    let p = outputs.add(&out.with_extension(format!("step{}.ckpt", m.step)));
                    checkpoint::save(&p, &cfg, model)?;
                }
                Ok(())
            })?;
            checkpoint::save(&outputs.add(&out), &cfg, &model)
        }
        Command::Sample {
            checkpoint: ckpt,
            data,
            out,
            steps,
            proposals,
            no_sc,
            no_id,
            gamma,
            nms,
        } => {
            let (mut run_cfg, model) = checkpoint::load(&ckpt)?;
            if cli.common.config.is_some() {
                run_cfg.sample = cfg.sample;
            }
            if let Some(s) = cli.common.seed {
                run_cfg.seed = s;
            }
            let opts = &mut run_cfg.sample;
            opts.steps = steps.unwrap_or(opts.steps);
            opts.proposals = proposals.unwrap_or(opts.proposals);
            opts.gamma = gamma.unwrap_or(opts.gamma);
            opts.selective &= !no_sc;
            opts.iterative &= !no_id;
            if nms.is_some() {
                opts.nms = nms;
            }
            run_cfg.validate()?;
            let ds = Dataset::load(&data, run_cfg.model.num_classes)?;
            let dets = sample_dataset(&model, &run_cfg, &run_cfg.sample, &ds, run_cfg.seed)?;
            write_predictions(&outputs.add(&out), &to_records(&ds, &dets), &run_cfg.to_toml())
        }
        Command::Eval {
            predictions,
            data,
            out,
            metrics,
            grid,
        } => {
            if cli.common.config.is_none() {
                if let Some(echo) = read_prediction_header(&predictions)? {
                    cfg = echo;
                    if let Some(s) = cli.common.seed {
                        cfg.seed = s;
                    }
                }
            }
            let records = read_predictions(&predictions)?;
            let annotations = read_annotations(&data.join(ANNOTATION_FILE))?;
            for a in &annotations {
                a.validate(cfg.model.num_classes)?;
            }
            let thresholds = match grid {
                Grid::Thumos => THUMOS_GRID.to_vec(),
                Grid::Activitynet => activitynet_grid(),
            };
            let (preds, gts) = normalize(&records, &annotations)?;
            if let Some(bad) = preds.iter().find(|p| p.class >= cfg.model.num_classes) {
                return Err(Error::InvalidArgument(format!("prediction class {} outside {} classes", bad.class, cfg.model.num_classes)));
            }
            let report = evaluate(&preds, &gts, cfg.model.num_classes, &thresholds, annotations.len())?;
            let echo: String = cfg.to_toml().lines().map(|l| format!("# {l}\n")).collect();
            let text = format!("{echo}{}", format_report(&report));
            match &out {
                Some(p) => write_atomic(&outputs.add(p), text.as_bytes())?,
                None => print!("{text}"),
            }
            if let Some(p) = &metrics {
                write_atomic(&outputs.add(p), format!("{echo}{}", format_metrics(&report)).as_bytes())?;
            }
            Ok(())
        }
        Command::Ablate {
            study,
            data,
            out,
            checkpoint: ckpt,
            seeds,
            train_steps,
        } => {
            let model = match &ckpt {
                Some(p) => {
                    let (c, m) = checkpoint::load(p)?;
                    let sample = cfg.sample.clone();
                    cfg = RunConfig { sample, ..c };
                    if let Some(s) = cli.common.seed {
                        cfg.seed = s;
                    }
                    Some(m)
                }
                None => None,
            };
            if let Some(s) = train_steps {
                cfg.train.steps = s;
            }
            let ds = load_data(&mut cfg, &data)?;
            let seeds: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();
            let table = run_study(study, &cfg, &ds, model.as_ref(), &seeds)?;
            let echo: String = cfg.to_toml().lines().map(|l| format!("# {l}\n")).collect();
            write_atomic(&outputs.add(&out), format!("{echo}{}", table.to_tsv()).as_bytes())
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut outputs = Outputs::default();
    match run(cli, &mut outputs) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            outputs.discard();
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
