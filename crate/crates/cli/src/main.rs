use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use sotrack::dataset::{generate_synthetic, load_dataset, save_dataset, scale_sequence, Sequence, SynthSpec};
use sotrack::eval::ablation::{desk_config, run_ablation, variant_grid, write_ablation_csv};
use sotrack::eval::{overall, read_frame_csv, track_all, write_frame_csv, write_summary_csv, ModelTracker};
use sotrack::training::{load_model, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "sotrack", version, about = "Small-object LiDAR single-object tracking")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark.
    Gen {
        #[arg(long)]
        seed: u64,
        /// JSON generator spec (numSequences, framesPerSeq, targetKind, clutterCount, pointDensity).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shrink every target's points toward its box center.
    Scale {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; the loss log goes next to the checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON training config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `--out` if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// One-pass tracking of every sequence with a trained checkpoint.
    Track {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-frame CSV; a per-sequence summary is written beside it.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Success and Precision of a per-frame report.
    Eval {
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate every on/off combination of the named modules.
    Ablate {
        /// Comma-separated subset of tapm, vit, shuffle, rgs.
        #[arg(long)]
        variants: String,
        /// Directory holding `train/` and `test/` datasets.
        #[arg(long)]
        data: PathBuf,
        /// Base training config; defaults to the desk-scale config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Results CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e
                .chain()
                .find_map(|c| {
                    c.downcast_ref::<sotrack::Error>()
                        .map(sotrack::Error::category)
                        .or_else(|| c.downcast_ref::<io::Error>().map(|_| "io"))
                })
                .unwrap_or("error");
            eprintln!("error [{category}]: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes)
        .map_err(sotrack::Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

fn load(dir: &Path) -> Result<Vec<Sequence>> {
    let seqs = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if seqs.is_empty() {
        bail!(sotrack::Error::InvalidArgument(format!("no sequences in {}", dir.display())));
    }
    Ok(seqs)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { seed, spec, out } => {
            let spec: SynthSpec = read_json(&spec)?;
            let seqs = generate_synthetic(seed, &spec)?;
            save_dataset(&out, &seqs)?;
            println!("wrote {} sequences to {}", seqs.len(), out.display());
        }
        Command::Scale { input, rate, out } => {
            let seqs = load(&input)?;
            let scaled = seqs.iter().map(|s| scale_sequence(s, rate)).collect::<sotrack::Result<Vec<_>>>()?;
            save_dataset(&out, &scaled)?;
            println!("scaled {} sequences by {rate} into {}", scaled.len(), out.display());
        }
        Command::Train { data, config, out, resume } => {
            let seqs = load(&data)?;
            let cfg: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::default(),
            };
            let mut t = if resume && out.exists() {
                let mut t = Trainer::load(&out)?;
                t.cfg.steps = cfg.steps;
                t
            } else {
                Trainer::new(cfg)?
            };
            let log = sibling(&out, ".loss.csv");
            t.run(&seqs, &out, &log)?;
            println!("trained {} steps; checkpoint {}, log {}", t.step, out.display(), log.display());
        }
        Command::Track { ckpt, data, report, seed } => {
            let (model, store, cfg) = load_model(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let seqs = load(&data)?;
            let tracker = ModelTracker { model: &model, store: &store };
            let reports = track_all(&tracker, &seqs, &cfg.sample, seed)?;
            write_frame_csv(&reports, BufWriter::new(File::create(&report)?))?;
            write_summary_csv(&reports, BufWriter::new(File::create(sibling(&report, ".summary.csv"))?))?;
            let (s, p) = overall(&reports)?;
            println!("Success {s:.2}  Precision {p:.2}");
        }
        Command::Eval { report } => {
            let f = File::open(&report).with_context(|| format!("opening {}", report.display()))?;
            let (s, p) = overall(&read_frame_csv(f)?)?;
            println!("Success {s:.2}  Precision {p:.2}");
        }
        Command::Ablate { variants, data, config, seeds, out } => {
            let grid = variant_grid(&variants)?;
            let base = match config {
                Some(p) => read_json(&p)?,
                None => desk_config(),
            };
            let train = load(&data.join("train"))?;
            let test = load(&data.join("test"))?;
            let rows = run_ablation(&train, &test, &base, &grid, &seeds)?;
            match out {
                Some(p) => write_ablation_csv(&rows, BufWriter::new(File::create(p)?))?,
                None => write_ablation_csv(&rows, io::stdout().lock())?,
            }
            io::stdout().flush()?;
        }
    }
    Ok(())
}
