use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use udba::data::{phantom, save_volume, DatasetKind, Manifest, ManifestVolume, PhantomConfig};
use udba::harness::ablation::{run_grid, RESULTS_FILE};
use udba::harness::evaluate::{evaluate_checkpoint, write_volume_csv};
use udba::harness::overlay::render_overlays;
use udba::harness::train::{resume, train, CHECKPOINT_FILE};
use udba::harness::{Checkpoint, Dataset, DatasetSource, EvalSettings, ExperimentSpec, Metric, ResultsTable, SplitPart};
use udba::losses::{BaseLoss, Regularizer};
use udba::{Error, Result, Scalar};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_PARTIAL_GRID: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "udba", version, about = "Train, evaluate and ablate dual-decoder U-nets with bottleneck attention")]
struct Cli {
    /// Floating-point precision of the network.
    #[arg(long, value_enum, global = true, default_value_t = Precision::F64)]
    precision: Precision,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Full-size network, 200 epochs.
    Paper,
    /// Depth-2 network at 64x64 on the phantom.
    Desk,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one experiment.
    Train {
        #[command(flatten)]
        spec: SpecArgs,
        /// Run directory (default: runs/<label>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint; of the experiment flags only --epochs applies.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Output directory (default: the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write confidence and attention maps.
        #[arg(long)]
        dump_maps: bool,
    },
    /// Train and evaluate all twelve loss/attention combinations.
    Ablate {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write contour overlays of ground truth and prediction.
    RenderOverlays {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated volume ids.
        #[arg(long, value_delimiter = ',', required = true)]
        volumes: Vec<String>,
        /// Comma-separated slice indices (default: the middle slice).
        #[arg(long, value_delimiter = ',')]
        slices: Vec<usize>,
        /// Comma-separated organ names (default: all).
        #[arg(long, value_delimiter = ',')]
        organs: Vec<String>,
        #[arg(long, default_value = "overlays")]
        out: PathBuf,
    },
    /// Write synthetic phantom volumes and a manifest.
    MakePhantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        volumes: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        slices: usize,
        #[arg(long, default_value_t = 3)]
        organs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct SpecArgs {
    /// Experiment spec (TOML). Without it the preset applies.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Paper)]
    preset: Preset,
    /// "phantom", or the path of a dataset manifest.
    #[arg(long)]
    dataset: Option<String>,
    /// Dataset manifest (same as --dataset <path>).
    #[arg(long, conflicts_with = "dataset")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, conflicts_with = "no_udba")]
    udba: bool,
    #[arg(long)]
    no_udba: bool,
    #[arg(long)]
    base_loss: Option<BaseLoss>,
    #[arg(long)]
    regularizer: Option<Regularizer>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    window_low: Option<f64>,
    #[arg(long)]
    window_high: Option<f64>,
    #[arg(long)]
    input_size: Option<usize>,
}

impl SpecArgs {
    fn resolve(&self) -> Result<ExperimentSpec> {
        let mut spec = match (&self.config, self.preset) {
            (Some(path), _) => ExperimentSpec::load(path)?,
            (None, Preset::Paper) => ExperimentSpec::default(),
            (None, Preset::Desk) => ExperimentSpec::desk(),
        };
        let manifest = match (&self.dataset, &self.manifest) {
            (Some(d), _) if d.eq_ignore_ascii_case("phantom") => {
                if !matches!(spec.data.source, DatasetSource::Phantom { .. }) {
                    let config = PhantomConfig::default();
                    spec.network.num_classes = config.num_classes();
                    spec.data.source = DatasetSource::Phantom { config, seed: 0 };
                }
                None
            }
            (Some(d), _) => Some(PathBuf::from(d)),
            (None, m) => m.clone(),
        };
        if let Some(path) = manifest {
            let m = Manifest::load(&path)?;
            spec.network.num_classes = m.organs.iter().map(|o| o.label as usize).max().unwrap_or(0) + 1;
            spec.data.source = DatasetSource::Manifest { path };
        }
        if let Some(f) = self.folds {
            spec.data.folds = f;
        }
        if let Some(f) = self.fold {
            spec.data.fold = f;
        }
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        if let Some(e) = self.epochs {
            spec.epochs = e;
        }
        if self.udba {
            spec.loss.udba = true;
        }
        if self.no_udba {
            spec.loss.udba = false;
        }
        if let Some(b) = self.base_loss {
            spec.loss.base = b;
        }
        if let Some(r) = self.regularizer {
            spec.loss.regularizer = r;
        }
        if let Some(lr) = self.lr {
            spec.optimizer.lr = lr;
        }
        if let Some(v) = self.window_low {
            spec.data.window.low = v;
        }
        if let Some(v) = self.window_high {
            spec.data.window.high = v;
        }
        if let Some(s) = self.input_size {
            spec.network.input_size = s;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn run<T: Scalar>(command: Command) -> Result<u8> {
    match command {
        Command::Train { spec, out, resume: from } => {
            let summary = match from {
                Some(ck_path) => {
                    let out = out.unwrap_or_else(|| ck_path.parent().map(Path::to_path_buf).unwrap_or_default());
                    if let Some(e) = spec.epochs {
                        let mut ck = Checkpoint::<T>::load(&ck_path)?;
                        ck.spec.epochs = e;
                        create_dir(&out)?;
                        let patched = out.join(CHECKPOINT_FILE);
                        ck.save(&patched)?;
                        resume::<T>(&patched, &out)?
                    } else {
                        resume::<T>(&ck_path, &out)?
                    }
                }
                None => {
                    let spec = spec.resolve()?;
                    let out = out.unwrap_or_else(|| Path::new("runs").join(spec.loss.label()));
                    let s = train::<T>(&spec, &out)?;
                    println!("run directory: {}", out.display());
                    s
                }
            };
            println!("epochs completed: {}", summary.epochs);
            println!("steps: {}", summary.steps);
            if let Some(l) = summary.final_loss {
                println!("final loss: {l:.6e}");
            }
            if let Some(d) = summary.best_val_dice {
                println!("best validation dice: {d:.4}");
            }
            Ok(0)
        }
        Command::Evaluate { checkpoint, split, out, dump_maps } => {
            let part: SplitPart = split.parse()?;
            let ck = Checkpoint::<T>::load(&checkpoint)?;
            let out = out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
            create_dir(&out)?;
            let organs: Vec<String> = Dataset::open(&ck.spec)?.organs.iter().map(|o| o.name.clone()).collect();
            let maps = out.join("maps");
            let label = ck.spec.loss.label();
            let mut tables: Vec<ResultsTable> =
                [Metric::Dice, Metric::Iou, Metric::Asd].iter().map(|&m| ResultsTable::new(m, organs.clone())).collect();
            let (results, code) = match evaluate_checkpoint(&ck, part, dump_maps.then_some(maps.as_path())) {
                Ok(r) => {
                    for t in &mut tables {
                        t.push_results(&label, &r);
                    }
                    (r, 0)
                }
                Err(Error::EmptySplit(msg)) => {
                    eprintln!("udba: empty split: {msg}");
                    (Vec::new(), EXIT_RUNTIME)
                }
                Err(e) => return Err(e),
            };
            write_volume_csv(&results, &out.join(RESULTS_FILE))?;
            for t in &tables {
                let m = t.metric.name();
                t.write(&out.join(format!("results_{m}.csv")), &out.join(format!("results_{m}.txt")))?;
                print!("{}", t.to_text());
            }
            Ok(code)
        }
        Command::Ablate { spec, out, split } => {
            let part: SplitPart = split.parse()?;
            let spec = spec.resolve()?;
            let report = run_grid::<T>(&spec, &out, part)?;
            print!("{}", report.dice.to_text());
            for (label, msg) in report.failures() {
                eprintln!("udba: cell {label} failed: {msg}");
            }
            Ok(if report.is_complete() { 0 } else { EXIT_PARTIAL_GRID })
        }
        Command::RenderOverlays { checkpoint, volumes, slices, organs, out } => {
            let ck = Checkpoint::<T>::load(&checkpoint)?;
            let net = ck.network()?;
            let dataset = Dataset::open(&ck.spec)?;
            let known = dataset.organ_labels();
            let chosen: Vec<(u8, String)> = if organs.is_empty() {
                known
            } else {
                organs
                    .iter()
                    .map(|name| {
                        known
                            .iter()
                            .find(|(_, n)| n == name)
                            .cloned()
                            .ok_or_else(|| Error::Config(format!("unknown organ {name:?}")))
                    })
                    .collect::<Result<_>>()?
            };
            let settings = EvalSettings { udba: ck.spec.loss.udba, seed: ck.spec.seed, maps_dir: None };
            let mut count = 0;
            for id in &volumes {
                let vol = dataset.load::<T>(id)?;
                count += render_overlays(&net, &vol, &slices, &chosen, &settings, &out)?.len();
            }
            println!("wrote {count} overlays to {}", out.display());
            Ok(0)
        }
        Command::MakePhantom { out, volumes, size, slices, organs, seed } => {
            let cfg = PhantomConfig { num_volumes: volumes, size, slices, organs, ..PhantomConfig::default() };
            let cases = phantom::generate(seed, &cfg)?;
            create_dir(&out)?;
            let mut entries = Vec::with_capacity(cases.len());
            for c in &cases {
                let id = c.image.id.clone();
                let image = PathBuf::from(format!("{id}.nii.gz"));
                let label = PathBuf::from(format!("{id}_gt.nii.gz"));
                save_volume(&c.image, &out.join(&image))?;
                save_volume(&c.labels, &out.join(&label))?;
                entries.push(ManifestVolume { id, image, label, split: None });
            }
            let organs = DatasetKind::Phantom.default_organs().into_iter().take(organs).collect();
            let manifest = Manifest::new(DatasetKind::Phantom, organs, entries);
            let path = out.join("manifest.toml");
            manifest.save(&path)?;
            println!("wrote {} volumes and {}", cases.len(), path.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.precision {
        Precision::F32 => run::<f32>(cli.command),
        Precision::F64 => run::<f64>(cli.command),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("udba: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
