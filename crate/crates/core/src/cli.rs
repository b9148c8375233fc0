//! `pie train` and `pie eval`. Diagnostics go to stderr, results to stdout
//! as a single JSON object.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::config::TrainConfig;
use crate::data::{load_spec, Dataset};
use crate::error::{PieError, Result};
use crate::eval::{grid_shape, laplace_sharpness, reconstruct_batch, render_grid, rows_as_images, SharpnessSource};
use crate::manifest::RunManifest;
use crate::model::PieModel;
use crate::tensor::Tensor;
use crate::train::Trainer;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "PIE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "pie", version, about = "Pseudo-invertible encoder training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `synthetic:<kind>[:n[:seed]]`, a `.csv` file, or `images.idx[,labels.idx]`.
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct, sample, interpolate or score sharpness with a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long, default_value_t = 1.0)]
        prior_std: f64,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        data: Option<String>,
        /// Defaults to the checkpoint's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write PNG next to every PGM.
        #[arg(long)]
        png: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Reconstruct,
    Sample,
    Interpolate,
    Sharpness,
}

impl Task {
    fn name(self) -> &'static str {
        match self {
            Task::Reconstruct => "reconstruct",
            Task::Sample => "sample",
            Task::Interpolate => "interpolate",
            Task::Sharpness => "sharpness",
        }
    }
}

pub fn exit_code(e: &PieError) -> i32 {
    match e {
        PieError::Config(_) | PieError::Architecture(_) | PieError::Checkpoint(_) | PieError::OddPartition(_) => EXIT_CONFIG,
        PieError::Data(_) => EXIT_DATA,
        PieError::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_OTHER,
    }
}

pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<Value> {
    match command {
        Command::Train { config, data, out } => cmd_train(&config, &data, &out),
        Command::Eval {
            checkpoint,
            task,
            prior_std,
            steps,
            count,
            data,
            seed,
            png,
            out,
        } => cmd_eval(&EvalArgs {
            checkpoint,
            task,
            prior_std,
            steps,
            count,
            data,
            seed,
            png,
            out,
        }),
    }
}

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| PieError::Config(format!("cannot create {}: {e}", out.display())))
}

pub fn cmd_train(config_path: &Path, data_spec: &str, out: &Path) -> Result<Value> {
    let config = TrainConfig::load(config_path)?;
    let data = load_spec(data_spec)?;
    let fingerprint = data.fingerprint();
    ensure_dir(out)?;
    let mut manifest = RunManifest::new("train", serde_json::to_value(&config)?, config.seed, Some(fingerprint));
    let threads = threads_from_env();
    eprintln!(
        "training on {} items of shape {:?} for {} steps ({threads} thread(s))",
        data.len(),
        data.item_shape(),
        config.max_steps
    );
    let mut trainer = Trainer::new(config, data)?.with_threads(threads);
    let result = trainer.run(Some(out));

    let mut written: Vec<PathBuf> = std::fs::read_dir(out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name == "loss_log.csv" || (name.starts_with("checkpoint-") && name.ends_with(".json"))
        })
        .collect();
    written.sort();
    for p in &written {
        manifest.add(out, p)?;
    }
    let manifest_path = manifest.write(out)?;

    let report = result?;
    let eval = report.eval_curve();
    Ok(json!({
        "command": "train",
        "finalStep": report.final_step,
        "initialEvalNll": eval.first().map(|e| e.1),
        "finalEvalNll": eval.last().map(|e| e.1),
        "finalTrainNll": report.rows.last().map(|r| r.train_nll),
        "wallClockMs": report.wall_clock_ms,
        "lossLog": report.loss_log,
        "checkpoints": report.checkpoints,
        "manifest": manifest_path,
    }))
}

pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub task: Task,
    pub prior_std: f64,
    pub steps: usize,
    pub count: Option<usize>,
    pub data: Option<String>,
    pub seed: Option<u64>,
    pub png: bool,
    pub out: PathBuf,
}

struct Outputs<'a> {
    dir: &'a Path,
    png: bool,
    files: Vec<PathBuf>,
}

impl Outputs<'_> {
    fn grid(&mut self, name: &str, images: &[Tensor], rows: usize, cols: usize) -> Result<()> {
        let g = render_grid(images, rows, cols)?;
        let p = self.dir.join(format!("{name}.pgm"));
        g.write_pgm(&p)?;
        self.files.push(p);
        if self.png {
            let p = self.dir.join(format!("{name}.png"));
            g.write_png(&p)?;
            self.files.push(p);
        }
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[String], rows: &Tensor) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| PieError::Data(format!("csv: {e}"));
        w.write_record(header).map_err(err)?;
        let (n, _) = rows.dims2("csv")?;
        for i in 0..n {
            w.write_record(rows.row(i).iter().map(f64::to_string)).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| PieError::Data(format!("csv: {e}")))?;
        let p = self.dir.join(format!("{name}.csv"));
        write_atomic(&p, &bytes)?;
        self.files.push(p);
        Ok(())
    }

    fn json(&mut self, name: &str, value: &Value) -> Result<()> {
        let p = self.dir.join(format!("{name}.json"));
        write_atomic(&p, serde_json::to_string_pretty(value)?.as_bytes())?;
        self.files.push(p);
        Ok(())
    }
}

fn is_image(shape: &[usize]) -> bool {
    matches!(shape, [1, h, w] if *h >= 1 && *w >= 1)
}

fn columns(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|i| format!("{prefix}{i}")).collect()
}

fn held_out(ck: &Checkpoint, data: Dataset) -> Result<Tensor> {
    if data.item_shape() != ck.input_shape.as_slice() {
        return Err(PieError::Data(format!(
            "dataset items have shape {:?}, model expects {:?}",
            data.item_shape(),
            ck.input_shape
        )));
    }
    let data = data.with_split(ck.config.train_fraction, ck.config.seed)?;
    let idx = if data.test_indices().is_empty() { data.train_indices() } else { data.test_indices() };
    Ok(data.batch(idx))
}

fn first_rows(x: &Tensor, n: usize) -> Result<Tensor> {
    let (rows, d) = x.dims2("rows")?;
    let n = n.min(rows);
    Ok(Tensor::new(vec![n, d], x.data()[..n * d].to_vec())?)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Value> {
    let loaded = match &args.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let (model, _) = ck.restore()?;
            Some((ck, model))
        }
        None if args.task == Task::Sharpness && args.data.is_some() => None,
        None => return Err(PieError::Config(format!("task '{}' needs --checkpoint", args.task.name()))),
    };
    let data = args.data.as_deref().map(load_spec).transpose()?;
    let fingerprint = data.as_ref().map(Dataset::fingerprint);
    ensure_dir(&args.out)?;
    let mut out = Outputs {
        dir: &args.out,
        png: args.png,
        files: Vec::new(),
    };

    let (config_echo, base_seed) = match &loaded {
        Some((ck, _)) => (serde_json::to_value(&ck.config)?, ck.config.seed),
        None => (Value::Null, 0),
    };
    let seed = args.seed.unwrap_or(base_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let need_data = |d: Option<Dataset>| d.ok_or_else(|| PieError::Config(format!("task '{}' needs --data", args.task.name())));
    let mut report = match (args.task, &loaded) {
        (Task::Reconstruct, Some((ck, model))) => {
            let x = held_out(ck, need_data(data)?)?;
            let r = reconstruct_batch(model, &x, args.count.unwrap_or(16))?;
            let n = r.originals.shape()[0];
            if is_image(&ck.input_shape) {
                let mut tiles = rows_as_images(&r.originals, &ck.input_shape)?;
                tiles.extend(rows_as_images(&r.reconstructions, &ck.input_shape)?);
                out.grid("reconstruct", &tiles, 2, n)?;
            } else {
                let d = model.input_dim();
                let both = Tensor::new(
                    vec![n, 2 * d],
                    (0..n).flat_map(|i| r.originals.row(i).iter().chain(r.reconstructions.row(i)).copied()).collect(),
                )?;
                let mut header = columns("x", d);
                header.extend(columns("rx", d));
                out.csv("reconstruct", &header, &both)?;
            }
            json!({ "mse": r.mse, "count": n })
        }
        (Task::Sample, Some((ck, model))) => {
            let n = args.count.unwrap_or(16);
            let s = model.sample(n, args.prior_std, &mut rng)?;
            write_samples(&mut out, "sample", ck, model, &s)?;
            json!({ "count": n, "priorStd": args.prior_std, "seed": seed })
        }
        (Task::Interpolate, Some((ck, model))) => {
            let x = held_out(ck, need_data(data)?)?;
            if x.shape()[0] < 2 {
                return Err(PieError::Data("interpolation needs two items".into()));
            }
            let frames = model.interpolate(&Tensor::vector(x.row(0)), &Tensor::vector(x.row(1)), args.steps)?;
            if is_image(&ck.input_shape) {
                out.grid("interpolate", &rows_as_images(&frames, &ck.input_shape)?, 1, args.steps)?;
            } else {
                out.csv("interpolate", &columns("x", model.input_dim()), &frames)?;
            }
            json!({ "steps": args.steps })
        }
        (Task::Sharpness, _) => {
            let (images, source, shape) = match (data, &loaded) {
                (Some(d), _) => {
                    let shape = d.item_shape().to_vec();
                    let x = d.all();
                    let x = match args.count {
                        Some(n) => first_rows(&x, n)?,
                        None => x,
                    };
                    (x, SharpnessSource::Dataset, shape)
                }
                (None, Some((ck, model))) => {
                    let s = model.sample(args.count.unwrap_or(1000), args.prior_std, &mut rng)?;
                    (s, SharpnessSource::ModelSamples, ck.input_shape.clone())
                }
                (None, None) => unreachable!("checked above"),
            };
            if !is_image(&shape) {
                return Err(PieError::Data(format!("sharpness needs grey-scale images, got shape {shape:?}")));
            }
            let r = laplace_sharpness(&rows_as_images(&images, &shape)?, source)?;
            let v = serde_json::to_value(&r)?;
            out.json("sharpness", &v)?;
            v
        }
        (_, None) => unreachable!("checkpoint required"),
    };

    let mut manifest = RunManifest::new(&format!("eval {}", args.task.name()), config_echo, seed, fingerprint);
    for f in &out.files {
        manifest.add(&args.out, f)?;
    }
    let manifest_path = manifest.write(&args.out)?;
    if let Value::Object(map) = &mut report {
        map.insert("task".into(), json!(args.task.name()));
        map.insert("artifacts".into(), json!(out.files));
        map.insert("manifest".into(), json!(manifest_path));
    }
    Ok(report)
}

fn write_samples(out: &mut Outputs, name: &str, ck: &Checkpoint, model: &PieModel, s: &Tensor) -> Result<()> {
    if is_image(&ck.input_shape) {
        let (rows, cols) = grid_shape(s.shape()[0]);
        out.grid(name, &rows_as_images(s, &ck.input_shape)?, rows, cols)
    } else {
        out.csv(name, &columns("x", model.input_dim()), s)
    }
}
