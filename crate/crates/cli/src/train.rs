use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cfmd_core::train::{train_toy, Metrics};
use cfmd_core::{checkpoint, DType, Element, ModelConfig};
use clap::Args;
use serde::Serialize;

use crate::{write_file, Failure, Global, Outcome};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON configuration file; unknown keys are rejected.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named configuration: quick, full, tiny, default.
    #[arg(long)]
    preset: Option<String>,
    /// `key=value` override applied after the config; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory for checkpoint/, metrics.jsonl, timings.jsonl and
    /// resolved-config.json.
    #[arg(long)]
    out: PathBuf,
}

/// A metrics line; wall-clock time lives in timings.jsonl so that the
/// metrics of two runs with one seed are byte-identical.
#[derive(Serialize)]
struct Record {
    step: usize,
    loss: f64,
    pix_acc: f64,
    mae: f64,
}

#[derive(Serialize)]
struct Timing {
    step: usize,
    seconds: f64,
}

pub fn resolve(g: &Global, a: &TrainArgs) -> Result<ModelConfig, Failure> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), _) => ModelConfig::load(path)?,
        (None, Some(name)) => ModelConfig::preset(name)?,
        (None, None) => ModelConfig::quick(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(dtype) = g.dtype {
        cfg.dtype = dtype;
    }
    for o in &a.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::new(3, format!("{}: {e}", path.display())))
}

fn line(out: &mut BufWriter<File>, path: &Path, value: &impl Serialize) -> Outcome {
    let text = serde_json::to_string(value).expect("record serializes");
    writeln!(out, "{text}")
        .and_then(|_| out.flush())
        .map_err(|e| Failure::new(3, format!("{}: {e}", path.display())))
}

pub fn run(g: &Global, a: &TrainArgs) -> Outcome {
    let cfg = resolve(g, a)?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::new(3, format!("{}: {e}", a.out.display())))?;
    write_file(&a.out.join("resolved-config.json"), &cfg.to_json())?;
    match cfg.dtype {
        DType::F32 => train::<f32>(g, a, &cfg),
        DType::F64 => train::<f64>(g, a, &cfg),
    }
}

fn train<T: Element>(g: &Global, a: &TrainArgs, cfg: &ModelConfig) -> Outcome {
    let metrics_path = a.out.join("metrics.jsonl");
    let timings_path = a.out.join("timings.jsonl");
    let mut metrics = create(&metrics_path)?;
    let mut timings = create(&timings_path)?;
    let mut io_error = None;
    eprintln!(
        "train-toy: {} steps, batch {}, {}×{}, seed {}, {:?}",
        cfg.steps, cfg.batch_size, cfg.input_size, cfg.input_size, cfg.seed, cfg.dtype
    );
    let outcome = train_toy::<T>(cfg, |m: &Metrics| {
        eprintln!(
            "step {:>5}  loss {:.4}  pix_acc {:.4}  mae {:.4}  {:.1}s",
            m.step, m.loss, m.pix_acc, m.mae, m.seconds
        );
        let record = Record {
            step: m.step,
            loss: m.loss,
            pix_acc: m.pix_acc,
            mae: m.mae,
        };
        let timing = Timing {
            step: m.step,
            seconds: m.seconds,
        };
        if io_error.is_none() {
            io_error = line(&mut metrics, &metrics_path, &record)
                .and_then(|_| line(&mut timings, &timings_path, &timing))
                .err();
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    checkpoint::save(&a.out.join("checkpoint"), cfg, &outcome.params)?;
    let last = outcome.log.last().expect("training logs step 0");
    if g.json {
        let record = Record {
            step: last.step,
            loss: last.loss,
            pix_acc: last.pix_acc,
            mae: last.mae,
        };
        out!("{}", serde_json::to_string(&record).expect("record serializes"));
    } else {
        out!("step {} loss {:.6} pix_acc {:.6} mae {:.6}", last.step, last.loss, last.pix_acc, last.mae);
    }
    Ok(())
}
