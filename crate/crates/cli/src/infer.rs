use std::path::PathBuf;

use cfmd_core::io::image::{read_image, write_image};
use cfmd_core::{checkpoint, DType, Element, Tensor};
use clap::Args;
use serde::Serialize;

use crate::{Failure, Global, Outcome};

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Checkpoint directory written by train-toy.
    #[arg(long)]
    model: PathBuf,
    /// Input image, PPM (P6) or PGM (P5); gray images are replicated to RGB.
    #[arg(long)]
    input: PathBuf,
    /// Output saliency map, PGM (P5).
    #[arg(long)]
    output: PathBuf,
    /// Zero-pad the input to a multiple of 32 and crop the prediction back.
    #[arg(long)]
    pad: bool,
}

#[derive(Serialize)]
struct Stats {
    width: usize,
    height: usize,
    min: f64,
    max: f64,
    mean: f64,
}

pub fn run(g: &Global, a: &InferArgs) -> Outcome {
    match g.dtype.unwrap_or(DType::F32) {
        DType::F32 => infer::<f32>(g, a),
        DType::F64 => infer::<f64>(g, a),
    }
}

fn to_rgb<T: Element>(img: Tensor<T>) -> Result<Tensor<T>, Failure> {
    let [n, c, h, w] = img.dims();
    match c {
        3 => Ok(img),
        1 => Ok(Tensor::from_fn([n, 3, h, w], |[b, _, y, x]| img.at([b, 0, y, x]))?),
        _ => Err(Failure::new(4, format!("expected 1 or 3 channels, got {c}"))),
    }
}

fn infer<T: Element>(g: &Global, a: &InferArgs) -> Outcome {
    let (model, store) = checkpoint::load::<T>(&a.model)?;
    let img = to_rgb(read_image::<T>(&a.input)?)?;
    let [_, _, h, w] = img.dims();
    let x = if a.pad {
        let (ph, pw) = (h.div_ceil(32) * 32, w.div_ceil(32) * 32);
        Tensor::from_fn([1, 3, ph, pw], |[b, c, y, x]| if y < h && x < w { img.at([b, c, y, x]) } else { T::ZERO })?
    } else {
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Failure::new(4, format!("input is {h}×{w}; sides must be multiples of 32 (use --pad)")));
        }
        img
    };
    eprintln!("infer: {} ({h}×{w}) with {}", a.input.display(), a.model.display());
    let y = model.predict(&store, &x)?;
    let y = if a.pad {
        Tensor::from_fn([1, 1, h, w], |[b, c, i, j]| y.at([b, c, i, j]))?
    } else {
        y
    };
    write_image(&y, &a.output)?;
    let (min, max) = y.min_max().map(|(l, u)| (l.to_f64(), u.to_f64())).unwrap_or((0.0, 0.0));
    let stats = Stats {
        width: w,
        height: h,
        min,
        max,
        mean: y.mean(),
    };
    if g.json {
        out!("{}", serde_json::to_string(&stats).expect("stats serialize"));
    } else {
        out!("min {:.6} max {:.6} mean {:.6}", stats.min, stats.max, stats.mean);
    }
    Ok(())
}
