use std::time::{Duration, Instant};

use cfmd_core::ssm::{self, ScanParams, SsmStaticParams};
use cfmd_core::{DType, Element, Rng, Tensor};
use clap::Args;
use serde::Serialize;

use crate::{Failure, Global, Outcome};

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Sequence lengths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [256, 1024, 4096])]
    lengths: Vec<usize>,
    /// Channels D.
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// State size S.
    #[arg(long, default_value_t = 16)]
    state: usize,
    /// Block lengths for the blocked scan, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [32])]
    block: Vec<usize>,
    /// Minimum measured time per row; the fastest repetition is reported.
    #[arg(long, default_value_t = 0.2)]
    min_seconds: f64,
}

#[derive(Serialize, Debug)]
pub struct Row {
    #[serde(rename = "L")]
    l: usize,
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "S")]
    s: usize,
    variant: &'static str,
    block: Option<usize>,
    seconds: f64,
    elements_per_second: f64,
}

pub fn run(g: &Global, a: &BenchArgs) -> Outcome {
    if a.lengths.is_empty() || a.lengths.contains(&0) || a.width == 0 || a.state == 0 || a.block.contains(&0) {
        return Err(Failure::usage("lengths, width, state and blocks must be positive"));
    }
    if !(a.min_seconds.is_finite() && a.min_seconds >= 0.0) {
        return Err(Failure::usage("--min-seconds must be a non-negative number"));
    }
    let rows = match g.dtype.unwrap_or(DType::F64) {
        DType::F32 => bench::<f32>(g.seed(), a, 1e-5)?,
        DType::F64 => bench::<f64>(g.seed(), a, 1e-10)?,
    };
    if g.json {
        out!("{}", serde_json::to_string_pretty(&rows).expect("rows serialize"));
    } else {
        out!("L,D,S,variant,block,seconds,elements_per_second");
        for r in &rows {
            let block = r.block.map(|b| b.to_string()).unwrap_or_default();
            out!("{},{},{},{},{},{:.6e},{:.6e}", r.l, r.d, r.s, r.variant, block, r.seconds, r.elements_per_second);
        }
    }
    let seq: Vec<_> = rows.iter().filter(|r| r.variant == "sequential").collect();
    for w in seq.windows(2) {
        let doublings = (w[1].l as f64 / w[0].l as f64).log2();
        if doublings > 0.0 {
            let ratio = (w[1].seconds / w[0].seconds).powf(1.0 / doublings);
            eprintln!("sequential L {} → {}: time ratio per doubling {ratio:.2}", w[0].l, w[1].l);
        }
    }
    Ok(())
}

/// Fastest of repeated runs, repeating until `min` has elapsed in total.
fn time<T: Element>(min: f64, mut f: impl FnMut() -> cfmd_core::Result<Tensor<T>>) -> Result<f64, Failure> {
    let budget = Duration::from_secs_f64(min);
    let start = Instant::now();
    let mut best = f64::INFINITY;
    let mut runs = 0;
    while runs < 3 || start.elapsed() < budget {
        let t = Instant::now();
        std::hint::black_box(f()?);
        best = best.min(t.elapsed().as_secs_f64());
        runs += 1;
    }
    Ok(best)
}

fn bench<T: Element>(seed: u64, a: &BenchArgs, tol: f64) -> Result<Vec<Row>, Failure> {
    let (d, s) = (a.width, a.state);
    let mut rows = Vec::new();
    for (i, &l) in a.lengths.iter().enumerate() {
        let mut rng = Rng::new(seed).fork(i as u64);
        let u = Tensor::<T>::normal([1, 1, l, d], 0.0, 1.0, &mut rng)?;
        let p = SsmStaticParams::<T>::random(d, s, &mut rng)?;
        let sp: ScanParams<T> = ssm::discretize(&u, &p)?;
        let reference = ssm::scan_sequential(&sp, &p.d_skip, &u)?;
        let scale = reference.max_abs().max(1.0);
        let elements = (l * d * s) as f64;
        let seconds = time(a.min_seconds, || ssm::scan_sequential(&sp, &p.d_skip, &u))?;
        rows.push(Row {
            l,
            d,
            s,
            variant: "sequential",
            block: None,
            seconds,
            elements_per_second: elements / seconds,
        });
        for &block in &a.block {
            let out = ssm::scan_blocked(&sp, &p.d_skip, &u, block)?;
            let diff = out.max_abs_diff(&reference)?;
            if !(diff <= tol * scale) {
                return Err(Failure::new(
                    1,
                    format!("blocked scan (block {block}, L {l}) differs from sequential by {diff:e}"),
                ));
            }
            let seconds = time(a.min_seconds, || ssm::scan_blocked(&sp, &p.d_skip, &u, block))?;
            rows.push(Row {
                l,
                d,
                s,
                variant: "blocked",
                block: Some(block),
                seconds,
                elements_per_second: elements / seconds,
            });
        }
    }
    Ok(rows)
}
