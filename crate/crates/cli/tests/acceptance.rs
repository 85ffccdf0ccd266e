//! Acceptance criteria; prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use cfmd_core::cflmd::{Dum, DumConfig};
use cfmd_core::io::image::{decode_image, encode_image};
use cfmd_core::io::npy::{decode_npy, encode_npy};
use cfmd_core::ssm::{self, ScanParams, SsmStaticParams};
use cfmd_core::train::train_toy;
use cfmd_core::{nn, oracle, ModelConfig, OffsetOrder, OffsetVariant, ParamStore, Rng, Tape, Tensor};
use serde_json::Value;

type Verdict = Result<String, String>;

fn cfmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfmd")).args(args).output().expect("cfmd runs")
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn dum_config(channels: usize, groups: usize, scale: usize, init_std: f64) -> DumConfig {
    DumConfig {
        channels,
        mid: 8,
        groups,
        alpha: 0.25,
        scale,
        variant: OffsetVariant::Tanh,
        order: OffsetOrder::LinearThenShuffle,
        init_std,
    }
}

fn offset_bound() -> Verdict {
    let start = Instant::now();
    let mut rng = Rng::new(1);
    let mut store = ParamStore::<f32>::new();
    let dum = Dum::init(&mut store, "dum", dum_config(8, 2, 2, 50.0), &mut rng).map_err(fail)?;
    let tape = Tape::inference();
    let p = store.bind(&tape);
    let (mut worst, mut inputs) = (0.0f64, 0);
    for _ in 0..100 {
        let scale = rng.uniform(0.01, 1000.0);
        let x = Tensor::<f32>::normal([100, 8, 4, 4], 0.0, scale, &mut rng).map_err(fail)?;
        let o = dum.raw_offsets(tape.constant(x), &p).map_err(fail)?.value();
        worst = worst.max(o.max_abs());
        inputs += 100;
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 0.25 && secs < 10.0, format!("max |O| = {worst} over {inputs} inputs in {secs:.1}s"))
}

fn bilinear_init() -> Verdict {
    let mut rng = Rng::new(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let scale = [1, 2, 4][rng.int_range(0, 2) as usize];
        let groups = [1, 2, 4][rng.int_range(0, 2) as usize];
        let channels = groups * rng.int_range(1, 2) as usize;
        let [n, h, w] = [rng.int_range(1, 2), rng.int_range(1, 16), rng.int_range(1, 16)].map(|v| v as usize);
        let mut store = ParamStore::<f32>::new();
        let dum = Dum::init(&mut store, "dum", dum_config(channels, groups, scale, 0.0), &mut rng).map_err(fail)?;
        let x = Tensor::<f32>::normal([n, channels, h, w], 0.0, 1.0, &mut rng).map_err(fail)?;
        let tape = Tape::inference();
        let p = store.bind(&tape);
        let y = dum.forward(tape.constant(x.clone()), &p).map_err(fail)?.value();
        worst = worst.max(y.max_abs_diff(&nn::bilinear_resize(&x, scale).map_err(fail)?).map_err(fail)?);
    }
    check(worst < 1e-6, format!("max |DUM - bilinear| = {worst:e} over 100 inputs"))
}

fn scan_equivalence() -> Verdict {
    let start = Instant::now();
    let mut rng = Rng::new(3);
    let u = Tensor::<f64>::normal([1, 1, 256, 32], 0.0, 1.0, &mut rng).map_err(fail)?;
    let p = SsmStaticParams::random(32, 16, &mut rng).map_err(fail)?;
    let sp = ssm::discretize(&u, &p).map_err(fail)?;
    let sp32 = ScanParams {
        abar: sp.abar.cast::<f32>(),
        bu: sp.bu.cast::<f32>(),
        c: sp.c.cast::<f32>(),
    };
    let (d32, u32) = (p.d_skip.cast::<f32>(), u.cast::<f32>());
    let seq = ssm::scan_sequential(&sp, &p.d_skip, &u).map_err(fail)?;
    let seq32 = ssm::scan_sequential(&sp32, &d32, &u32).map_err(fail)?;
    let (mut w64, mut w32) = (0.0f64, 0.0f64);
    for block in [1, 2, 7, 32, 256] {
        w64 = w64.max(ssm::scan_blocked(&sp, &p.d_skip, &u, block).map_err(fail)?.max_abs_diff(&seq).map_err(fail)?);
        w32 = w32.max(ssm::scan_blocked(&sp32, &d32, &u32, block).map_err(fail)?.max_abs_diff(&seq32).map_err(fail)?);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        w64 < 1e-10 && w32 < 1e-5 && secs < 30.0,
        format!("L=256 D=32 S=16 blocks 1,2,7,32,256: f64 {w64:.1e}, f32 {w32:.1e}, {secs:.2}s"),
    )
}

fn gradcheck_model() -> Verdict {
    let start = Instant::now();
    let o = cfmd(&["--json", "gradcheck", "--scope", "model"]);
    let secs = start.elapsed().as_secs_f64();
    let checks: Value = serde_json::from_slice(&o.stdout).map_err(fail)?;
    let checks = checks.as_array().ok_or("gradcheck printed no list")?;
    let worst = checks.iter().filter_map(|c| c["max_rel_error"].as_f64()).fold(0.0, f64::max);
    let failed: Vec<_> = checks.iter().filter(|c| c["passed"] != true).filter_map(|c| c["name"].as_str()).collect();
    check(
        o.status.success() && failed.is_empty() && secs < 180.0,
        format!("{} checks, worst {worst:.2e}, failed {failed:?}, {secs:.0}s", checks.len()),
    )
}

fn grid_sample() -> Verdict {
    let mut rng = Rng::new(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let groups = rng.int_range(1, 2) as usize;
        let c = groups * rng.int_range(1, 3) as usize;
        let [n, h, w, oh, ow] = [2, 12, 12, 12, 12].map(|hi| rng.int_range(1, hi) as usize);
        let x = Tensor::<f64>::normal([n, c, h, w], 0.0, 1.0, &mut rng).map_err(fail)?;
        let grid = Tensor::from_fn([n, 2 * groups, oh, ow], |[_, ax, _, _]| {
            let ext = if ax % 2 == 0 { w } else { h } as f64;
            rng.uniform(-3.0, ext + 2.0)
        })
        .map_err(fail)?;
        let got = nn::grid_sample_bilinear(&x, &grid).map_err(fail)?;
        worst = worst.max(got.max_abs_diff(&oracle::grid_sample(&x, &grid)).map_err(fail)?);
    }
    check(worst < 1e-6, format!("max |kernel - oracle| = {worst:e} over 100 grids"))
}

struct QuickRun {
    final_line: Value,
    metrics: String,
    seconds: f64,
}

fn train_quick(out: &Path) -> Result<QuickRun, String> {
    let start = Instant::now();
    let o = cfmd(&["--json", "train-toy", "--preset", "quick", "--out", out.to_str().unwrap()]);
    let seconds = start.elapsed().as_secs_f64();
    if !o.status.success() {
        return Err(format!("train-toy exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)));
    }
    Ok(QuickRun {
        final_line: serde_json::from_slice(&o.stdout).map_err(fail)?,
        metrics: fs::read_to_string(out.join("metrics.jsonl")).map_err(fail)?,
        seconds,
    })
}

fn quick_preset(run: &Result<QuickRun, String>) -> Verdict {
    let run = run.as_ref().map_err(Clone::clone)?;
    let acc = run.final_line["pix_acc"].as_f64().unwrap_or(0.0);
    let mae = run.final_line["mae"].as_f64().unwrap_or(1.0);
    check(
        acc >= 0.95 && mae <= 0.05 && run.seconds <= 300.0,
        format!("pix_acc {acc:.4} (≥ 0.95), mae {mae:.4} (≤ 0.05), {:.0}s (≤ 300)", run.seconds),
    )
}

const ABLATION_STEPS: usize = 150;

fn ablation(report_dir: &Path) -> Verdict {
    let variants = [("full", true, true), ("no-cflmd", true, false), ("fusion-only", false, false)];
    let mut rows = Vec::new();
    let mut table = format!(
        "# Ablation\n\nQuick preset shortened to {ABLATION_STEPS} steps; final held-out pixel accuracy and MAE.\n\n\
         | variant | seed 0 | seed 1 | seed 2 | seed 3 | seed 4 | mean acc | mean mae |\n|---|---|---|---|---|---|---|---|\n"
    );
    for (name, use_cflma, use_cflmd) in variants {
        let (mut accs, mut maes) = (Vec::new(), Vec::new());
        for seed in 0..5 {
            let cfg = ModelConfig {
                seed,
                use_cflma,
                use_cflmd,
                steps: ABLATION_STEPS,
                eval_every: ABLATION_STEPS,
                ..ModelConfig::quick()
            };
            let out = train_toy::<f32>(&cfg, |_| {}).map_err(|e| format!("{name} seed {seed}: {e}"))?;
            let last = out.log.last().ok_or("empty log")?;
            accs.push(last.pix_acc);
            maes.push(last.mae);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let cells: Vec<_> = accs.iter().map(|a| format!("{a:.4}")).collect();
        table += &format!("| {name} | {} | {:.4} | {:.4} |\n", cells.join(" | "), mean(&accs), mean(&maes));
        rows.push(serde_json::json!({ "variant": name, "pix_acc": accs, "mae": maes, "mean_pix_acc": mean(&accs), "mean_mae": mean(&maes) }));
    }
    fs::create_dir_all(report_dir).map_err(fail)?;
    let json = serde_json::to_string_pretty(&serde_json::json!({ "steps": ABLATION_STEPS, "seeds": [0, 1, 2, 3, 4], "variants": rows }))
        .map_err(fail)?;
    fs::write(report_dir.join("ablation.json"), json).map_err(fail)?;
    fs::write(report_dir.join("ablation.md"), &table).map_err(fail)?;
    let means: Vec<_> = rows.iter().map(|r| format!("{} {:.4}", r["variant"].as_str().unwrap(), r["mean_pix_acc"].as_f64().unwrap())).collect();
    let mean_acc = |i: usize| rows[i]["mean_pix_acc"].as_f64().unwrap_or(f64::NAN);
    let ok = (0..3).all(|i| mean_acc(i).is_finite()) && mean_acc(0) >= mean_acc(2) - 0.01;
    check(ok, format!("mean pix_acc: {} (full ≥ fusion-only − 0.01); report in reports/", means.join(", ")))
}

fn linear_scan() -> Verdict {
    let o = cfmd(&["--json", "scan-bench", "--lengths", "256,512,1024,2048,4096", "--min-seconds", "0.3"]);
    if !o.status.success() {
        return Err(String::from_utf8_lossy(&o.stderr).into_owned());
    }
    let rows: Value = serde_json::from_slice(&o.stdout).map_err(fail)?;
    let seq: Vec<f64> = rows
        .as_array()
        .ok_or("no rows")?
        .iter()
        .filter(|r| r["variant"] == "sequential")
        .filter_map(|r| r["seconds"].as_f64())
        .collect();
    let ratios: Vec<f64> = seq.windows(2).map(|w| w[1] / w[0]).collect();
    let ok = ratios.len() == 4 && ratios.iter().all(|r| (1.5..=3.0).contains(r));
    let shown: Vec<_> = ratios.iter().map(|r| format!("{r:.2}")).collect();
    check(ok, format!("sequential time ratio per doubling 256→4096: {}", shown.join(", ")))
}

fn determinism(first: &Result<QuickRun, String>, second_dir: &Path) -> Verdict {
    let a = cfmd(&["--json", "selftest"]);
    let b = cfmd(&["--json", "selftest"]);
    let selftest_same = a.status.success() && a.stdout == b.stdout;
    let first = first.as_ref().map_err(Clone::clone)?;
    let second = train_quick(second_dir)?;
    let metrics_same = first.metrics == second.metrics;
    check(
        selftest_same && metrics_same,
        format!("selftest output identical: {selftest_same}; train-toy metrics.jsonl identical: {metrics_same}"),
    )
}

fn round_trips() -> Verdict {
    let mut rng = Rng::new(10);
    let mut cases = 0;
    for _ in 0..50 {
        let dims = [1, 2, 3, 4].map(|_| rng.int_range(1, 5) as usize);
        let rank = rng.int_range(1, 4) as usize;
        let mut shape: Vec<usize> = dims[4 - rank..].to_vec();
        shape[0] *= dims[..4 - rank].iter().product::<usize>();
        let t64 = Tensor::<f64>::normal(dims, 0.0, 1e3, &mut rng).map_err(fail)?;
        let t32 = t64.cast::<f32>();
        let back64 = decode_npy(&encode_npy(&t64, &shape).map_err(fail)?).map_err(fail)?.into_tensor::<f64>().map_err(fail)?;
        let back32 = decode_npy(&encode_npy(&t32, &shape).map_err(fail)?).map_err(fail)?.into_tensor::<f32>().map_err(fail)?;
        let bits64 = back64.data().iter().map(|v| v.to_bits()).eq(t64.data().iter().map(|v| v.to_bits()));
        let bits32 = back32.data().iter().map(|v| v.to_bits()).eq(t32.data().iter().map(|v| v.to_bits()));
        if !(bits64 && bits32 && back64.len() == t64.len()) {
            return Err(format!("NPY round trip changed a {shape:?} tensor"));
        }
        for channels in [1, 3] {
            let img = Tensor::<f64>::uniform([1, channels, dims[2] * 3, dims[3] * 3], 0.0, 1.0, &mut rng).map_err(fail)?;
            let bytes = encode_image(&img).map_err(fail)?;
            let decoded = decode_image::<f64>(&bytes).map_err(fail)?;
            let err = decoded.max_abs_diff(&img).map_err(fail)?;
            if encode_image(&decoded).map_err(fail)? != bytes || err > 0.5 / 255.0 + 1e-12 {
                return Err(format!("{} round trip: error {err}", if channels == 1 { "PGM" } else { "PPM" }));
            }
        }
        cases += 1;
    }
    check(true, format!("{cases} NPY (f32, f64, rank 1-4) bit-exact; PGM and PPM byte-stable, error ≤ 1/510"))
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored.
    let scratch = tempfile::tempdir().expect("temporary directory");
    let report_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../reports");
    let quick = train_quick(&scratch.path().join("quick-a"));

    let criteria: Vec<(&str, Box<dyn FnOnce() -> Verdict>)> = vec![
        ("offset bound", Box::new(offset_bound)),
        ("bilinear init", Box::new(bilinear_init)),
        ("scan equivalence", Box::new(scan_equivalence)),
        ("model gradient check", Box::new(gradcheck_model)),
        ("grid_sample oracle", Box::new(grid_sample)),
        ("quick preset quality", Box::new(|| quick_preset(&quick))),
        ("ablation report", Box::new(|| ablation(&report_dir))),
        ("linear scan time", Box::new(linear_scan)),
        ("determinism", Box::new(|| determinism(&quick, &scratch.path().join("quick-b")))),
        ("NPY/PGM/PPM round trips", Box::new(round_trips)),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let verdict = run();
        let (tag, detail) = match &verdict {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} {:>2} {name}: {detail}", i + 1);
        if verdict.is_err() {
            failed.push(i + 1);
        }
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failed.len());
    if !failed.is_empty() {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
