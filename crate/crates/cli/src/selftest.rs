use cfmd_core::selftest;
use clap::Args;

use crate::{Failure, Global, Outcome};

#[derive(Args, Debug)]
pub struct SelftestArgs {
    /// Run only suites whose name contains this text.
    #[arg(long)]
    filter: Option<String>,
    /// List suite names and exit.
    #[arg(long)]
    list: bool,
}

pub fn run(g: &Global, a: &SelftestArgs) -> Outcome {
    if a.list {
        for s in selftest::suites() {
            out!("{:<12} {}", s.module, s.name);
        }
        return Ok(());
    }
    let results = selftest::run(g.seed(), a.filter.as_deref(), |r| {
        eprintln!("{} {}/{}", if r.passed { "pass" } else { "FAIL" }, r.module, r.name);
    });
    if results.is_empty() {
        return Err(Failure::usage(format!("no suite matches {:?}", a.filter.as_deref().unwrap_or(""))));
    }
    if g.json {
        out!("{}", serde_json::to_string_pretty(&results).expect("results serialize"));
    } else {
        for r in &results {
            out!("{:<4} {:<12} {:<30} {}", if r.passed { "ok" } else { "FAIL" }, r.module, r.name, r.detail);
        }
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    eprintln!("{} of {} suites passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(1, format!("failed suites: {}", failed.join(", "))))
    }
}
