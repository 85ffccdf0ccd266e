use cfmd_core::gradcheck::{self, Options, Scope};
use clap::Args;

use crate::{Failure, Global, Outcome};

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// ops, modules or model.
    #[arg(long)]
    scope: Scope,
    /// Perturbs the analytic gradient of the named check (negative control).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

pub fn run(g: &Global, a: &GradcheckArgs) -> Outcome {
    let opts = Options {
        seed: g.seed(),
        corrupt: a.corrupt.clone(),
    };
    eprintln!("gradcheck: scope {}, seed {}", a.scope, opts.seed);
    let checks = gradcheck::run(a.scope, &opts)?;
    if g.json {
        out!("{}", serde_json::to_string_pretty(&checks).expect("checks serialize"));
    } else {
        for c in &checks {
            out!(
                "{:<48} {:.3e}  < {:.0e}  {}",
                c.name,
                c.max_rel_error,
                c.threshold,
                if c.passed { "PASS" } else { "FAIL" }
            );
        }
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    eprintln!("{} of {} checks passed", checks.len() - failed.len(), checks.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(1, format!("failed checks: {}", failed.join(", "))))
    }
}
