//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Failures are reported, and the
//! process exits nonzero only when `FLOORGEN_ACCEPTANCE_STRICT=1` is set.
//! `FLOORGEN_ACCEPTANCE_ONLY=name,name` restricts the run to the named criteria.

mod data;
mod models;
mod numeric;
mod service;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

pub type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

/// `Ok(detail)` when `cond` holds, `Err(detail)` otherwise.
pub fn verdict(cond: bool, detail: String) -> Check {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn main() {
    let only: Option<Vec<String>> = std::env::var("FLOORGEN_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|p| p.trim().to_string()).collect());
    let strict = std::env::var("FLOORGEN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: Vec<Criterion> = vec![
        ("zero-init-identity", models::zero_init_identity),
        ("freeze-contract", models::freeze_contract),
        ("overfit-convergence", models::overfit_convergence),
        ("conditioning-efficacy", models::conditioning_efficacy),
        ("forward-statistics", numeric::forward_statistics),
        ("gradient-fidelity", numeric::gradient_fidelity),
        ("metric-analytics", numeric::metric_analytics),
        ("steps-sweep", models::steps_sweep),
        ("pca", numeric::pca),
        ("dataset", data::dataset),
        ("service-contract", service::service_contract),
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for (name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|n| n == name)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                println!("FAIL {name} ({secs:.1}s): {detail}");
                failed.push(name);
            }
        }
    }
    println!("acceptance: {}/{ran} passed", ran - failed.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        if strict {
            std::process::exit(1);
        }
    }
}
