//! Prints one PASS/FAIL line per acceptance criterion and exits nonzero if
//! any fails. Criteria 5 and 6 train models and take several minutes.

mod common;

use std::path::Path;
use std::time::Instant;

use common::{all_pass, describe, Check};

fn criterion(id: u32, title: &str, limit_secs: Option<f64>, body: impl FnOnce() -> Vec<Check>) -> bool {
    let start = Instant::now();
    let mut checks = body();
    let secs = start.elapsed().as_secs_f64();
    if let Some(l) = limit_secs {
        checks.push(Check::below("runtime [s]", secs, l));
    }
    let ok = all_pass(&checks);
    println!(
        "criterion {id}: {} {title} ({secs:.1}s): {}",
        if ok { "PASS" } else { "FAIL" },
        describe(&checks)
    );
    ok
}

fn main() {
    let scratch = tempfile::tempdir().unwrap();
    let root = scratch.path();
    let bin = Path::new(env!("CARGO_BIN_EXE_fluid"));
    let results = [
        criterion(1, "flow correctness", Some(60.0), common::flow_suite),
        criterion(2, "gradient checks", Some(120.0), common::gradient_suite),
        criterion(3, "Gaussian oracles", None, common::gaussian_suite),
        criterion(4, "particle-filter cancellation", Some(300.0), common::pf_suite),
        criterion(5, "desk-scale Case 1", Some(1800.0), || {
            common::case1_reproduction(&root.join("case1"))
        }),
        criterion(6, "shared-summary ablation", None, || {
            common::shared_summary_ablation(&root.join("ablation"))
        }),
        criterion(7, "metrics", Some(60.0), common::metric_suite),
        criterion(8, "simulators", Some(300.0), common::simulator_suite),
        criterion(9, "CLI determinism", None, || {
            let (n, differing) = common::cli_determinism(bin, &root.join("cli"));
            vec![
                Check::holds(format!("{n} output files compared"), n >= 10),
                Check::holds(
                    format!("byte-identical (differing: {differing:?})"),
                    differing.is_empty(),
                ),
            ]
        }),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
