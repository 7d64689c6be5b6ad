//! Runs acceptance criteria 1-9 at their default tolerances.

use std::io::Write;

use stablab_cli::acceptance::{run_selected, CriterionResult};
use stablab_cli::config::VerifySpec;

#[test]
fn acceptance_criteria() {
    let results: Vec<CriterionResult> = run_selected(&VerifySpec::default(), 0).expect("criteria run");
    // Written to the raw handle so the lines show without `--nocapture`.
    let mut out = std::io::stdout().lock();
    for r in &results {
        writeln!(out, "{}", r.line()).unwrap();
    }
    drop(out);
    assert_eq!(results.len(), 9);
    let failed: Vec<u32> = results.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
