//! Acceptance run: one line per criterion.
//!
//! Runs without the libtest harness so the lines are always printed.
//! Criterion 10 needs `DAPLED_BACKBONE_DIR` and is skipped otherwise.

mod common;

use std::path::Path;
use std::time::Instant;

use common::Outcome;

fn main() {
    let bin = Path::new(env!("CARGO_BIN_EXE_dapled"));
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("shape suite", Box::new(common::shape_suite)),
        ("identity at init", Box::new(common::identity_at_init)),
        ("modulation ablation equivalence", Box::new(common::modulation_equivalence)),
        ("gradient suite", Box::new(common::gradient_suite)),
        ("oracle suite", Box::new(common::oracle_suite)),
        ("heatmap contract", Box::new(common::heatmap_contract)),
        ("overfit sanity", Box::new(common::overfit_sanity)),
        ("ablation protocol", Box::new(move || common::ablation_protocol(bin))),
        ("determinism and resume", Box::new(common::determinism_and_resume)),
        ("zero-shot ordering", Box::new(common::zero_shot_ordering)),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        println!(
            "criterion {:>2} [{}] {name}: {} ({:.1?})",
            i + 1,
            outcome.tag(),
            outcome.detail(),
            start.elapsed()
        );
        if matches!(outcome, Outcome::Fail(_)) {
            failed.push(i + 1);
        }
    }
    if !failed.is_empty() {
        eprintln!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
