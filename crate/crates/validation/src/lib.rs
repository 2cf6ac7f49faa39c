//! Measurement helpers for the acceptance suite in `tests/acceptance.rs`.

use std::fmt::Display;
use std::io::Write;

pub mod probe;

/// Print one acceptance line on the real stdout so it shows even when the
/// harness captures test output.
pub fn report(criterion: usize, pass: bool, detail: impl Display) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {criterion:>2}: {verdict} | {detail}");
    let _ = out.flush();
}
