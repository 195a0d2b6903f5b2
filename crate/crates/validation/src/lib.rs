//! Verdict bookkeeping for the acceptance suite (`tests/acceptance.rs`).
//!
//! Verdict lines go straight to the stdout handle rather than through
//! `println!`, so they stay visible when the test runner captures output.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

/// Result of one criterion: pass flag plus a one-line summary of the
/// measured values.
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

#[derive(Default)]
pub struct Suite {
    failed: Vec<u32>,
    ran: usize,
}

impl Suite {
    /// Runs `check` unless `filter` excludes `id`; a panic counts as a
    /// failure with its message as the detail.
    pub fn run(&mut self, filter: &[u32], id: u32, title: &str, check: impl FnOnce() -> Outcome) {
        if !filter.is_empty() && !filter.contains(&id) {
            return;
        }
        let t = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        let mut so = std::io::stdout().lock();
        let _ = writeln!(
            so,
            "acceptance {id:>2} {verdict} {title}: {} [{:.1}s]",
            out.detail,
            t.elapsed().as_secs_f64()
        );
        let _ = so.flush();
        self.ran += 1;
        if !out.pass {
            self.failed.push(id);
        }
    }

    /// Prints the summary line and returns the process exit code.
    pub fn finish(self) -> i32 {
        let mut so = std::io::stdout().lock();
        if self.failed.is_empty() {
            let _ = writeln!(so, "acceptance: {} criteria passed", self.ran);
            0
        } else {
            let _ = writeln!(
                so,
                "acceptance: {} of {} criteria failed: {:?}",
                self.failed.len(),
                self.ran,
                self.failed
            );
            1
        }
    }
}
