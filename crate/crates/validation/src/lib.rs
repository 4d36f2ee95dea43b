//! Criterion bookkeeping for the acceptance suite.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

/// Result of one criterion: pass flag and a one-line account of the
/// measured values.
#[derive(Debug, Clone, PartialEq)]
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

#[derive(Debug, Default)]
pub struct Report {
    lines: Vec<(usize, String, Outcome)>,
}

impl Report {
    /// Run one criterion, print its line and keep the outcome. A panic
    /// counts as a failure.
    pub fn run(&mut self, id: usize, title: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Outcome::new(false, format!("panicked: {msg}"))
            }
        };
        println!(
            "{} criterion {id} ({title}): {} [{:.1}s]",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        self.lines.push((id, title.to_string(), outcome));
    }

    pub fn failed(&self) -> Vec<usize> {
        self.lines.iter().filter(|(_, _, o)| !o.pass).map(|(id, ..)| *id).collect()
    }

    pub fn summary(&self) -> String {
        let failed = self.failed();
        let passed = self.lines.len() - failed.len();
        if failed.is_empty() {
            format!("{passed}/{} criteria passed", self.lines.len())
        } else {
            let ids: Vec<String> = failed.iter().map(|i| i.to_string()).collect();
            format!("{passed}/{} criteria passed; failed: {}", self.lines.len(), ids.join(", "))
        }
    }
}
