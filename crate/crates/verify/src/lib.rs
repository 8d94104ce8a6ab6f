//! Outcome bookkeeping for the acceptance run in `tests/acceptance.rs`.

use std::fmt;
use std::time::Duration;

/// One criterion's verdict with the measurements behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    /// Adds a wall-clock budget: the outcome passes only if it also finished
    /// within `budget`.
    pub fn within(self, elapsed: Duration, budget: Duration) -> Self {
        let on_time = elapsed <= budget;
        Self {
            pass: self.pass && on_time,
            detail: format!("{}; {:.1}s of {:.0}s", self.detail, elapsed.as_secs_f64(), budget.as_secs_f64()),
        }
    }
}

/// `PASS name: detail` or `FAIL name: detail`.
pub struct Line<'a>(pub &'a str, pub &'a Outcome);

impl fmt::Display for Line<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.1.pass { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.0, self.1.detail)
    }
}
