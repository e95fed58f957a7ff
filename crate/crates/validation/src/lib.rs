//! Pass/fail bookkeeping for the numbered acceptance checks.
//!
//! Each check runs to completion even when an earlier one fails, prints a
//! single `PASS`/`FAIL` line, and the process exit code reflects all of them.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Verdict {
            passed,
            detail: detail.into(),
        }
    }

    /// Passes when every listed condition holds; the detail names the failing ones.
    pub fn all(conditions: &[(&str, bool)], detail: impl Into<String>) -> Self {
        let failed: Vec<&str> = conditions.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
        let mut detail = detail.into();
        if !failed.is_empty() {
            detail.push_str(&format!("; violated: {}", failed.join(", ")));
        }
        Verdict::new(failed.is_empty(), detail)
    }
}

#[derive(Debug, Clone)]
pub struct Record {
    pub id: usize,
    pub title: String,
    pub verdict: Verdict,
    pub elapsed: Duration,
}

impl Record {
    pub fn line(&self) -> String {
        format!(
            "{} criterion {}: {}: {} ({:.1}s)",
            if self.verdict.passed { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.verdict.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

#[derive(Debug, Default)]
pub struct Suite {
    records: Vec<Record>,
    filter: Option<Vec<usize>>,
}

impl Suite {
    /// Reads an optional comma-separated list of criterion ids to run from `var`.
    pub fn from_env(var: &str) -> Self {
        let filter = std::env::var(var)
            .ok()
            .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
        Suite {
            records: Vec::new(),
            filter,
        }
    }

    pub fn selected(&self, id: usize) -> bool {
        self.filter.as_ref().is_none_or(|f| f.contains(&id))
    }

    /// Runs `check` and prints its line. A panic counts as a failure.
    pub fn run(&mut self, id: usize, title: &str, check: impl FnOnce() -> Verdict) {
        if !self.selected(id) {
            return;
        }
        let start = Instant::now();
        let verdict = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(v) => v,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into());
                Verdict::new(false, format!("panicked: {msg}"))
            }
        };
        self.push(Record {
            id,
            title: title.to_string(),
            verdict,
            elapsed: start.elapsed(),
        });
    }

    /// Records a verdict computed elsewhere, with its own timing.
    pub fn push(&mut self, record: Record) {
        println!("{}", record.line());
        self.records.push(record);
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn finish(&self) -> ExitCode {
        let failed: Vec<usize> = self.records.iter().filter(|r| !r.verdict.passed).map(|r| r.id).collect();
        println!(
            "acceptance: {} passed, {} failed{}",
            self.records.len() - failed.len(),
            failed.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(" ({failed:?})")
            }
        );
        if failed.is_empty() {
            ExitCode::SUCCESS
        } else {
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_become_failures() {
        let mut s = Suite::default();
        s.run(1, "ok", || Verdict::new(true, "fine"));
        s.run(2, "boom", || panic!("bad input"));
        assert!(s.records()[0].verdict.passed);
        let r = &s.records()[1];
        assert!(!r.verdict.passed && r.verdict.detail.contains("bad input"));
        assert!(r.line().starts_with("FAIL criterion 2: boom: panicked"));
    }

    #[test]
    fn all_names_violations() {
        let v = Verdict::all(&[("a < b", true), ("b < c", false)], "a=1");
        assert!(!v.passed);
        assert_eq!(v.detail, "a=1; violated: b < c");
    }
}
