//! Periodic health checks and the go/no-go decision.
//!
//! Checks are independent predicates over a context value `C`. Every tick
//! evaluates all of them; with the threaded runner they run concurrently and
//! any check that misses the per-check timeout reports `Stale`. A check that
//! panics reports `Error` with the panic message and the framework keeps
//! going.

pub mod builtin;

use std::any::Any;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_PERIOD_NS: u64 = 1_000_000_000;
pub const DEFAULT_CHECK_TIMEOUT: Duration = Duration::from_millis(500);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SysmonError {
    #[error("check {0:?} already registered")]
    DuplicateName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Status {
    Ok,
    Warn,
    Error,
    Stale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Side {
    OperatorStation,
    Avatar,
}

impl std::str::FromStr for Side {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "operator" => Ok(Side::OperatorStation),
            "avatar" => Ok(Side::Avatar),
            other => Err(format!("unknown side {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckOutcome {
    pub status: Status,
    pub message: String,
}

impl CheckOutcome {
    pub fn ok(message: impl Into<String>) -> Self {
        CheckOutcome {
            status: Status::Ok,
            message: message.into(),
        }
    }

    pub fn warn(message: impl Into<String>) -> Self {
        CheckOutcome {
            status: Status::Warn,
            message: message.into(),
        }
    }

    pub fn error(message: impl Into<String>) -> Self {
        CheckOutcome {
            status: Status::Error,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub side: Side,
    pub status: Status,
    pub message: String,
    /// Time of the last completed evaluation.
    pub updated_at_ns: Option<u64>,
}

pub type CheckFn<C> = Arc<dyn Fn(&C) -> CheckOutcome + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Runner {
    /// Sequential, on the caller's thread. No timeout; deterministic.
    Inline,
    /// One thread per check, collected at a deadline.
    Threaded { timeout: Duration },
}

struct Entry<C> {
    name: String,
    side: Side,
    check: CheckFn<C>,
    busy: Arc<AtomicBool>,
    updated_at_ns: Option<u64>,
}

pub struct CheckRegistry<C> {
    entries: Vec<Entry<C>>,
    runner: Runner,
}

impl<C> Default for CheckRegistry<C> {
    fn default() -> Self {
        Self::new(Runner::Threaded {
            timeout: DEFAULT_CHECK_TIMEOUT,
        })
    }
}

fn panic_message(payload: Box<dyn Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        format!("check panicked: {s}")
    } else if let Some(s) = payload.downcast_ref::<String>() {
        format!("check panicked: {s}")
    } else {
        "check panicked".to_string()
    }
}

fn evaluate<C>(check: &CheckFn<C>, ctx: &C) -> CheckOutcome {
    catch_unwind(AssertUnwindSafe(|| check(ctx))).unwrap_or_else(|p| CheckOutcome::error(panic_message(p)))
}

impl<C> CheckRegistry<C> {
    pub fn new(runner: Runner) -> Self {
        CheckRegistry {
            entries: Vec::new(),
            runner,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn register_check<F>(&mut self, name: &str, side: Side, check: F) -> Result<(), SysmonError>
    where
        F: Fn(&C) -> CheckOutcome + Send + Sync + 'static,
    {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(SysmonError::DuplicateName(name.to_string()));
        }
        self.entries.push(Entry {
            name: name.to_string(),
            side,
            check: Arc::new(check),
            busy: Arc::new(AtomicBool::new(false)),
            updated_at_ns: None,
        });
        Ok(())
    }

    fn result(&self, i: usize, outcome: CheckOutcome) -> CheckResult {
        let e = &self.entries[i];
        CheckResult {
            name: e.name.clone(),
            side: e.side,
            status: outcome.status,
            message: outcome.message,
            updated_at_ns: e.updated_at_ns,
        }
    }
}

impl<C: Send + Sync + 'static> CheckRegistry<C> {
    /// Evaluates every registered check once, in registration order.
    pub fn tick(&mut self, ctx: Arc<C>, now_ns: u64) -> Vec<CheckResult> {
        let outcomes: Vec<Option<CheckOutcome>> = match self.runner {
            Runner::Inline => self.entries.iter().map(|e| Some(evaluate(&e.check, &ctx))).collect(),
            Runner::Threaded { timeout } => self.run_threaded(&ctx, timeout),
        };
        let mut out = Vec::with_capacity(outcomes.len());
        for (i, outcome) in outcomes.into_iter().enumerate() {
            let outcome = match outcome {
                Some(o) => {
                    self.entries[i].updated_at_ns = Some(now_ns);
                    o
                }
                None => CheckOutcome {
                    status: Status::Stale,
                    message: "check did not finish within its timeout".to_string(),
                },
            };
            out.push(self.result(i, outcome));
        }
        out
    }

    fn run_threaded(&self, ctx: &Arc<C>, timeout: Duration) -> Vec<Option<CheckOutcome>> {
        let deadline = Instant::now() + timeout;
        let (tx, rx) = mpsc::channel();
        let mut outcomes: Vec<Option<CheckOutcome>> = vec![None; self.entries.len()];
        let mut pending = 0;
        for (i, e) in self.entries.iter().enumerate() {
            // a check still stuck from an earlier tick is not started again
            if e.busy.swap(true, Ordering::AcqRel) {
                continue;
            }
            pending += 1;
            let tx = tx.clone();
            let check = Arc::clone(&e.check);
            let busy = Arc::clone(&e.busy);
            let ctx = Arc::clone(ctx);
            std::thread::spawn(move || {
                let outcome = evaluate(&check, &ctx);
                busy.store(false, Ordering::Release);
                let _ = tx.send((i, outcome));
            });
        }
        drop(tx);
        while pending > 0 {
            let left = deadline.saturating_duration_since(Instant::now());
            match rx.recv_timeout(left) {
                Ok((i, outcome)) => {
                    outcomes[i] = Some(outcome);
                    pending -= 1;
                }
                Err(_) => break,
            }
        }
        outcomes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Decision {
    Go,
    NoGo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregatePolicy {
    pub warn_blocks: bool,
}

impl Default for AggregatePolicy {
    fn default() -> Self {
        AggregatePolicy { warn_blocks: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub decision: Decision,
    pub warning: Option<String>,
}

/// Go iff every result is Ok (or Warn, when the policy allows it).
pub fn aggregate(results: &[CheckResult], policy: AggregatePolicy) -> Verdict {
    if results.is_empty() {
        return Verdict {
            decision: Decision::Go,
            warning: Some("no checks registered; go/no-go is vacuous".to_string()),
        };
    }
    let passes = |r: &CheckResult| match r.status {
        Status::Ok => true,
        Status::Warn => !policy.warn_blocks,
        Status::Error | Status::Stale => false,
    };
    let decision = if results.iter().all(passes) {
        Decision::Go
    } else {
        Decision::NoGo
    };
    Verdict {
        decision,
        warning: None,
    }
}

/// Aligned text table, one line per check, failing lines marked with `!!`.
pub fn format_table(results: &[CheckResult]) -> String {
    let name_w = results.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "   {:<name_w$}  {:<8}  {:<6}  MESSAGE", "CHECK", "SIDE", "STATUS");
    for r in results {
        let mark = if r.status == Status::Ok { "  " } else { "!!" };
        let side = match r.side {
            Side::OperatorStation => "operator",
            Side::Avatar => "avatar",
        };
        let status = format!("{:?}", r.status).to_uppercase();
        let _ = writeln!(out, "{mark} {:<name_w$}  {side:<8}  {status:<6}  {}", r.name, r.message);
    }
    out
}

/// Latest result per check, keyed by name.
pub fn by_name(results: &[CheckResult]) -> BTreeMap<&str, &CheckResult> {
    results.iter().map(|r| (r.name.as_str(), r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Ctx {
        trackers_visible: bool,
    }

    fn registry(runner: Runner) -> CheckRegistry<Ctx> {
        let mut reg = CheckRegistry::new(runner);
        reg.register_check("wifi_5g_up", Side::Avatar, |_| CheckOutcome::ok("up"))
            .unwrap();
        reg.register_check("vr_trackers", Side::OperatorStation, |c: &Ctx| {
            if c.trackers_visible {
                CheckOutcome::ok("all trackers visible")
            } else {
                CheckOutcome::error("VR tracker occluded")
            }
        })
        .unwrap();
        reg
    }

    #[test]
    fn registered_check_appears_in_next_tick() {
        let mut reg = registry(Runner::Inline);
        let r = reg.tick(Arc::new(Ctx { trackers_visible: true }), 0);
        assert_eq!(r[0].name, "wifi_5g_up");
        assert!(r.iter().all(|c| c.status == Status::Ok));
        assert_eq!(aggregate(&r, AggregatePolicy::default()).decision, Decision::Go);
    }

    #[test]
    fn duplicate_name() {
        let mut reg = registry(Runner::Inline);
        assert_eq!(
            reg.register_check("vr_trackers", Side::Avatar, |_| CheckOutcome::ok("")),
            Err(SysmonError::DuplicateName("vr_trackers".into()))
        );
    }

    #[test]
    fn failing_fixture_blocks() {
        for runner in [Runner::Inline, Runner::Threaded { timeout: DEFAULT_CHECK_TIMEOUT }] {
            let mut reg = registry(runner);
            let r = reg.tick(Arc::new(Ctx { trackers_visible: false }), 0);
            let m = by_name(&r);
            assert_eq!(m["vr_trackers"].status, Status::Error);
            assert_eq!(m["wifi_5g_up"].status, Status::Ok);
            assert_eq!(aggregate(&r, AggregatePolicy::default()).decision, Decision::NoGo);
            let table = format_table(&r);
            assert!(table.lines().any(|l| l.starts_with("!!") && l.contains("vr_trackers")));
        }
    }

    #[test]
    fn panicking_check_reports_error() {
        let mut reg = registry(Runner::Threaded { timeout: DEFAULT_CHECK_TIMEOUT });
        reg.register_check("broken", Side::Avatar, |_| panic!("sensor handle gone"))
            .unwrap();
        let r = reg.tick(Arc::new(Ctx { trackers_visible: true }), 0);
        let m = by_name(&r);
        assert_eq!(m["broken"].status, Status::Error);
        assert!(m["broken"].message.contains("sensor handle gone"));
        // framework still works next tick
        let r = reg.tick(Arc::new(Ctx { trackers_visible: true }), 1);
        assert_eq!(r.len(), 3);
    }

    #[test]
    fn slow_check_is_stale_and_tick_stays_in_period() {
        let mut reg = registry(Runner::Threaded { timeout: DEFAULT_CHECK_TIMEOUT });
        reg.register_check("sleepy", Side::Avatar, |_| {
            std::thread::sleep(Duration::from_secs(2));
            CheckOutcome::ok("woke up")
        })
        .unwrap();
        let start = Instant::now();
        let r = reg.tick(Arc::new(Ctx { trackers_visible: true }), 0);
        assert!(start.elapsed() < Duration::from_secs(1));
        let m = by_name(&r);
        assert_eq!(m["sleepy"].status, Status::Stale);
        assert_eq!(m["wifi_5g_up"].status, Status::Ok);
        // still running during the next tick: stale again, not started twice
        let r = reg.tick(Arc::new(Ctx { trackers_visible: true }), DEFAULT_PERIOD_NS);
        assert_eq!(by_name(&r)["sleepy"].status, Status::Stale);
        assert_eq!(by_name(&r)["sleepy"].updated_at_ns, None);
    }

    #[test]
    fn aggregate_policy() {
        let mk = |status| CheckResult {
            name: "x".into(),
            side: Side::Avatar,
            status,
            message: String::new(),
            updated_at_ns: Some(0),
        };
        let mut forty: Vec<_> = (0..40).map(|_| mk(Status::Ok)).collect();
        assert_eq!(aggregate(&forty, AggregatePolicy::default()).decision, Decision::Go);
        forty.push(mk(Status::Error));
        assert_eq!(aggregate(&forty, AggregatePolicy::default()).decision, Decision::NoGo);

        let warn = [mk(Status::Ok), mk(Status::Warn)];
        assert_eq!(aggregate(&warn, AggregatePolicy::default()).decision, Decision::NoGo);
        assert_eq!(
            aggregate(&warn, AggregatePolicy { warn_blocks: false }).decision,
            Decision::Go
        );

        let empty = aggregate(&[], AggregatePolicy::default());
        assert_eq!(empty.decision, Decision::Go);
        assert!(empty.warning.is_some());
    }
}
