//! Line-oriented run reports: the observable trace plus engine-side
//! counters, serializable to text, parseable back, and diffable.
//!
//! The observable section is what equivalence is judged on; the counter
//! section is diagnostic and deliberately excluded from `diff`.

use std::collections::BTreeMap;

use crate::engine::Engine;
use crate::trace::{ObservableTrace, RunStatus, TraceEvent, Tid};

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    /// Observable lines exactly as `ObservableTrace::to_lines` emits them.
    pub observable: Vec<String>,
    pub digest: String,
    pub counters: BTreeMap<String, u64>,
    pub abort_reason: Option<String>,
}

impl RunReport {
    pub fn from_trace(trace: &ObservableTrace) -> RunReport {
        RunReport {
            observable: trace.to_lines(),
            digest: trace.digest(),
            counters: BTreeMap::new(),
            abort_reason: None,
        }
    }

    pub fn from_engine(engine: &Engine, trace: &ObservableTrace) -> RunReport {
        let mut c = BTreeMap::new();
        let mut put = |k: &str, v: u64| {
            c.insert(k.to_string(), v);
        };
        put("blocks_translated", engine.cache.blocks_translated);
        put("cache_bytes_peak", engine.cache.peak_bytes);
        put("cache_flushes", engine.cache.flushes);
        put("dispatches", engine.cache.dispatches);
        put("traces_formed", engine.cache.traces_formed);
        put("trace_hits", engine.cache.trace_hits);
        put("ecalls", engine.stats.ecalls);
        put("ocalls", engine.stats.ocalls);
        put("bytes_staged_out", engine.stats.bytes_staged_out);
        put("bytes_copied_in", engine.stats.bytes_copied_in);
        put("sanitize_rejects", engine.stats.sanitize_rejects);
        put("unsupported_syscalls", engine.stats.unsupported);
        put("sig_delivered", engine.signals.delivered);
        put("sig_ignored", engine.signals.ignored);
        put("sig_fatal", engine.signals.fatal);
        put("sig_aborted", engine.signals.aborted);
        put("host_private_faults", engine.m.host_private_faults);
        put("host_serves", engine.host.serve_count);
        put("adv_public_mutations", engine.host.adv_stats.public_mutations);
        put("adv_private_attempts", engine.host.adv_stats.private_attempts);
        put("adv_iago_injections", engine.host.adv_stats.iago_injections);
        put("direct_app_fetches", engine.direct_app_fetches);
        for (name, n) in &engine.stats.per_syscall {
            c.insert(format!("sys.{name}"), *n);
        }
        RunReport {
            observable: trace.to_lines(),
            digest: trace.digest(),
            counters: c,
            abort_reason: engine.abort_reason.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("run-report v1\n");
        out.push_str("[observable]\n");
        for l in &self.observable {
            out.push_str(l);
            out.push('\n');
        }
        out.push_str(&format!("digest: {}\n", self.digest));
        out.push_str("[counters]\n");
        for (k, v) in &self.counters {
            out.push_str(&format!("{k}: {v}\n"));
        }
        if let Some(r) = &self.abort_reason {
            out.push_str(&format!("abort_reason: {r}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<RunReport, String> {
        let mut lines = text.lines();
        match lines.next() {
            Some("run-report v1") => {}
            other => return Err(format!("bad report header {other:?}")),
        }
        if lines.next() != Some("[observable]") {
            return Err("missing [observable] section".into());
        }
        let mut rep = RunReport::default();
        let mut in_counters = false;
        for l in lines {
            if l == "[counters]" {
                in_counters = true;
            } else if !in_counters {
                if let Some(d) = l.strip_prefix("digest: ") {
                    rep.digest = d.to_string();
                } else {
                    rep.observable.push(l.to_string());
                }
            } else if let Some(r) = l.strip_prefix("abort_reason: ") {
                rep.abort_reason = Some(r.to_string());
            } else if let Some((k, v)) = l.split_once(": ") {
                let v = v.parse().map_err(|_| format!("bad counter line `{l}`"))?;
                rep.counters.insert(k.to_string(), v);
            } else {
                return Err(format!("bad counter line `{l}`"));
            }
        }
        Ok(rep)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DiffResult {
    Equal,
    Diverged { line: usize, left: String, right: String },
}

/// Compare the observable sections only. Counters legitimately differ
/// between the reference interpreter and the engine.
pub fn diff(a: &RunReport, b: &RunReport) -> DiffResult {
    for i in 0..a.observable.len().max(b.observable.len()) {
        let l = a.observable.get(i).map(String::as_str).unwrap_or("<absent>");
        let r = b.observable.get(i).map(String::as_str).unwrap_or("<absent>");
        if l != r {
            return DiffResult::Diverged { line: i, left: l.to_string(), right: r.to_string() };
        }
    }
    DiffResult::Equal
}

/// One human-readable summary line per event plus the status, for logs.
pub fn summarize(trace: &ObservableTrace) -> String {
    let mut by_thread: BTreeMap<Tid, usize> = BTreeMap::new();
    for (tid, _) in &trace.events {
        *by_thread.entry(*tid).or_insert(0) += 1;
    }
    let sys = trace
        .events
        .iter()
        .filter(|(_, e)| matches!(e, TraceEvent::Syscall { .. }))
        .count();
    let sigs = trace.events.len() - sys;
    format!(
        "status={} retired={} threads={} syscalls={sys} signals={sigs}",
        status_word(trace.status),
        trace.retired,
        by_thread.len().max(1),
    )
}

fn status_word(s: RunStatus) -> String {
    crate::trace::status_str(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{ObservableTrace, RunStatus};

    fn sample_trace() -> ObservableTrace {
        let mut t = ObservableTrace::default();
        t.record_syscall(1, 1, "write", "aabbccdd00112233".into(), 5);
        t.record_signal(1, 3, 0x5000, "delivered");
        t.status = RunStatus::Exited(0);
        t.retired = 123;
        t.stdout = b"hi".to_vec();
        t
    }

    #[test]
    fn report_text_roundtrip() {
        let mut rep = RunReport::from_trace(&sample_trace());
        rep.counters.insert("ocalls".into(), 7);
        rep.counters.insert("sys.write".into(), 1);
        rep.abort_reason = Some("cache too small".into());
        let parsed = RunReport::parse(&rep.to_text()).unwrap();
        assert_eq!(parsed.observable, rep.observable);
        assert_eq!(parsed.digest, rep.digest);
        assert_eq!(parsed.counters, rep.counters);
        assert_eq!(parsed.abort_reason, rep.abort_reason);
    }

    #[test]
    fn diff_ignores_counters_flags_observable() {
        let t = sample_trace();
        let mut a = RunReport::from_trace(&t);
        let mut b = RunReport::from_trace(&t);
        a.counters.insert("ocalls".into(), 1);
        b.counters.insert("ocalls".into(), 99);
        assert_eq!(diff(&a, &b), DiffResult::Equal);

        let mut t2 = sample_trace();
        t2.retired = 124;
        let c = RunReport::from_trace(&t2);
        match diff(&a, &c) {
            DiffResult::Diverged { line, left, right } => {
                assert_eq!(line, 1);
                assert_eq!(left, "retired: 123");
                assert_eq!(right, "retired: 124");
            }
            DiffResult::Equal => panic!("expected divergence"),
        }
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(RunReport::parse("not a report").is_err());
        assert!(RunReport::parse("run-report v1\n[observable]\n[counters]\nx y z\n").is_err());
    }
}
