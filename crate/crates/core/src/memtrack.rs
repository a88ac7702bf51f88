//! Byte-exact allocation accounting and operation counters.
//!
//! Every [`Tensor`](crate::tensor::Tensor) buffer is allocated from an
//! [`Arena`]. The arena records an `alloc` event when a buffer is created and a
//! `free` event when its last handle is dropped, keeping a running live-byte
//! total. Nested regions capture the event timeline, peak and counters of a
//! span of work.
//!
//! Counting conventions (block granularity, no cache modelling):
//!
//! | op                     | flops            | hbm elements          |
//! |------------------------|------------------|-----------------------|
//! | matmul `n×k · k×p`     | `2·n·k·p`        | `n·k + k·p + n·p`     |
//! | SiLU                   | 4 / element      | 2 / element           |
//! | SiLU backward          | 6 / element      | 3 / element           |
//! | add, mul               | 1 / element      | 3 / element           |
//! | scale                  | 1 / element      | 2 / element           |
//! | cross-entropy forward  | 5 / logit        | 1 / logit             |
//! | cross-entropy backward | 5 / logit        | 2 / logit             |
//! | RMSNorm fwd / bwd      | 4 / 8 per element| 3 / 5 per element     |
//! | row slice / concat     | 0                | 0                     |
//!
//! Operands flagged as parameters additionally count toward
//! `weight_read_elements` each time a matmul reads them. Activation re-reads
//! during backward are counted like any other read.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use crate::error::{Error, Result};

pub const SILU_FLOPS: u64 = 4;
pub const SILU_HBM: u64 = 2;
pub const SILU_BWD_FLOPS: u64 = 6;
pub const SILU_BWD_HBM: u64 = 3;
pub const BINARY_FLOPS: u64 = 1;
pub const BINARY_HBM: u64 = 3;
pub const SCALE_FLOPS: u64 = 1;
pub const SCALE_HBM: u64 = 2;
pub const CE_FLOPS: u64 = 5;
pub const CE_HBM: u64 = 1;
pub const CE_BWD_FLOPS: u64 = 5;
pub const CE_BWD_HBM: u64 = 2;
pub const NORM_FLOPS: u64 = 4;
pub const NORM_HBM: u64 = 3;
pub const NORM_BWD_FLOPS: u64 = 8;
pub const NORM_BWD_HBM: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Alloc,
    Free,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Alloc => "alloc",
            EventKind::Free => "free",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemEvent {
    pub seq_no: u64,
    pub kind: EventKind,
    pub bytes: u64,
    pub label: String,
    pub live_after: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounters {
    /// Multiply-add counted as two.
    pub flops: u64,
    pub hbm_elements: u64,
    /// Subset of `hbm_elements` that read parameter tensors.
    pub weight_read_elements: u64,
}

impl OpCounters {
    fn since(&self, start: &OpCounters) -> OpCounters {
        OpCounters {
            flops: self.flops - start.flops,
            hbm_elements: self.hbm_elements - start.hbm_elements,
            weight_read_elements: self.weight_read_elements - start.weight_read_elements,
        }
    }
}

impl std::ops::Add for OpCounters {
    type Output = OpCounters;
    fn add(self, rhs: OpCounters) -> OpCounters {
        OpCounters {
            flops: self.flops + rhs.flops,
            hbm_elements: self.hbm_elements + rhs.hbm_elements,
            weight_read_elements: self.weight_read_elements + rhs.weight_read_elements,
        }
    }
}

/// Timeline and peak of one closed region.
///
/// `peak_bytes` is absolute (it includes `baseline_bytes`, the bytes already
/// live when the region opened); use [`MemReport::peak_above_baseline`] for
/// what the region itself added.
#[derive(Debug, Clone, Default)]
pub struct MemReport {
    pub name: String,
    pub baseline_bytes: u64,
    pub baseline_by_label: BTreeMap<String, u64>,
    pub events: Vec<MemEvent>,
    pub peak_bytes: u64,
    pub peak_by_label: BTreeMap<String, u64>,
}

impl MemReport {
    pub fn peak_above_baseline(&self) -> u64 {
        self.peak_bytes - self.baseline_bytes
    }

    pub fn final_live(&self) -> u64 {
        self.events.last().map(|e| e.live_after).unwrap_or(self.baseline_bytes)
    }

    /// Recomputes the peak by replaying the event timeline.
    pub fn replay_peak(&self) -> u64 {
        let mut live = self.baseline_bytes;
        let mut peak = live;
        for e in &self.events {
            match e.kind {
                EventKind::Alloc => live += e.bytes,
                EventKind::Free => live -= e.bytes,
            }
            peak = peak.max(live);
        }
        peak
    }

    /// Peak of the summed live bytes of every label accepted by `pred`,
    /// replayed over the region timeline (baseline included).
    pub fn peak_matching(&self, pred: impl Fn(&str) -> bool) -> u64 {
        let mut live: u64 = self
            .baseline_by_label
            .iter()
            .filter(|(l, _)| pred(l))
            .map(|(_, b)| *b)
            .sum();
        let mut peak = live;
        for e in &self.events {
            if !pred(&e.label) {
                continue;
            }
            match e.kind {
                EventKind::Alloc => live += e.bytes,
                EventKind::Free => live -= e.bytes,
            }
            peak = peak.max(live);
        }
        peak
    }

    /// Like [`MemReport::peak_matching`] but ignoring bytes that were already
    /// live when the region opened.
    pub fn peak_matching_above_baseline(&self, pred: impl Fn(&str) -> bool) -> u64 {
        let mut live: i64 = 0;
        let mut peak: i64 = 0;
        for e in &self.events {
            if !pred(&e.label) {
                continue;
            }
            match e.kind {
                EventKind::Alloc => live += e.bytes as i64,
                EventKind::Free => live -= e.bytes as i64,
            }
            peak = peak.max(live);
        }
        peak as u64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seq_no,kind,bytes,label,live_after\n");
        for e in &self.events {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.seq_no,
                e.kind.as_str(),
                e.bytes,
                e.label,
                e.live_after
            );
        }
        out
    }
}

/// Writes one row per event with the fixed header
/// `seq_no,kind,bytes,label,live_after`.
pub fn export_timeline(report: &MemReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))
}

#[derive(Debug)]
struct OpenRegion {
    name: String,
    baseline: u64,
    baseline_by_label: BTreeMap<String, u64>,
    first_event: usize,
    peak: u64,
    peak_by_label: BTreeMap<String, u64>,
    counters_at_start: OpCounters,
}

#[derive(Debug, Default)]
struct TrackerState {
    next_seq: u64,
    live: u64,
    live_by_label: BTreeMap<String, u64>,
    peak: u64,
    events: Vec<MemEvent>,
    counters: OpCounters,
    regions: Vec<OpenRegion>,
}

impl TrackerState {
    fn record(&mut self, kind: EventKind, bytes: u64, label: &str) {
        match kind {
            EventKind::Alloc => {
                self.live += bytes;
                *self.live_by_label.entry(label.to_string()).or_insert(0) += bytes;
            }
            EventKind::Free => {
                self.live -= bytes;
                if let Some(v) = self.live_by_label.get_mut(label) {
                    *v -= bytes;
                    if *v == 0 {
                        self.live_by_label.remove(label);
                    }
                }
            }
        }
        self.peak = self.peak.max(self.live);
        let seq_no = self.next_seq;
        self.next_seq += 1;
        if self.regions.is_empty() {
            return;
        }
        self.events.push(MemEvent {
            seq_no,
            kind,
            bytes,
            label: label.to_string(),
            live_after: self.live,
        });
        let live = self.live;
        for r in self.regions.iter_mut() {
            if live > r.peak {
                r.peak = live;
                r.peak_by_label = self.live_by_label.clone();
            }
        }
    }
}

/// Shared handle to one allocation tracker. Cloning is cheap; all clones
/// record into the same timeline.
#[derive(Debug, Clone, Default)]
pub struct Arena {
    inner: Arc<Mutex<TrackerState>>,
}

impl PartialEq for Arena {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

impl Arena {
    pub fn new() -> Self {
        Self::default()
    }

    fn state(&self) -> MutexGuard<'_, TrackerState> {
        // a panic while holding the lock leaves plain counters behind, still usable
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub(crate) fn record_alloc(&self, bytes: u64, label: &str) {
        self.state().record(EventKind::Alloc, bytes, label);
    }

    pub(crate) fn record_free(&self, bytes: u64, label: &str) {
        self.state().record(EventKind::Free, bytes, label);
    }

    pub fn live_bytes(&self) -> u64 {
        self.state().live
    }

    pub fn live_by_label(&self) -> BTreeMap<String, u64> {
        self.state().live_by_label.clone()
    }

    /// Peak live bytes since creation or the last [`Arena::reset_peak`].
    pub fn peak_bytes(&self) -> u64 {
        self.state().peak
    }

    pub fn reset_peak(&self) {
        let mut s = self.state();
        s.peak = s.live;
    }

    pub fn counters(&self) -> OpCounters {
        self.state().counters
    }

    pub fn count(&self, flops: u64, hbm_elements: u64) {
        let mut s = self.state();
        s.counters.flops += flops;
        s.counters.hbm_elements += hbm_elements;
    }

    /// `flops += 2·n·k·p; hbm += n·k + k·p + n·p`.
    pub fn count_matmul(&self, n: usize, k: usize, p: usize) {
        let (n, k, p) = (n as u64, k as u64, p as u64);
        self.count(2 * n * k * p, n * k + k * p + n * p);
    }

    pub fn count_weight_reads(&self, elements: u64) {
        self.state().counters.weight_read_elements += elements;
    }

    pub fn region_begin(&self, name: &str) {
        let mut s = self.state();
        let region = OpenRegion {
            name: name.to_string(),
            baseline: s.live,
            baseline_by_label: s.live_by_label.clone(),
            first_event: s.events.len(),
            peak: s.live,
            peak_by_label: s.live_by_label.clone(),
            counters_at_start: s.counters,
        };
        s.regions.push(region);
    }

    pub fn region_end(&self, name: &str) -> Result<(MemReport, OpCounters)> {
        let mut s = self.state();
        match s.regions.last() {
            Some(r) if r.name == name => {}
            Some(r) => {
                return Err(Error::Region(format!(
                    "closing `{name}` while `{}` is innermost",
                    r.name
                )))
            }
            None => return Err(Error::Region(format!("closing `{name}` with no open region"))),
        }
        let r = s.regions.pop().expect("checked above");
        let events = s.events[r.first_event..].to_vec();
        let counters = s.counters.since(&r.counters_at_start);
        if s.regions.is_empty() {
            s.events.clear();
        }
        Ok((
            MemReport {
                name: r.name,
                baseline_bytes: r.baseline,
                baseline_by_label: r.baseline_by_label,
                events,
                peak_bytes: r.peak,
                peak_by_label: r.peak_by_label,
            },
            counters,
        ))
    }

    /// Runs `f` inside a region and returns its result with the region report.
    pub fn measure<T>(&self, name: &str, f: impl FnOnce() -> T) -> (T, MemReport, OpCounters) {
        self.region_begin(name);
        let out = f();
        let (report, counters) = self.region_end(name).expect("measure closes the region it opened");
        (out, report, counters)
    }

    pub fn open_regions(&self) -> usize {
        self.state().regions.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Dtype, Tensor};

    #[test]
    fn empty_region_has_zero_peak_and_flops() {
        let arena = Arena::new();
        arena.region_begin("r");
        let (rep, c) = arena.region_end("r").unwrap();
        assert_eq!(rep.peak_bytes, 0);
        assert_eq!(c.flops, 0);
        assert!(rep.events.is_empty());
    }

    #[test]
    fn single_f64_alloc_of_ten_by_ten() {
        let arena = Arena::new();
        arena.region_begin("r");
        {
            let _t = Tensor::zeros(&arena, &[10, 10], Dtype::F64, "x");
        }
        let (rep, _) = arena.region_end("r").unwrap();
        assert_eq!(rep.peak_bytes, 800);
        assert_eq!(rep.events.len(), 2);
        assert_eq!(rep.final_live(), 0);
    }

    #[test]
    fn nested_inner_peak_not_above_outer() {
        let arena = Arena::new();
        arena.region_begin("outer");
        let _a = Tensor::zeros(&arena, &[4, 4], Dtype::F64, "a");
        arena.region_begin("inner");
        let b = Tensor::zeros(&arena, &[2, 2], Dtype::F32, "b");
        drop(b);
        let (inner, _) = arena.region_end("inner").unwrap();
        let _c = Tensor::zeros(&arena, &[8, 8], Dtype::F64, "c");
        let (outer, _) = arena.region_end("outer").unwrap();
        assert!(inner.peak_bytes <= outer.peak_bytes);
        assert_eq!(inner.peak_above_baseline(), 16);
        assert_eq!(outer.peak_bytes, 128 + 512);
    }

    #[test]
    fn unbalanced_regions_error() {
        let arena = Arena::new();
        assert!(matches!(arena.region_end("x"), Err(Error::Region(_))));
        arena.region_begin("a");
        arena.region_begin("b");
        assert!(matches!(arena.region_end("a"), Err(Error::Region(_))));
        assert!(arena.region_end("b").is_ok());
        assert!(arena.region_end("a").is_ok());
    }

    #[test]
    fn count_matmul_conventions() {
        let arena = Arena::new();
        arena.count_matmul(8, 4, 16);
        assert_eq!(arena.counters().flops, 1024);
        let arena = Arena::new();
        arena.count_matmul(1, 1, 1);
        assert_eq!(arena.counters().flops, 2);
        assert_eq!(arena.counters().hbm_elements, 3);
        // three matmuls of a standard MLP at S=8, d=4, I=16
        let arena = Arena::new();
        arena.count_matmul(8, 4, 16);
        arena.count_matmul(8, 4, 16);
        arena.count_matmul(8, 16, 4);
        assert_eq!(arena.counters().flops, 3072);
    }

    #[test]
    fn peak_equals_replayed_peak_and_label_snapshot() {
        let arena = Arena::new();
        arena.region_begin("r");
        let a = Tensor::zeros(&arena, &[3, 3], Dtype::F64, "a");
        let b = Tensor::zeros(&arena, &[5, 3], Dtype::F64, "b");
        drop(a);
        let _c = Tensor::zeros(&arena, &[1, 3], Dtype::F64, "c");
        drop(b);
        let (rep, _) = arena.region_end("r").unwrap();
        assert_eq!(rep.peak_bytes, rep.replay_peak());
        assert_eq!(rep.peak_bytes, 72 + 120);
        assert_eq!(rep.peak_by_label.get("a"), Some(&72));
        assert_eq!(rep.peak_by_label.get("b"), Some(&120));
        assert_eq!(rep.peak_matching(|l| l == "b" || l == "c"), 144);
    }

    #[test]
    fn timeline_csv_rows() {
        let arena = Arena::new();
        arena.region_begin("r");
        let (rep, _) = arena.region_end("r").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.csv");
        export_timeline(&rep, &p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "seq_no,kind,bytes,label,live_after\n"
        );

        arena.region_begin("r");
        drop(Tensor::zeros(&arena, &[2], Dtype::F32, "x"));
        let (rep, _) = arena.region_end("r").unwrap();
        let p = dir.path().join("one.csv");
        export_timeline(&rep, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let rows: Vec<_> = text.lines().collect();
        assert_eq!(rows.len(), 3);
        assert!(rows[1].ends_with(",alloc,8,x,8"));
        assert!(rows[2].ends_with(",free,8,x,0"));
    }

    #[test]
    fn export_to_unwritable_path_fails() {
        let rep = MemReport::default();
        let err = export_timeline(&rep, "/nonexistent-dir/x/y.csv").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
