//! Overhead, 95th percentile and slowdown computed offline from a run's
//! upload ledger.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{IspId, PeerId};
use crate::num::Scalar;
use crate::scenario::ScenarioConfig;

/// Length of a billing window, seconds.
pub const BILLING_WINDOW: f64 = 300.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub time: f64,
    pub src: PeerId,
    pub dst: PeerId,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferLedger {
    pub records: Vec<TransferRecord>,
}

impl TransferLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: f64, src: PeerId, dst: PeerId, bytes: u64) {
        debug_assert!(bytes > 0 && src != dst);
        self.records.push(TransferRecord { time, src, dst, bytes });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorts by (time, src, dst, bytes).
    pub fn canonicalize(&mut self) {
        self.records.sort_by(|a, b| {
            a.time
                .total_cmp(&b.time)
                .then(a.src.cmp(&b.src))
                .then(a.dst.cmp(&b.dst))
                .then(a.bytes.cmp(&b.bytes))
        });
    }

    /// One `time src dst bytes` line per record, in canonical order.
    pub fn to_canonical_string(&self) -> String {
        let mut sorted = self.clone();
        sorted.canonicalize();
        let mut out = String::with_capacity(sorted.len() * 32);
        for r in &sorted.records {
            let _ = writeln!(out, "{} {} {} {}", r.time, r.src, r.dst, r.bytes);
        }
        out
    }

    pub fn bytes_received(&self, peer: PeerId) -> u128 {
        self.records
            .iter()
            .filter(|r| r.dst == peer)
            .map(|r| u128::from(r.bytes))
            .sum()
    }

    pub fn scaled(&self, k: u64) -> TransferLedger {
        TransferLedger {
            records: self
                .records
                .iter()
                .map(|r| TransferRecord { bytes: r.bytes * k, ..*r })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub peer: PeerId,
    pub arrival_time: f64,
    pub completion_time: f64,
    /// Bytes/s.
    pub max_upload: u64,
}

impl CompletionRecord {
    pub fn download_time(&self) -> f64 {
        self.completion_time - self.arrival_time
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("unknown ISP {0}")]
    UnknownIsp(IspId),
    #[error("the run is empty")]
    EmptyRun,
}

/// Peer to ISP mapping of one run, indexed by peer id.
#[derive(Clone, Debug, PartialEq)]
pub struct IspMap {
    isp_of: Vec<IspId>,
    n_isps: u32,
}

impl IspMap {
    pub fn new(isp_of: Vec<IspId>, n_isps: u32) -> Self {
        IspMap { isp_of, n_isps }
    }

    /// Leechers of both churn sets, then the initial seed in its pseudo-ISP.
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        let mut isp_of: Vec<IspId> = cfg.peers().iter().map(|p| p.isp_id).collect();
        isp_of.push(IspId::SEED);
        IspMap {
            isp_of,
            n_isps: cfg.n_isps(),
        }
    }

    pub fn isp(&self, peer: PeerId) -> IspId {
        self.isp_of[peer.index()]
    }

    pub fn n_isps(&self) -> u32 {
        self.n_isps
    }

    pub fn isps(&self) -> impl Iterator<Item = IspId> {
        (0..self.n_isps).map(IspId)
    }

    fn check(&self, isp: IspId) -> Result<(), MetricsError> {
        if isp.0 < self.n_isps {
            Ok(())
        } else {
            Err(MetricsError::UnknownIsp(isp))
        }
    }

    fn crosses_from(&self, r: &TransferRecord, isp: IspId) -> bool {
        self.isp(r.src) == isp && self.isp(r.dst) != isp
    }
}

/// Bytes uploaded from `isp` to peers outside it.
pub fn inter_isp_bytes(ledger: &TransferLedger, map: &IspMap, isp: IspId) -> Result<u128, MetricsError> {
    map.check(isp)?;
    Ok(ledger
        .records
        .iter()
        .filter(|r| map.crosses_from(r, isp))
        .map(|r| u128::from(r.bytes))
        .sum())
}

/// Bytes per ordered (source ISP, destination ISP) pair, intra-ISP pairs excluded.
pub fn link_bytes(ledger: &TransferLedger, map: &IspMap) -> BTreeMap<(IspId, IspId), u128> {
    let mut out = BTreeMap::new();
    for r in &ledger.records {
        let (a, b) = (map.isp(r.src), map.isp(r.dst));
        if a != b {
            *out.entry((a, b)).or_default() += u128::from(r.bytes);
        }
    }
    out
}

/// Content copies uploaded out of `isp`.
pub fn overhead<S: Scalar>(ledger: &TransferLedger, map: &IspMap, isp: IspId, content_size: u64) -> Result<S, MetricsError> {
    let bytes = inter_isp_bytes(ledger, map, isp)?;
    Ok(S::from_bytes(bytes) / S::from_bytes(u128::from(content_size)))
}

/// Content copies uploaded from `src` to `dst` (peering view of one link).
pub fn link_overhead<S: Scalar>(
    ledger: &TransferLedger,
    map: &IspMap,
    src: IspId,
    dst: IspId,
    content_size: u64,
) -> Result<S, MetricsError> {
    map.check(src)?;
    if !dst.is_seed_pseudo() {
        map.check(dst)?;
    }
    let bytes: u128 = ledger
        .records
        .iter()
        .filter(|r| src != dst && map.isp(r.src) == src && map.isp(r.dst) == dst)
        .map(|r| u128::from(r.bytes))
        .sum();
    Ok(S::from_bytes(bytes) / S::from_bytes(u128::from(content_size)))
}

/// Inter-ISP upload volume of `isp` per window, windows anchored at 0 and the
/// trailing partial window kept.
pub fn window_volumes(
    ledger: &TransferLedger,
    map: &IspMap,
    isp: IspId,
    window: f64,
    end_time: f64,
) -> Result<Vec<u64>, MetricsError> {
    map.check(isp)?;
    if end_time <= 0.0 {
        return Err(MetricsError::EmptyRun);
    }
    let n = ((end_time / window).ceil() as usize).max(1);
    let mut out = vec![0u64; n];
    for r in ledger.records.iter().filter(|r| map.crosses_from(r, isp)) {
        let w = ((r.time / window).floor() as usize).min(n - 1);
        out[w] += r.bytes;
    }
    Ok(out)
}

/// Value at rank ⌈0.95·W⌉ (1-based) of the ascending sort.
pub fn percentile95_of(values: &[u64]) -> Option<u64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = (95 * v.len()).div_ceil(100);
    Some(v[rank.max(1) - 1])
}

pub fn percentile95(
    ledger: &TransferLedger,
    map: &IspMap,
    isp: IspId,
    window: f64,
    end_time: f64,
) -> Result<u64, MetricsError> {
    let w = window_volumes(ledger, map, isp, window, end_time)?;
    percentile95_of(&w).ok_or(MetricsError::EmptyRun)
}

/// Download time over the time to fetch `content_size` at `mean_upload`.
pub fn slowdown<S: Scalar>(record: &CompletionRecord, mean_upload: S, content_size: u64) -> S {
    let ideal = S::from_bytes(u128::from(content_size)) / mean_upload;
    S::from_real(record.download_time()) / ideal
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IspMetrics {
    pub isp: IspId,
    pub name: String,
    pub peers: u32,
    pub overhead: f64,
    pub p95_bytes: u64,
    pub slowdown_mean: f64,
    pub slowdown_min: f64,
    pub slowdown_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_isp: Vec<IspMetrics>,
    pub slowdowns: Vec<(PeerId, f64)>,
    pub mean_overhead: f64,
    pub mean_p95_bytes: f64,
    pub mean_slowdown: f64,
    pub min_slowdown: f64,
    pub max_slowdown: f64,
    pub mean_download_time: f64,
}

fn stats(v: &[f64]) -> (f64, f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max)
}

pub fn report(
    ledger: &TransferLedger,
    completions: &[CompletionRecord],
    cfg: &ScenarioConfig,
    end_time: f64,
) -> MetricsReport {
    let map = IspMap::from_config(cfg);
    let mean_upload = cfg.mean_leecher_upload();
    let content = cfg.content_size;
    let sizes = cfg.isp_sizes();

    let mut per_isp_bytes = vec![0u128; map.n_isps() as usize];
    let windows = ((end_time.max(0.0) / BILLING_WINDOW).ceil() as usize).max(1);
    let mut per_isp_windows = vec![vec![0u64; windows]; map.n_isps() as usize];
    for r in &ledger.records {
        let (a, b) = (map.isp(r.src), map.isp(r.dst));
        if a != b && !a.is_seed_pseudo() {
            per_isp_bytes[a.index()] += u128::from(r.bytes);
            let w = ((r.time / BILLING_WINDOW).floor() as usize).min(windows - 1);
            per_isp_windows[a.index()][w] += r.bytes;
        }
    }

    let slowdowns: Vec<(PeerId, f64)> = if mean_upload > 0.0 {
        completions
            .iter()
            .map(|c| (c.peer, slowdown(c, mean_upload, content)))
            .collect()
    } else {
        Vec::new()
    };
    let mut per_isp_slow: Vec<Vec<f64>> = vec![Vec::new(); map.n_isps() as usize];
    for &(p, s) in &slowdowns {
        let isp = map.isp(p);
        if !isp.is_seed_pseudo() {
            per_isp_slow[isp.index()].push(s);
        }
    }

    let per_isp: Vec<IspMetrics> = map
        .isps()
        .map(|isp| {
            let (mean, min, max) = stats(&per_isp_slow[isp.index()]);
            IspMetrics {
                isp,
                name: cfg.isp_name(isp),
                peers: sizes[isp.index()],
                overhead: per_isp_bytes[isp.index()] as f64 / content as f64,
                p95_bytes: if ledger.is_empty() {
                    0
                } else {
                    percentile95_of(&per_isp_windows[isp.index()]).unwrap_or(0)
                },
                slowdown_mean: mean,
                slowdown_min: min,
                slowdown_max: max,
            }
        })
        .collect();

    let n = per_isp.len().max(1) as f64;
    let all: Vec<f64> = slowdowns.iter().map(|s| s.1).collect();
    let (mean_slowdown, min_slowdown, max_slowdown) = stats(&all);
    let times: Vec<f64> = completions.iter().map(CompletionRecord::download_time).collect();
    MetricsReport {
        mean_overhead: per_isp.iter().map(|m| m.overhead).sum::<f64>() / n,
        mean_p95_bytes: per_isp.iter().map(|m| m.p95_bytes as f64).sum::<f64>() / n,
        per_isp,
        slowdowns,
        mean_slowdown,
        min_slowdown,
        max_slowdown,
        mean_download_time: stats(&times).0,
    }
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "isp,peers,overhead,p95_bytes,slowdown_mean,slowdown_min,slowdown_max";

    /// Per-ISP rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(Self::CSV_HEADER);
        out.push('\n');
        for m in &self.per_isp {
            let _ = writeln!(
                out,
                "{},{},{:.6},{},{:.6},{:.6},{:.6}",
                m.name, m.peers, m.overhead, m.p95_bytes, m.slowdown_mean, m.slowdown_min, m.slowdown_max
            );
        }
        let peers: u32 = self.per_isp.iter().map(|m| m.peers).sum();
        let _ = writeln!(
            out,
            "mean,{},{:.6},{:.1},{:.6},{:.6},{:.6}",
            peers, self.mean_overhead, self.mean_p95_bytes, self.mean_slowdown, self.min_slowdown, self.max_slowdown
        );
        out
    }
}
