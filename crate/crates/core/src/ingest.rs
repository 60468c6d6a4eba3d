//! Crawl snapshots to per-AS torrent profiles.
//!
//! Snapshot format: sections headed by `#torrent <id> <content_bytes>`, then
//! one `ip:port` per line. Blank lines are ignored.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use thiserror::Error;

use crate::estimator::{AsId, TorrentProfile};
use crate::rng::{self, Stream};

/// Fraction of malformed lines above which a snapshot is rejected.
pub const MALFORMED_THRESHOLD: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("{bad} of {total} lines malformed; first: {}", first_diagnostics(.lines))]
    TooManyMalformed { bad: usize, total: usize, lines: Vec<Malformed> },
    #[error("prefix table is empty")]
    EmptyTable,
    #[error("prefix table line {line}: {msg}")]
    Prefix { line: usize, msg: String },
    #[error("coverage needs 1 <= N <= P (got N={n}, P={p})")]
    Coverage { n: u64, p: u64 },
    #[error("coverage target {0} outside (0, 1)")]
    Target(f64),
}

fn first_diagnostics(lines: &[Malformed]) -> String {
    lines.iter().take(5).map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Malformed {
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for Malformed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PeerEndpoint {
    pub ip: Ipv4Addr,
    pub port: u16,
}

impl FromStr for PeerEndpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (ip, port) = s.rsplit_once(':').ok_or_else(|| format!("expected ip:port, got {s:?}"))?;
        let ip: Ipv4Addr = ip.parse().map_err(|_| format!("bad IPv4 address {ip:?}"))?;
        let port: u16 = port.parse().map_err(|_| format!("bad port {port:?}"))?;
        Ok(PeerEndpoint { ip, port })
    }
}

impl fmt::Display for PeerEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ip, self.port)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnapshotTorrent {
    pub id: String,
    pub content_size: u64,
    /// Unique peers in order of first appearance.
    pub peers: Vec<PeerEndpoint>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Snapshot {
    pub torrents: Vec<SnapshotTorrent>,
    pub duplicates: usize,
    /// Torrents without any peer, dropped.
    pub empty: Vec<String>,
    /// Tolerated malformed lines.
    pub malformed: Vec<Malformed>,
}

pub fn parse_snapshot(text: &str) -> Result<Snapshot, IngestError> {
    let mut out = Snapshot::default();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut seen: Vec<HashSet<PeerEndpoint>> = Vec::new();
    let mut current: Option<usize> = None;
    let mut total = 0usize;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        total += 1;
        let no = i + 1;
        let mut bad = |reason: String| out.malformed.push(Malformed { line: no, reason });
        if let Some(rest) = line.strip_prefix('#') {
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.first() != Some(&"torrent") {
                // other comments
                total -= 1;
                continue;
            }
            let size = f.get(2).and_then(|s| s.parse::<u64>().ok()).filter(|&s| s > 0);
            match (f.len(), f.get(1), size) {
                (3, Some(id), Some(size)) => match index.get(*id) {
                    Some(&k) if out.torrents[k].content_size == size => current = Some(k),
                    Some(_) => {
                        bad(format!("torrent {id} repeated with another size"));
                        current = None;
                    }
                    None => {
                        index.insert(id.to_string(), out.torrents.len());
                        current = Some(out.torrents.len());
                        out.torrents.push(SnapshotTorrent { id: id.to_string(), content_size: size, peers: Vec::new() });
                        seen.push(HashSet::new());
                    }
                },
                _ => {
                    bad(format!("expected '#torrent <id> <content_bytes>', got {line:?}"));
                    current = None;
                }
            }
            continue;
        }
        match (current, line.parse::<PeerEndpoint>()) {
            (Some(k), Ok(p)) => {
                if seen[k].insert(p) {
                    out.torrents[k].peers.push(p);
                } else {
                    out.duplicates += 1;
                }
            }
            (None, Ok(_)) => bad("peer outside a torrent section".into()),
            (_, Err(e)) => bad(e),
        }
    }
    if out.malformed.len() as f64 > MALFORMED_THRESHOLD * total as f64 {
        return Err(IngestError::TooManyMalformed { bad: out.malformed.len(), total, lines: out.malformed });
    }
    let (kept, empty): (Vec<_>, Vec<_>) = out.torrents.into_iter().partition(|t| !t.peers.is_empty());
    out.torrents = kept;
    out.empty = empty.into_iter().map(|t| t.id).collect();
    Ok(out)
}

pub fn write_snapshot(torrents: &[SnapshotTorrent]) -> String {
    let mut out = String::new();
    for t in torrents {
        out.push_str(&format!("#torrent {} {}\n", t.id, t.content_size));
        for p in &t.peers {
            out.push_str(&format!("{p}\n"));
        }
    }
    out
}

/// IPv4 prefix to AS table with longest-prefix-match lookups.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixTable {
    /// Indexed by prefix length; network address → AS.
    by_len: Vec<HashMap<u32, AsId>>,
    len: usize,
}

fn mask(len: u8) -> u32 {
    if len == 0 {
        0
    } else {
        u32::MAX << (32 - u32::from(len))
    }
}

impl Default for PrefixTable {
    fn default() -> Self {
        Self::new()
    }
}

impl PrefixTable {
    pub fn new() -> Self {
        PrefixTable { by_len: vec![HashMap::new(); 33], len: 0 }
    }

    /// Adds `net/len`; host bits are ignored. Returns the AS previously
    /// registered for the same prefix.
    pub fn insert(&mut self, net: Ipv4Addr, len: u8, as_id: AsId) -> Option<AsId> {
        assert!(len <= 32);
        let prev = self.by_len[len as usize].insert(u32::from(net) & mask(len), as_id);
        if prev.is_none() {
            self.len += 1;
        }
        prev
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn lookup(&self, ip: Ipv4Addr) -> Option<AsId> {
        let a = u32::from(ip);
        (0..=32u8).rev().find_map(|l| self.by_len[l as usize].get(&(a & mask(l))).copied())
    }

    /// Reads `cidr,asn` rows; the ASN may carry an `AS` prefix. A header
    /// row and `#` comments are skipped.
    pub fn from_csv(text: &str) -> Result<Self, IngestError> {
        let mut t = PrefixTable::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let no = i + 1;
            if line.is_empty() || line.starts_with('#') || line.eq_ignore_ascii_case("cidr,asn") {
                continue;
            }
            let err = |msg: String| IngestError::Prefix { line: no, msg };
            let (cidr, asn) = line.split_once(',').ok_or_else(|| err("expected cidr,asn".into()))?;
            let (net, len) = cidr.trim().split_once('/').ok_or_else(|| err(format!("bad prefix {cidr:?}")))?;
            let net: Ipv4Addr = net.parse().map_err(|_| err(format!("bad address {net:?}")))?;
            let len: u8 = len.parse().ok().filter(|&l| l <= 32).ok_or_else(|| err(format!("bad length {len:?}")))?;
            let asn = asn.trim();
            let digits = asn.strip_prefix("AS").or_else(|| asn.strip_prefix("as")).unwrap_or(asn);
            let as_id: AsId = digits.parse().map_err(|_| err(format!("bad ASN {asn:?}")))?;
            if let Some(prev) = t.insert(net, len, as_id) {
                if prev != as_id {
                    return Err(err(format!("{cidr} mapped to both AS{prev} and AS{as_id}")));
                }
            }
        }
        if t.is_empty() {
            return Err(IngestError::EmptyTable);
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AsMapping {
    /// Ascending AS order.
    pub counts: Vec<(AsId, u64)>,
    pub unmapped: u64,
}

pub fn map_to_as(peers: &[PeerEndpoint], table: &PrefixTable) -> Result<AsMapping, IngestError> {
    if table.is_empty() {
        return Err(IngestError::EmptyTable);
    }
    let mut counts: BTreeMap<AsId, u64> = BTreeMap::new();
    let mut unmapped = 0;
    for p in peers {
        match table.lookup(p.ip) {
            Some(a) => *counts.entry(a).or_default() += 1,
            None => unmapped += 1,
        }
    }
    Ok(AsMapping { counts: counts.into_iter().collect(), unmapped })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IngestSummary {
    pub torrent_id: String,
    pub unique_peers: u64,
    pub unmapped: u64,
}

/// Profiles of every torrent with at least one mapped peer, plus per-torrent
/// mapping statistics for all parsed torrents.
pub fn profiles(snapshot: &Snapshot, table: &PrefixTable) -> Result<(Vec<TorrentProfile>, Vec<IngestSummary>), IngestError> {
    let mut out = Vec::new();
    let mut summary = Vec::new();
    for t in &snapshot.torrents {
        let m = map_to_as(&t.peers, table)?;
        summary.push(IngestSummary { torrent_id: t.id.clone(), unique_peers: t.peers.len() as u64, unmapped: m.unmapped });
        if !m.counts.is_empty() {
            out.push(TorrentProfile::new(t.id.clone(), m.counts, t.content_size).expect("counts are positive and distinct"));
        }
    }
    Ok((out, summary))
}

/// Smallest number of independent requests R, each returning `n` distinct
/// uniform peers out of `p`, such that a given peer is missed with
/// probability at most `1 − target`.
pub fn coverage_requests(p: u64, n: u64, target: f64) -> Result<u32, IngestError> {
    if n == 0 || n > p {
        return Err(IngestError::Coverage { n, p });
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(IngestError::Target(target));
    }
    if n as f64 >= p as f64 * target {
        return Ok(1);
    }
    let miss = 1.0 - n as f64 / p as f64;
    let goal = 1.0 - target;
    let mut r = (goal.ln() / miss.ln()).ceil().max(1.0) as u32;
    // guard the ceiling against rounding in the logarithms
    while r > 1 && miss.powi(r as i32 - 1) <= goal {
        r -= 1;
    }
    while miss.powi(r as i32) > goal {
        r += 1;
    }
    Ok(r)
}

/// Mean fraction of the `p` peers seen after `r` requests of `n` distinct
/// peers each, over `trials` simulated crawls.
pub fn simulate_coverage<R: Rng>(p: u64, n: u64, r: u32, trials: u32, rng: &mut R) -> f64 {
    let mut seen = vec![0u32; p as usize];
    let mut total = 0u64;
    for trial in 1..=trials {
        let mut distinct = 0u64;
        for _ in 0..r {
            for i in rand::seq::index::sample(rng, p as usize, n as usize) {
                if seen[i] != trial {
                    seen[i] = trial;
                    distinct += 1;
                }
            }
        }
        total += distinct;
    }
    total as f64 / (f64::from(trials) * p as f64)
}

// ---- synthetic crawl ----

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub torrents: u32,
    pub ases: u32,
    /// Pareto shape of torrent populations.
    pub size_shape: f64,
    pub min_peers: u32,
    pub max_peers: u32,
    /// Zipf exponent of AS popularity.
    pub as_skew: f64,
    /// Probability that a peer address falls outside every prefix.
    pub unmapped: f64,
    /// Probability that a peer line is written twice.
    pub duplicate: f64,
    pub content_min: u64,
    pub content_max: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            torrents: 200,
            ases: 150,
            size_shape: 1.2,
            min_peers: 2,
            max_peers: 2_000,
            as_skew: 1.0,
            unmapped: 0.02,
            duplicate: 0.05,
            content_min: 50_000_000,
            content_max: 4_000_000_000,
        }
    }
}

/// A generated crawl: snapshot text, prefix table CSV, and the profiles a
/// correct ingest must produce.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub snapshot: String,
    pub prefixes: String,
    pub truth: Vec<TorrentProfile>,
}

/// Each AS `a` owns `10.a.0.0/16` except for one nested /24 that belongs to
/// AS `a + 1`, exercising longest-prefix matches. Unmapped peers live in
/// 192.168.0.0/16.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> SyntheticDataset {
    assert!(spec.ases >= 2 && spec.ases <= 250, "AS ids are encoded in one address octet");
    assert!(spec.min_peers >= 1 && spec.min_peers <= spec.max_peers);
    let mut rng = rng::stream(seed, Stream::Dataset);
    let mut prefixes = String::from("cidr,asn\n");
    for a in 1..=spec.ases {
        prefixes.push_str(&format!("10.{a}.0.0/16,{}\n", 1000 + a));
        prefixes.push_str(&format!("10.{a}.255.0/24,{}\n", 1000 + (a % spec.ases) + 1));
    }
    let weights: Vec<f64> = (1..=spec.ases).map(|r| f64::from(r).powf(-spec.as_skew)).collect();
    let pick = WeightedIndex::new(&weights).expect("positive weights");
    let mut snapshot = String::new();
    let mut truth = Vec::new();
    for t in 0..spec.torrents {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        let size = (f64::from(spec.min_peers) * u.powf(-1.0 / spec.size_shape)).min(f64::from(spec.max_peers)) as u32;
        let content = rng.gen_range(spec.content_min..=spec.content_max);
        let id = format!("t{t:05}");
        snapshot.push_str(&format!("#torrent {id} {content}\n"));
        let mut counts: BTreeMap<AsId, u64> = BTreeMap::new();
        let mut used: HashSet<PeerEndpoint> = HashSet::new();
        while used.len() < size as usize {
            let port = rng.gen_range(1024..=65535u16);
            let (ip, as_id) = if rng.gen_bool(spec.unmapped) {
                (Ipv4Addr::new(192, 168, rng.gen(), rng.gen()), None)
            } else {
                let a = pick.sample(&mut rng) as u32 + 1;
                let third: u8 = rng.gen();
                let owner = if third == 255 { (a % spec.ases) + 1 } else { a };
                (Ipv4Addr::new(10, a as u8, third, rng.gen()), Some(1000 + owner))
            };
            let p = PeerEndpoint { ip, port };
            if !used.insert(p) {
                continue;
            }
            if let Some(a) = as_id {
                *counts.entry(a).or_default() += 1;
            }
            snapshot.push_str(&format!("{p}\n"));
            if rng.gen_bool(spec.duplicate) {
                snapshot.push_str(&format!("{p}\n"));
            }
        }
        if !counts.is_empty() {
            truth.push(TorrentProfile::new(id, counts, content).expect("positive counts"));
        }
    }
    SyntheticDataset { snapshot, prefixes, truth }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{read_profiles, write_profiles};
    use proptest::prelude::*;

    fn ep(s: &str) -> PeerEndpoint {
        s.parse().unwrap()
    }

    #[test]
    fn duplicates_collapse_and_ports_distinguish() {
        let s = parse_snapshot("#torrent a 100\n1.2.3.4:10\n1.2.3.4:10\n1.2.3.4:11\n").unwrap();
        assert_eq!(s.torrents[0].peers, vec![ep("1.2.3.4:10"), ep("1.2.3.4:11")]);
        assert_eq!(s.duplicates, 1);
    }

    #[test]
    fn empty_torrents_are_dropped() {
        let s = parse_snapshot("#torrent a 100\n#torrent b 5\n1.1.1.1:1\n").unwrap();
        assert_eq!(s.torrents.len(), 1);
        assert_eq!(s.empty, vec!["a".to_string()]);
    }

    #[test]
    fn malformed_threshold() {
        let mut text = String::from("#torrent a 100\n");
        for i in 0..198 {
            text.push_str(&format!("10.0.{}.{}:80\n", i / 256, i % 256));
        }
        // 2 of 201 lines bad: under 1 %, tolerated
        let ok = format!("{text}garbage\n1.2.3.4:99999\n");
        let s = parse_snapshot(&ok).unwrap();
        assert_eq!(s.malformed.len(), 2);
        assert_eq!(s.malformed[0].line, 200);
        let bad = format!("{ok}x\n");
        match parse_snapshot(&bad) {
            Err(IngestError::TooManyMalformed { bad, total, lines }) => {
                assert_eq!((bad, total), (3, 202));
                assert_eq!(lines[2].line, 202);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn longest_prefix_wins() {
        let t = PrefixTable::from_csv("cidr,asn\n10.0.0.0/8,1\n10.1.0.0/16,AS2\n0.0.0.0/0,9\n").unwrap();
        assert_eq!(t.lookup(Ipv4Addr::new(10, 1, 2, 3)), Some(2));
        assert_eq!(t.lookup(Ipv4Addr::new(10, 2, 2, 3)), Some(1));
        assert_eq!(t.lookup(Ipv4Addr::new(11, 0, 0, 1)), Some(9));
        let t = PrefixTable::from_csv("10.0.0.0/8,1\n").unwrap();
        assert_eq!(t.lookup(Ipv4Addr::new(11, 0, 0, 1)), None);
        assert_eq!(PrefixTable::from_csv("# nothing\n"), Err(IngestError::EmptyTable));
        assert!(matches!(PrefixTable::from_csv("10.0.0.0/8,1\n10.0.0.0/8,2\n"), Err(IngestError::Prefix { line: 2, .. })));
        assert!(matches!(PrefixTable::from_csv("10.0.0.0/33,1\n"), Err(IngestError::Prefix { .. })));
    }

    #[test]
    fn mapping_counts_unmapped() {
        let t = PrefixTable::from_csv("10.0.0.0/8,7\n").unwrap();
        let m = map_to_as(&[ep("10.0.0.1:1"), ep("10.0.0.2:1"), ep("8.8.8.8:53")], &t).unwrap();
        assert_eq!(m.counts, vec![(7, 2)]);
        assert_eq!(m.unmapped, 1);
        assert_eq!(map_to_as(&[], &PrefixTable::new()), Err(IngestError::EmptyTable));
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(coverage_requests(1000, 100, 0.9), Ok(22));
        assert_eq!(coverage_requests(1000, 1000, 0.9), Ok(1));
        assert_eq!(coverage_requests(1000, 950, 0.9), Ok(1));
        assert!(coverage_requests(10, 0, 0.9).is_err());
        assert!(coverage_requests(10, 11, 0.9).is_err());
        assert!(coverage_requests(10, 5, 1.0).is_err());
    }

    #[test]
    fn generated_crawl_ingests_to_ground_truth() {
        let spec = DatasetSpec { torrents: 40, ases: 30, max_peers: 400, ..DatasetSpec::default() };
        let d = generate_dataset(&spec, 3);
        let snap = parse_snapshot(&d.snapshot).unwrap();
        assert!(snap.malformed.is_empty());
        let table = PrefixTable::from_csv(&d.prefixes).unwrap();
        let (ps, summary) = profiles(&snap, &table).unwrap();
        assert_eq!(ps, d.truth);
        for (s, t) in summary.iter().zip(&snap.torrents) {
            let mapped: u64 = ps.iter().find(|p| p.torrent_id == s.torrent_id).map_or(0, |p| p.total_peers());
            assert_eq!(mapped + s.unmapped, t.peers.len() as u64);
        }
    }

    #[test]
    fn profile_export_is_idempotent() {
        let d = generate_dataset(&DatasetSpec { torrents: 10, ases: 12, ..DatasetSpec::default() }, 9);
        let once = write_profiles(&d.truth);
        let twice = write_profiles(&read_profiles(&once).unwrap());
        assert_eq!(once, twice);
    }

    proptest! {
        #[test]
        fn coverage_is_monotone(p in 2u64..5000, a in 1u64..5000, b in 1u64..5000, t in 0.05f64..0.99) {
            let (a, b) = (a.min(p), b.min(p));
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(coverage_requests(p, lo, t).unwrap() >= coverage_requests(p, hi, t).unwrap());
            prop_assert!(coverage_requests(p, lo, t * 0.9).unwrap() <= coverage_requests(p, lo, t).unwrap());
        }

        #[test]
        fn coverage_is_minimal(p in 2u64..5000, n in 1u64..5000, t in 0.05f64..0.99) {
            let n = n.min(p);
            let r = coverage_requests(p, n, t).unwrap();
            let miss = 1.0 - n as f64 / p as f64;
            prop_assert!(r == 1 || n as f64 >= p as f64 * t || miss.powi(r as i32) <= 1.0 - t);
            prop_assert!(r == 1 || miss.powi(r as i32 - 1) > 1.0 - t);
        }

        #[test]
        fn lookup_matches_linear_scan(rows in prop::collection::vec((any::<u32>(), 0u8..=32, 0u32..50), 1..40), probes in prop::collection::vec(any::<u32>(), 1..50)) {
            let mut t = PrefixTable::new();
            let mut list: Vec<(u32, u8, u32)> = Vec::new();
            for (net, len, a) in rows {
                let net = net & mask(len);
                if list.iter().any(|e| e.0 == net && e.1 == len) {
                    continue;
                }
                t.insert(Ipv4Addr::from(net), len, a);
                list.push((net, len, a));
            }
            for ip in probes {
                let best = list.iter().filter(|e| ip & mask(e.1) == e.0).max_by_key(|e| e.1).map(|e| e.2);
                prop_assert_eq!(t.lookup(Ipv4Addr::from(ip)), best);
            }
        }
    }
}
