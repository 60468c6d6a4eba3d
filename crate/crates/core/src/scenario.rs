//! Experiment definitions: population, ISP layout, capacities, policy and churn.
//!
//! A [`ScenarioConfig`] is pure data. [`ScenarioConfig::peers`] expands it into
//! the concrete peer schedule; the expansion is a function of the config alone
//! (arrival times come from the scenario's own RNG stream), so equal configs
//! always give byte-identical schedules.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::ids::{IspId, PeerId};
use crate::rng::{self, Stream};

pub const KB: u64 = 1_000;
pub const MB: u64 = 1_000_000;

pub const DEFAULT_PIECE_SIZE: u64 = 256 * KB;
/// 100 MB rounded up to a whole number of 256 kB pieces (391 pieces).
pub const DEFAULT_CONTENT_SIZE: u64 = 391 * DEFAULT_PIECE_SIZE;
pub const DEFAULT_RATE: u64 = 20 * KB;
pub const FAST_SEED_RATE: u64 = 100 * KB;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("invalid `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}:{line}: {source}")]
    AtLine {
        path: String,
        line: usize,
        #[source]
        source: Box<ScenarioError>,
    },
}

impl ScenarioError {
    fn invalid(key: &'static str, message: impl Into<String>) -> Self {
        ScenarioError::Invalid {
            key,
            message: message.into(),
        }
    }

    pub fn key(&self) -> Option<&'static str> {
        match self {
            ScenarioError::Invalid { key, .. } => Some(key),
            ScenarioError::AtLine { source, .. } => source.key(),
            ScenarioError::Parse(_) => None,
        }
    }
}

/// Exact fraction used for upload-class shares.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fraction(pub Ratio<u64>);

impl Fraction {
    pub fn new(num: u64, den: u64) -> Self {
        Fraction(Ratio::new(num, den))
    }

    pub fn one() -> Self {
        Fraction(Ratio::from_integer(1))
    }
}

impl FromStr for Fraction {
    type Err = String;

    /// Accepts `n/d`, integers and finite decimals (`0.25`), all parsed exactly.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n: u64 = n.trim().parse().map_err(|_| format!("bad numerator in {s:?}"))?;
            let d: u64 = d.trim().parse().map_err(|_| format!("bad denominator in {s:?}"))?;
            if d == 0 {
                return Err(format!("zero denominator in {s:?}"));
            }
            return Ok(Fraction(Ratio::new(n, d)));
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 18 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(format!("not an exact fraction: {s:?}"));
        }
        let int: u64 = if int.is_empty() {
            0
        } else {
            int.parse().map_err(|_| format!("not an exact fraction: {s:?}"))?
        };
        let den = 10u64.pow(frac.len() as u32);
        let num = if frac.is_empty() { 0 } else { frac.parse::<u64>().unwrap() };
        Ok(Fraction(Ratio::new(int * den + num, den)))
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.0.numer(), self.0.denom())
    }
}

impl Serialize for Fraction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Int(u64),
            Float(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::Int(v) => Ok(Fraction(Ratio::from_integer(v))),
            // Floats are only accepted when their shortest decimal form is exact.
            Raw::Float(v) => format!("{v}").parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IspSpec {
    pub name: String,
    pub peers: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IspLayout {
    /// `torrent_size / n_isps` peers in each ISP.
    Homogeneous { n_isps: u32 },
    Explicit { isps: Vec<IspSpec> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadClass {
    /// Maximum upload rate in bytes/s.
    pub rate: u64,
    pub fraction: Fraction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalityParams {
    /// Maximum number of outgoing inter-ISP connections per ISP.
    pub limit: u32,
    #[serde(default)]
    pub round_robin: bool,
    #[serde(default)]
    pub partition_merging: bool,
    /// Client-side initial PM detection period, seconds.
    #[serde(default = "default_pm_timer")]
    pub t0: f64,
    /// Tracker-side minimum spacing of PM grants per ISP, seconds.
    #[serde(default = "default_pm_timer")]
    pub t1: f64,
}

fn default_pm_timer() -> f64 {
    60.0
}

impl LocalityParams {
    pub fn with_limit(limit: u32) -> Self {
        LocalityParams {
            limit,
            round_robin: false,
            partition_merging: false,
            t0: default_pm_timer(),
            t1: default_pm_timer(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    BittorrentRandom,
    Locality(LocalityParams),
}

impl Policy {
    pub fn locality(&self) -> Option<&LocalityParams> {
        match self {
            Policy::Locality(p) => Some(p),
            Policy::BittorrentRandom => None,
        }
    }

    pub fn pm_enabled(&self) -> bool {
        self.locality().is_some_and(|p| p.partition_merging)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Churn {
    pub second_set_size: u32,
    /// When set, each first-set completion activates its second-set
    /// counterpart; otherwise the second set arrives in the arrival window.
    #[serde(default = "yes")]
    pub replacement_on_completion: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerParams {
    pub announce_interval: f64,
    pub expiry: f64,
    pub numwant: u32,
}

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams {
            announce_interval: 1800.0,
            expiry: 2700.0,
            numwant: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientParams {
    pub unchoke_slots: u32,
    pub max_peer_set: u32,
    /// Stop initiating connections once the peer set reaches this size.
    pub max_initiate: u32,
    /// Re-announce early when the peer set falls below this size.
    pub min_peers: u32,
    /// Minimum spacing between early re-announces, seconds.
    pub min_reannounce: f64,
    pub choke_interval: f64,
    pub optimistic_interval: f64,
    pub block_size: u64,
    /// Seconds without progress into an ISP before the run aborts;
    /// `None` means twice the ideal download time at the mean leecher upload.
    pub stall_window: Option<f64>,
}

impl Default for ClientParams {
    fn default() -> Self {
        ClientParams {
            unchoke_slots: 4,
            max_peer_set: 80,
            max_initiate: 40,
            min_peers: 20,
            min_reannounce: 300.0,
            choke_interval: 10.0,
            optimistic_interval: 30.0,
            block_size: 16 * KB,
            stall_window: None,
        }
    }
}

/// Forced partition: at `at`, every connection between a peer of `isp` and a
/// peer outside it is closed, and the ISP members that held those
/// connections crash without notifying the tracker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub isp: u32,
    pub at: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Leechers in the first set.
    pub torrent_size: u32,
    pub content_size: u64,
    pub piece_size: u64,
    pub layout: IspLayout,
    pub upload_classes: Vec<UploadClass>,
    pub seed_rate: u64,
    pub policy: Policy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub egress_cap: Option<u64>,
    pub arrival_window: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub churn: Option<Churn>,
    pub seed_linger: f64,
    pub rng_seed: u64,
    #[serde(default)]
    pub tracker: TrackerParams,
    #[serde(default)]
    pub client: ClientParams,
    #[serde(default, rename = "partition", skip_serializing_if = "Vec::is_empty")]
    pub partitions: Vec<Partition>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeerSet {
    First,
    Second,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeerSpec {
    pub peer_id: PeerId,
    pub isp_id: IspId,
    /// Bytes/s.
    pub max_upload: u64,
    /// Seconds. Second-set peers under replacement churn carry 0 here; the
    /// engine activates them when their first-set counterpart completes.
    pub arrival_time: f64,
    pub set_index: PeerSet,
}

impl ScenarioConfig {
    fn base(torrent_size: u32, layout: IspLayout, classes: Vec<UploadClass>, seed_rate: u64) -> Self {
        ScenarioConfig {
            torrent_size,
            content_size: DEFAULT_CONTENT_SIZE,
            piece_size: DEFAULT_PIECE_SIZE,
            layout,
            upload_classes: classes,
            seed_rate,
            policy: Policy::BittorrentRandom,
            egress_cap: None,
            arrival_window: 60.0,
            churn: None,
            seed_linger: 300.0,
            rng_seed: 1,
            tracker: TrackerParams::default(),
            client: ClientParams::default(),
            partitions: Vec::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
                .unwrap_or(0);
            ScenarioError::Parse(format!("line {line}: {}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a scenario file; validation failures carry the
    /// line where the offending key is written.
    pub fn load(path: &std::path::Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e.key() {
            Some(key) => ScenarioError::AtLine {
                path: path.display().to_string(),
                line: line_of_key(&text, key),
                source: Box::new(e),
            },
            None => ScenarioError::Parse(format!("{}: {e}", path.display())),
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.piece_size == 0 {
            return Err(ScenarioError::invalid("piece_size", "must be positive"));
        }
        if self.content_size == 0 || !self.content_size.is_multiple_of(self.piece_size) {
            return Err(ScenarioError::invalid(
                "content_size",
                format!("{} is not a positive multiple of piece_size {}", self.content_size, self.piece_size),
            ));
        }
        if self.client.block_size == 0 || !self.piece_size.is_multiple_of(self.client.block_size) {
            return Err(ScenarioError::invalid("block_size", "must divide piece_size"));
        }
        if self.upload_classes.is_empty() {
            return Err(ScenarioError::invalid("upload_classes", "at least one class is required"));
        }
        let total = self
            .upload_classes
            .iter()
            .fold(Ratio::<u64>::zero(), |acc, c| acc + c.fraction.0);
        if total != Ratio::from_integer(1) {
            return Err(ScenarioError::invalid(
                "upload_classes",
                format!("fractions sum to {}/{}, not 1", total.numer(), total.denom()),
            ));
        }
        if self.upload_classes.iter().any(|c| c.rate == 0) {
            return Err(ScenarioError::invalid("upload_classes", "rates must be positive"));
        }
        if self.seed_rate == 0 {
            return Err(ScenarioError::invalid("seed_rate", "must be positive"));
        }
        match &self.layout {
            IspLayout::Homogeneous { n_isps } => {
                if *n_isps == 0 || !self.torrent_size.is_multiple_of(*n_isps) {
                    return Err(ScenarioError::invalid(
                        "n_isps",
                        format!("{} peers cannot be split evenly over {} ISPs", self.torrent_size, n_isps),
                    ));
                }
            }
            IspLayout::Explicit { isps } => {
                if isps.is_empty() {
                    return Err(ScenarioError::invalid("isps", "layout lists no ISP"));
                }
                if isps.iter().any(|i| i.peers == 0) {
                    return Err(ScenarioError::invalid("isps", "every ISP needs at least one peer"));
                }
                let sum: u64 = isps.iter().map(|i| u64::from(i.peers)).sum();
                if sum != u64::from(self.torrent_size) {
                    return Err(ScenarioError::invalid(
                        "torrent_size",
                        format!("ISP peer counts sum to {sum}, expected {}", self.torrent_size),
                    ));
                }
            }
        }
        if !(self.arrival_window >= 0.0 && self.arrival_window.is_finite()) {
            return Err(ScenarioError::invalid("arrival_window", "must be a finite non-negative time"));
        }
        if !(self.seed_linger >= 0.0 && self.seed_linger.is_finite()) {
            return Err(ScenarioError::invalid("seed_linger", "must be a finite non-negative time"));
        }
        if let Some(cap) = self.egress_cap {
            if cap == 0 {
                return Err(ScenarioError::invalid("egress_cap", "must be positive when set"));
            }
        }
        if let Policy::Locality(p) = &self.policy {
            if !(p.t0 > 0.0 && p.t1 >= 0.0) {
                return Err(ScenarioError::invalid("t0", "PM timers must be positive"));
            }
        }
        let c = &self.client;
        if c.unchoke_slots == 0 || c.max_peer_set == 0 || c.max_initiate > c.max_peer_set {
            return Err(ScenarioError::invalid(
                "client",
                "need unchoke_slots > 0 and max_initiate <= max_peer_set",
            ));
        }
        if !(c.choke_interval > 0.0 && c.optimistic_interval >= c.choke_interval) {
            return Err(ScenarioError::invalid("choke_interval", "must be positive and <= optimistic_interval"));
        }
        let t = &self.tracker;
        if !(t.announce_interval > 0.0 && t.expiry > 0.0) {
            return Err(ScenarioError::invalid("announce_interval", "tracker timers must be positive"));
        }
        for p in &self.partitions {
            if p.isp >= self.n_isps() {
                return Err(ScenarioError::invalid("partition", format!("unknown ISP {}", p.isp)));
            }
        }
        Ok(())
    }

    pub fn n_isps(&self) -> u32 {
        match &self.layout {
            IspLayout::Homogeneous { n_isps } => *n_isps,
            IspLayout::Explicit { isps } => isps.len() as u32,
        }
    }

    pub fn n_pieces(&self) -> u32 {
        (self.content_size / self.piece_size) as u32
    }

    /// First-set peer count of each ISP, indexed by `IspId`.
    pub fn isp_sizes(&self) -> Vec<u32> {
        match &self.layout {
            IspLayout::Homogeneous { n_isps } => vec![self.torrent_size / n_isps; *n_isps as usize],
            IspLayout::Explicit { isps } => isps.iter().map(|i| i.peers).collect(),
        }
    }

    pub fn isp_name(&self, isp: IspId) -> String {
        match &self.layout {
            _ if isp.is_seed_pseudo() => "seed".to_string(),
            IspLayout::Homogeneous { .. } => isp.0.to_string(),
            IspLayout::Explicit { isps } => isps[isp.index()].name.clone(),
        }
    }

    fn second_set_size(&self) -> u32 {
        self.churn.as_ref().map_or(0, |c| c.second_set_size)
    }

    /// Leechers over both churn sets.
    pub fn total_leechers(&self) -> u32 {
        self.torrent_size + self.second_set_size()
    }

    /// Id of the initial seed, placed after every leecher.
    pub fn initial_seed_id(&self) -> PeerId {
        PeerId(self.total_leechers())
    }

    pub fn replacement_churn(&self) -> bool {
        self.churn
            .as_ref()
            .is_some_and(|c| c.replacement_on_completion && c.second_set_size > 0)
    }

    /// Upload rate of each first-set peer within one ISP of `n` peers, by
    /// largest-remainder apportionment of the class fractions.
    fn class_rates(&self, n: u32) -> Vec<u64> {
        let n = u64::from(n);
        let mut counts: Vec<(u64, Ratio<u64>)> = self
            .upload_classes
            .iter()
            .map(|c| {
                let share = c.fraction.0 * n;
                (share.to_integer(), share.fract())
            })
            .collect();
        let assigned: u64 = counts.iter().map(|c| c.0).sum();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| counts[b].1.cmp(&counts[a].1).then(a.cmp(&b)));
        for &k in order.iter().take((n - assigned) as usize) {
            counts[k].0 += 1;
        }
        self.upload_classes
            .iter()
            .zip(&counts)
            .flat_map(|(c, (k, _))| std::iter::repeat_n(c.rate, *k as usize))
            .collect()
    }

    /// Expands the config into the leecher schedule (both churn sets, initial
    /// seed excluded).
    pub fn peers(&self) -> Vec<PeerSpec> {
        let mut first = Vec::with_capacity(self.torrent_size as usize);
        for (isp, &size) in self.isp_sizes().iter().enumerate() {
            for rate in self.class_rates(size) {
                first.push((IspId(isp as u32), rate));
            }
        }
        let mut arrivals = rng::stream(self.rng_seed, Stream::Arrivals);
        let window = self.arrival_window;
        let mut draw = move || {
            if window > 0.0 {
                arrivals.gen_range(0.0..=window)
            } else {
                0.0
            }
        };
        let mut out: Vec<PeerSpec> = first
            .iter()
            .enumerate()
            .map(|(i, &(isp, rate))| PeerSpec {
                peer_id: PeerId(i as u32),
                isp_id: isp,
                max_upload: rate,
                arrival_time: draw(),
                set_index: PeerSet::First,
            })
            .collect();
        let replacement = self.replacement_churn();
        for k in 0..self.second_set_size() {
            let (isp, rate) = first[k as usize % first.len()];
            out.push(PeerSpec {
                peer_id: PeerId(self.torrent_size + k),
                isp_id: isp,
                max_upload: rate,
                arrival_time: if replacement { 0.0 } else { draw() },
                set_index: PeerSet::Second,
            });
        }
        out
    }

    pub fn initial_seed(&self) -> PeerSpec {
        PeerSpec {
            peer_id: self.initial_seed_id(),
            isp_id: IspId::SEED,
            max_upload: self.seed_rate,
            arrival_time: 0.0,
            set_index: PeerSet::First,
        }
    }

    /// Mean maximum upload over all leechers, initial seed excluded.
    pub fn mean_leecher_upload(&self) -> f64 {
        let peers = self.peers();
        if peers.is_empty() {
            return 0.0;
        }
        let sum: u128 = peers.iter().map(|p| u128::from(p.max_upload)).sum();
        (Ratio::new(sum, peers.len() as u128)).to_f64().unwrap_or(0.0)
    }

    /// Time for one peer to fetch the content at `rate` bytes/s.
    pub fn transmission_time(&self, rate: f64) -> f64 {
        self.content_size as f64 / rate
    }

    pub fn stall_window(&self) -> f64 {
        self.client
            .stall_window
            .unwrap_or_else(|| 2.0 * self.transmission_time(self.mean_leecher_upload()))
    }
}

fn line_of_key(text: &str, key: &str) -> usize {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.starts_with(key) && l[key.len()..].trim_start().starts_with('=')
                || l.starts_with('[') && l.contains(key)
        })
        .map_or(0, |i| i + 1)
}

/// `n_peers` leechers spread evenly over `n_isps`, all uploading at `rate`,
/// with a seed at the same rate.
pub fn build_homogeneous(n_peers: u32, n_isps: u32, rate: u64) -> Result<ScenarioConfig, ScenarioError> {
    if n_isps == 0 || !n_peers.is_multiple_of(n_isps) {
        return Err(ScenarioError::invalid(
            "n_isps",
            format!("{n_peers} peers cannot be split evenly over {n_isps} ISPs"),
        ));
    }
    let cfg = ScenarioConfig::base(
        n_peers,
        IspLayout::Homogeneous { n_isps },
        vec![UploadClass {
            rate,
            fraction: Fraction::one(),
        }],
        rate,
    );
    cfg.validate()?;
    Ok(cfg)
}

/// Thirds at 20, 50 and 100 kB/s in every ISP, with a 100 kB/s seed.
pub fn build_heterogeneous(n_peers: u32, n_isps: u32) -> Result<ScenarioConfig, ScenarioError> {
    if n_isps == 0 || !n_peers.is_multiple_of(n_isps) || !(n_peers / n_isps).is_multiple_of(3) {
        return Err(ScenarioError::invalid(
            "torrent_size",
            format!("{n_peers} peers over {n_isps} ISPs do not split into equal thirds"),
        ));
    }
    let classes = [20 * KB, 50 * KB, 100 * KB]
        .into_iter()
        .map(|rate| UploadClass {
            rate,
            fraction: Fraction::new(1, 3),
        })
        .collect();
    let cfg = ScenarioConfig::base(n_peers, IspLayout::Homogeneous { n_isps }, classes, FAST_SEED_RATE);
    cfg.validate()?;
    Ok(cfg)
}

/// One ISP per `(as_id, count)` entry, all peers at `rate`.
pub fn build_from_distribution(as_counts: &[(String, u32)], rate: u64) -> Result<ScenarioConfig, ScenarioError> {
    if as_counts.is_empty() {
        return Err(ScenarioError::invalid("isps", "empty AS distribution"));
    }
    if let Some((name, _)) = as_counts.iter().find(|(_, c)| *c == 0) {
        return Err(ScenarioError::invalid("isps", format!("AS {name} has no peer")));
    }
    let isps: Vec<IspSpec> = as_counts
        .iter()
        .map(|(name, peers)| IspSpec {
            name: name.clone(),
            peers: *peers,
        })
        .collect();
    let total: u32 = isps.iter().map(|i| i.peers).sum();
    let cfg = ScenarioConfig::base(
        total,
        IspLayout::Explicit { isps },
        vec![UploadClass {
            rate,
            fraction: Fraction::one(),
        }],
        rate,
    );
    cfg.validate()?;
    Ok(cfg)
}

/// Peer schedule of a churn run: the first set arrives uniformly in
/// `[0, window]`; second-set peers wait for their counterpart to complete.
pub fn churn_schedule(config: &ScenarioConfig, window: f64) -> Result<Vec<PeerSpec>, ScenarioError> {
    if !(window > 0.0 && window.is_finite()) {
        return Err(ScenarioError::invalid("arrival_window", "churn window must be positive"));
    }
    let Some(churn) = &config.churn else {
        return Err(ScenarioError::invalid("churn", "churn is not enabled in this scenario"));
    };
    let mut cfg = config.clone();
    cfg.arrival_window = window;
    cfg.churn = Some(churn.clone());
    cfg.validate()?;
    Ok(cfg.peers())
}

/// Synthetic peers-per-AS profile with `n_as` ASes summing to `n_peers`,
/// whose largest AS has exactly `max_as` peers and whose sizes decay like a
/// power law. Deterministic.
pub fn heavy_tailed_counts(n_peers: u32, n_as: u32, max_as: u32) -> Vec<u32> {
    assert!(n_as >= 1 && max_as >= 1 && n_peers >= n_as && max_as <= n_peers - (n_as - 1));
    assert!(u64::from(max_as) * u64::from(n_as) >= u64::from(n_peers));
    if n_as == 1 {
        return vec![n_peers];
    }
    // Find the exponent whose rank-size curve max_as * r^-a (floored at 1)
    // sums to n_peers, by bisection on a.
    let sum_for = |a: f64| -> u64 {
        (1..=n_as)
            .map(|r| ((f64::from(max_as) * f64::from(r).powf(-a)).floor().max(1.0)) as u64)
            .sum()
    };
    let (mut lo, mut hi) = (0.0_f64, 20.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sum_for(mid) > u64::from(n_peers) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut counts: Vec<u32> = (1..=n_as)
        .map(|r| ((f64::from(max_as) * f64::from(r).powf(-hi)).floor().max(1.0)) as u32)
        .collect();
    counts[0] = max_as;
    // Distribute the rounding gap over ranks 2.. while keeping order and the max.
    let mut total: i64 = counts.iter().map(|&c| i64::from(c)).sum();
    let target = i64::from(n_peers);
    let mut r = 1;
    while total < target {
        if counts[r] < counts[r - 1] {
            counts[r] += 1;
            total += 1;
        }
        r = if r + 1 < counts.len() { r + 1 } else { 1 };
    }
    let mut r = counts.len() - 1;
    while total > target {
        if counts[r] > 1 {
            counts[r] -= 1;
            total -= 1;
        }
        r = if r > 1 { r - 1 } else { counts.len() - 1 };
    }
    counts
}

/// Named `(as_id, count)` profile built from [`heavy_tailed_counts`].
pub fn reference_profile(prefix: &str, n_peers: u32, n_as: u32, max_as: u32) -> Vec<(String, u32)> {
    heavy_tailed_counts(n_peers, n_as, max_as)
        .into_iter()
        .enumerate()
        .map(|(i, c)| (format!("{prefix}{i}"), c))
        .collect()
}
