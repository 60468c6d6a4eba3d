//! Inter-AS traffic estimation for the random peer-selection policy, with
//! per-AS-size locality savings and cumulative totals over many torrents.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::num::Scalar;

pub type AsId = u32;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("AS size {s_a} exceeds torrent size {s_t}")]
    AsLargerThanTorrent { s_a: u64, s_t: u64 },
    #[error("AS size must be at least 1")]
    EmptyAs,
    #[error("content size must be positive")]
    EmptyContent,
    #[error("torrent {torrent}: AS {as_id} listed twice")]
    DuplicateAs { torrent: String, as_id: AsId },
    #[error("torrent {torrent}: conflicting content sizes {a} and {b}")]
    ContentMismatch { torrent: String, a: u64, b: u64 },
    #[error("savings table is empty")]
    EmptyTable,
    #[error("invalid savings entry for AS size {size}: {reason}")]
    InvalidSaving { size: u64, reason: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Peer counts of one torrent per AS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TorrentProfile {
    pub torrent_id: String,
    /// `(as, S_A)` in ascending AS order.
    pub as_counts: Vec<(AsId, u64)>,
    pub content_size: u64,
}

impl TorrentProfile {
    pub fn new(
        torrent_id: impl Into<String>,
        counts: impl IntoIterator<Item = (AsId, u64)>,
        content_size: u64,
    ) -> Result<Self, EstimatorError> {
        let torrent_id = torrent_id.into();
        if content_size == 0 {
            return Err(EstimatorError::EmptyContent);
        }
        let mut map = BTreeMap::new();
        for (a, n) in counts {
            if n == 0 {
                return Err(EstimatorError::EmptyAs);
            }
            if map.insert(a, n).is_some() {
                return Err(EstimatorError::DuplicateAs { torrent: torrent_id, as_id: a });
            }
        }
        Ok(TorrentProfile { torrent_id, as_counts: map.into_iter().collect(), content_size })
    }

    /// S_T.
    pub fn total_peers(&self) -> u64 {
        self.as_counts.iter().map(|&(_, n)| n).sum()
    }

    /// The AS assumed to host the initial seed: the most populated one, the
    /// lowest AS id on ties.
    pub fn seed_as(&self) -> Option<AsId> {
        self.as_counts
            .iter()
            .fold(None, |best: Option<(AsId, u64)>, &(a, n)| match best {
                Some((_, m)) if m >= n => best,
                _ => Some((a, n)),
            })
            .map(|(a, _)| a)
    }
}

/// Bytes uploaded out of an AS holding `s_a` of the `s_t` peers of a torrent
/// of `content` bytes: (1 − S_A/S_T)·S_A·C.
pub fn model_upload<S: Scalar>(s_a: u64, s_t: u64, content: u64) -> Result<S, EstimatorError> {
    if s_a == 0 {
        return Err(EstimatorError::EmptyAs);
    }
    if s_a > s_t {
        return Err(EstimatorError::AsLargerThanTorrent { s_a, s_t });
    }
    if content == 0 {
        return Err(EstimatorError::EmptyContent);
    }
    let (a, t) = (S::from_count(s_a), S::from_count(s_t));
    Ok((S::one() - a.clone() / t) * a * S::from_count(content))
}

/// Sum of [`model_upload`] over all ASes of a profile, in closed form:
/// C·(S_T − ΣS_A²/S_T).
pub fn model_total<S: Scalar>(p: &TorrentProfile) -> S {
    let s_t = p.total_peers();
    if s_t == 0 {
        return S::zero();
    }
    let sq: u128 = p.as_counts.iter().map(|&(_, n)| u128::from(n) * u128::from(n)).sum();
    let t = S::from_count(s_t);
    S::from_count(p.content_size) * (t.clone() - S::from_bytes(sq) / t)
}

/// Locality savings by AS size. Lookups interpolate linearly in log size
/// between entries and clamp at the ends; size 1 always saves nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct SavingsTable<S> {
    entries: Vec<(u64, S)>,
}

impl<S: Scalar> SavingsTable<S> {
    pub fn new(entries: impl IntoIterator<Item = (u64, S)>) -> Result<Self, EstimatorError> {
        let mut entries: Vec<(u64, S)> = entries.into_iter().collect();
        if entries.is_empty() {
            return Err(EstimatorError::EmptyTable);
        }
        entries.sort_by_key(|e| e.0);
        let mut prev: Option<&(u64, S)> = None;
        for e in &entries {
            let bad = |reason: &str| EstimatorError::InvalidSaving { size: e.0, reason: reason.into() };
            if e.0 == 0 {
                return Err(bad("size must be at least 1"));
            }
            if e.1 < S::zero() || e.1 > S::one() {
                return Err(bad("saving outside [0, 1]"));
            }
            if e.0 == 1 && !e.1.is_zero() {
                return Err(bad("a one-peer AS cannot save traffic"));
            }
            if let Some(p) = prev {
                if p.0 == e.0 {
                    return Err(bad("duplicate size"));
                }
                if e.1 < p.1 {
                    return Err(bad("savings must not decrease with AS size"));
                }
            }
            prev = Some(e);
        }
        Ok(SavingsTable { entries })
    }

    /// Builds a table from noisy measurements, replacing each saving by the
    /// running maximum so the table is nondecreasing, and clamping to [0, 1].
    pub fn from_measurements(points: impl IntoIterator<Item = (u64, S)>) -> Result<Self, EstimatorError> {
        let mut pts: Vec<(u64, S)> = points.into_iter().filter(|p| p.0 > 1).collect();
        pts.sort_by_key(|p| p.0);
        let mut run = S::zero();
        let mut out: Vec<(u64, S)> = Vec::with_capacity(pts.len());
        for (size, s) in pts {
            let s = if s > S::one() { S::one() } else { s };
            run = S::max_of(run, s);
            match out.last_mut() {
                Some(last) if last.0 == size => last.1 = S::max_of(last.1.clone(), run.clone()),
                _ => out.push((size, run.clone())),
            }
        }
        Self::new(out)
    }

    /// A table that saves nothing at any size.
    pub fn zero() -> Self {
        SavingsTable { entries: vec![(1, S::zero())] }
    }

    pub fn entries(&self) -> &[(u64, S)] {
        &self.entries
    }

    pub fn saving(&self, size: u64) -> S {
        if size <= 1 {
            return S::zero();
        }
        let i = self.entries.partition_point(|e| e.0 < size);
        if let Some(e) = self.entries.get(i) {
            if e.0 == size {
                return e.1.clone();
            }
        }
        let hi = match self.entries.get(i) {
            Some(e) => e,
            None => return self.entries.last().expect("nonempty").1.clone(),
        };
        let lo_owned;
        let lo = if i == 0 {
            lo_owned = (1, S::zero());
            &lo_owned
        } else {
            &self.entries[i - 1]
        };
        let w = ((size as f64).ln() - (lo.0 as f64).ln()) / ((hi.0 as f64).ln() - (lo.0 as f64).ln());
        lo.1.clone() + (hi.1.clone() - lo.1.clone()) * S::from_real(w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsEstimate<S> {
    pub as_id: AsId,
    pub peers: u64,
    pub random: S,
    pub locality: S,
}

/// Per-AS traffic of one torrent under the random policy and with savings.
pub fn apply_savings<S: Scalar>(p: &TorrentProfile, table: &SavingsTable<S>) -> Vec<AsEstimate<S>> {
    let s_t = p.total_peers();
    p.as_counts
        .iter()
        .map(|&(as_id, n)| {
            let random: S = model_upload(n, s_t, p.content_size).expect("validated profile");
            let locality = random.clone() * (S::one() - table.saving(n));
            AsEstimate { as_id, peers: n, random, locality }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Totals<S> {
    pub random: S,
    pub locality: S,
    pub ideal: S,
}

impl<S: Scalar> Totals<S> {
    fn zero() -> Self {
        Totals { random: S::zero(), locality: S::zero(), ideal: S::zero() }
    }

    fn add(&mut self, o: &Totals<S>) {
        self.random = self.random.clone() + o.random.clone();
        self.locality = self.locality.clone() + o.locality.clone();
        self.ideal = self.ideal.clone() + o.ideal.clone();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimate {
    Random,
    Locality,
    Ideal,
}

impl<S> Totals<S> {
    pub fn get(&self, which: Estimate) -> &S {
        match which {
            Estimate::Random => &self.random,
            Estimate::Locality => &self.locality,
            Estimate::Ideal => &self.ideal,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CumulativeReport<S> {
    /// Per torrent, in input order.
    pub torrents: Vec<(String, Totals<S>)>,
    pub ases: BTreeMap<AsId, Totals<S>>,
    pub total: Totals<S>,
}

impl<S: Scalar> Default for CumulativeReport<S> {
    fn default() -> Self {
        CumulativeReport { torrents: Vec::new(), ases: BTreeMap::new(), total: Totals::zero() }
    }
}

impl<S: Scalar> CumulativeReport<S> {
    pub fn add_torrent(&mut self, p: &TorrentProfile, table: &SavingsTable<S>) {
        let seed_as = p.seed_as();
        let mut t = Totals::zero();
        for e in apply_savings(p, table) {
            let ideal = if Some(e.as_id) == seed_as { S::zero() } else { S::from_count(p.content_size) };
            let a = Totals { random: e.random, locality: e.locality, ideal };
            t.add(&a);
            self.ases.entry(e.as_id).or_insert_with(Totals::zero).add(&a);
        }
        self.total.add(&t);
        self.torrents.push((p.torrent_id.clone(), t));
    }

    /// Appends `other`; merging reports of consecutive chunks gives the report
    /// of the whole list.
    pub fn merge(mut self, other: CumulativeReport<S>) -> Self {
        for (a, t) in &other.ases {
            self.ases.entry(*a).or_insert_with(Totals::zero).add(t);
        }
        self.total.add(&other.total);
        self.torrents.extend(other.torrents);
        self
    }

    /// Cumulative traffic over torrents sorted by decreasing traffic.
    pub fn torrent_curve(&self, which: Estimate) -> Vec<S> {
        cumulative(self.torrents.iter().map(|(_, t)| t.get(which).clone()).collect())
    }

    /// Cumulative traffic over ASes sorted by decreasing traffic.
    pub fn as_curve(&self, which: Estimate) -> Vec<S> {
        cumulative(self.ases.values().map(|t| t.get(which).clone()).collect())
    }

    /// Share of the total carried by the `k` heaviest torrents.
    pub fn top_torrent_share(&self, k: usize, which: Estimate) -> S {
        let curve = self.torrent_curve(which);
        let total = self.total.get(which).clone();
        if curve.is_empty() || total.is_zero() {
            return S::zero();
        }
        curve[k.min(curve.len()).saturating_sub(1)].clone() / total
    }

    /// Per-torrent rows sorted by decreasing random-policy traffic, with
    /// running totals, byte values rounded to integers.
    pub fn to_csv(&self) -> String {
        let mut order: Vec<usize> = (0..self.torrents.len()).collect();
        order.sort_by(|&a, &b| {
            let (x, y) = (&self.torrents[a].1.random, &self.torrents[b].1.random);
            y.partial_cmp(x).expect("comparable").then(a.cmp(&b))
        });
        let mut out = String::from("torrent_id,random,locality,ideal,cum_random,cum_locality,cum_ideal\n");
        let mut run = Totals::zero();
        for i in order {
            let (id, t) = &self.torrents[i];
            run.add(t);
            let _ = writeln!(
                out,
                "{id},{},{},{},{},{},{}",
                t.random.round_bytes(),
                t.locality.round_bytes(),
                t.ideal.round_bytes(),
                run.random.round_bytes(),
                run.locality.round_bytes(),
                run.ideal.round_bytes()
            );
        }
        let _ = writeln!(
            out,
            "total,{},{},{},,,",
            self.total.random.round_bytes(),
            self.total.locality.round_bytes(),
            self.total.ideal.round_bytes()
        );
        out
    }

    /// Per-AS totals in ascending AS order.
    pub fn as_csv(&self) -> String {
        let mut out = String::from("as_id,random,locality,ideal\n");
        for (a, t) in &self.ases {
            let _ = writeln!(
                out,
                "{a},{},{},{}",
                t.random.round_bytes(),
                t.locality.round_bytes(),
                t.ideal.round_bytes()
            );
        }
        out
    }
}

fn cumulative<S: Scalar>(mut v: Vec<S>) -> Vec<S> {
    v.sort_by(|a, b| b.partial_cmp(a).expect("comparable"));
    let mut run = S::zero();
    v.into_iter()
        .map(|x| {
            run = run.clone() + x;
            run.clone()
        })
        .collect()
}

pub fn aggregate<S: Scalar>(profiles: &[TorrentProfile], table: &SavingsTable<S>) -> CumulativeReport<S> {
    let mut r = CumulativeReport::default();
    for p in profiles {
        r.add_torrent(p, table);
    }
    r
}

// ---- CSV ----

pub const PROFILE_HEADER: &str = "torrent_id,as_id,peer_count,content_bytes";
pub const SAVINGS_HEADER: &str = "as_size,saving";

fn fields(line: &str, n: usize, no: usize) -> Result<Vec<&str>, EstimatorError> {
    let f: Vec<&str> = line.split(',').map(str::trim).collect();
    if f.len() != n {
        return Err(EstimatorError::Parse { line: no, msg: format!("expected {n} fields, got {}", f.len()) });
    }
    Ok(f)
}

fn num<T: std::str::FromStr>(s: &str, what: &str, no: usize) -> Result<T, EstimatorError> {
    s.parse().map_err(|_| EstimatorError::Parse { line: no, msg: format!("bad {what} {s:?}") })
}

fn data_lines<'a>(text: &'a str, header: &str) -> impl Iterator<Item = (usize, &'a str)> + 'a {
    let header = header.to_string();
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(move |(_, l)| !l.is_empty() && !l.starts_with('#') && *l != header)
}

/// Reads profile rows; rows of one torrent need not be contiguous. Torrents
/// come out in order of first appearance.
pub fn read_profiles(text: &str) -> Result<Vec<TorrentProfile>, EstimatorError> {
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, (u64, Vec<(AsId, u64)>)> = BTreeMap::new();
    for (no, line) in data_lines(text, PROFILE_HEADER) {
        let f = fields(line, 4, no)?;
        let id = f[0].to_string();
        let as_id: AsId = num(f[1], "as_id", no)?;
        let n: u64 = num(f[2], "peer_count", no)?;
        let c: u64 = num(f[3], "content_bytes", no)?;
        let entry = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (c, Vec::new())
        });
        if entry.0 != c {
            return Err(EstimatorError::ContentMismatch { torrent: id, a: entry.0, b: c });
        }
        entry.1.push((as_id, n));
    }
    order
        .into_iter()
        .map(|id| {
            let (c, counts) = rows.remove(&id).expect("recorded");
            TorrentProfile::new(id, counts, c)
        })
        .collect()
}

pub fn write_profiles(profiles: &[TorrentProfile]) -> String {
    let mut out = format!("{PROFILE_HEADER}\n");
    for p in profiles {
        for (a, n) in &p.as_counts {
            let _ = writeln!(out, "{},{a},{n},{}", p.torrent_id, p.content_size);
        }
    }
    out
}

/// Parses a plain decimal such as `0.4` or `1e-2` into any scalar. Exact
/// scalars receive the decimal value itself rather than its binary
/// approximation.
pub fn parse_decimal<S: Scalar>(s: &str) -> Option<S> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let (mantissa, exp) = match body.find(['e', 'E']) {
        Some(i) => (&body[..i], body[i + 1..].parse::<i32>().ok()?),
        None => (body, 0),
    };
    let (int, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    let digits = format!("{int}{frac}");
    let scale = exp - frac.len() as i32;
    let ten = S::from_count(10);
    let mut v = S::zero();
    for d in digits.bytes() {
        v = v * ten.clone() + S::from_count(u64::from(d - b'0'));
    }
    for _ in 0..scale.unsigned_abs() {
        v = if scale > 0 { v * ten.clone() } else { v / ten.clone() };
    }
    Some(if neg { S::zero() - v } else { v })
}

pub fn read_savings<S: Scalar>(text: &str) -> Result<SavingsTable<S>, EstimatorError> {
    let mut entries = Vec::new();
    for (no, line) in data_lines(text, SAVINGS_HEADER) {
        let f = fields(line, 2, no)?;
        let size: u64 = num(f[0], "as_size", no)?;
        let s = parse_decimal::<S>(f[1])
            .ok_or_else(|| EstimatorError::Parse { line: no, msg: format!("bad saving {:?}", f[1]) })?;
        entries.push((size, s));
    }
    SavingsTable::new(entries)
}

pub fn write_savings<S: Scalar>(table: &SavingsTable<S>) -> String {
    let mut out = format!("{SAVINGS_HEADER}\n");
    for (size, s) in table.entries() {
        let _ = writeln!(out, "{size},{}", s.approx());
    }
    out
}
