//! Tracker side of the locality policy.
//!
//! The tracker keeps, per ISP, the number of external peers it has handed to
//! that ISP's members (the outgoing inter-ISP connection count) together with
//! the per-peer share of that count, so the count can be given back when a
//! peer leaves. External peers are only handed out while the count is below
//! the limit; the initial seed is exempt in both directions.
//!
//! A response is built from the draw the plain BitTorrent policy would make
//! (`numwant` peers uniformly among all registered peers). The policy then
//! filters the external part of that draw through the per-ISP budget and
//! refills the dropped slots with local peers. While the budget is larger
//! than the draw the response is the BitTorrent draw; once it is scarce, only
//! requesters currently holding no hand-out receive one external peer each.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::ids::{IspId, PeerId};
use crate::rng::{self, SimRng, Stream};
use crate::scenario::{Policy, ScenarioConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Uniform over every peer outside the requester's ISP.
    Random,
    /// Rotate over ISPs, then uniform inside the chosen ISP.
    RoundRobin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    /// Maximum outgoing inter-ISP connections per ISP; `None` is the plain
    /// BitTorrent random policy.
    pub limit: Option<u32>,
    pub selection: Selection,
    pub pm_enabled: bool,
    /// Minimum spacing of PM grants per ISP (T1), seconds.
    pub pm_interval: f64,
    pub announce_interval: f64,
    pub expiry: f64,
    pub numwant: u32,
}

impl TrackerConfig {
    pub fn random_policy() -> Self {
        TrackerConfig {
            limit: None,
            selection: Selection::Random,
            pm_enabled: false,
            pm_interval: 60.0,
            announce_interval: 1800.0,
            expiry: 2700.0,
            numwant: 50,
        }
    }

    pub fn locality(limit: u32) -> Self {
        TrackerConfig {
            limit: Some(limit),
            ..Self::random_policy()
        }
    }

    pub fn from_scenario(cfg: &ScenarioConfig) -> Self {
        let base = TrackerConfig {
            announce_interval: cfg.tracker.announce_interval,
            expiry: cfg.tracker.expiry,
            numwant: cfg.tracker.numwant,
            ..Self::random_policy()
        };
        match &cfg.policy {
            Policy::BittorrentRandom => base,
            Policy::Locality(p) => TrackerConfig {
                limit: Some(p.limit),
                selection: if p.round_robin {
                    Selection::RoundRobin
                } else {
                    Selection::Random
                },
                pm_enabled: p.partition_merging,
                pm_interval: p.t1,
                ..base
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnounceEvent {
    Started,
    Periodic,
    Stopped,
    Completed,
}

impl FromStr for AnnounceEvent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "started" => Ok(AnnounceEvent::Started),
            "periodic" => Ok(AnnounceEvent::Periodic),
            "stopped" => Ok(AnnounceEvent::Stopped),
            "completed" => Ok(AnnounceEvent::Completed),
            other => Err(format!("unknown announce event {other:?}")),
        }
    }
}

impl fmt::Display for AnnounceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnnounceEvent::Started => "started",
            AnnounceEvent::Periodic => "periodic",
            AnnounceEvent::Stopped => "stopped",
            AnnounceEvent::Completed => "completed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnounceRequest {
    pub peer: PeerId,
    pub isp: IspId,
    pub event: AnnounceEvent,
    pub pm_flag: bool,
    pub numwant: u32,
    /// Set once, on the `Started` announce of the original content holder.
    pub initial_seed: bool,
}

impl AnnounceRequest {
    pub fn new(peer: PeerId, isp: IspId, event: AnnounceEvent, numwant: u32) -> Self {
        AnnounceRequest {
            peer,
            isp,
            event,
            pm_flag: false,
            numwant,
            initial_seed: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnnounceResponse {
    pub local_peers: Vec<PeerId>,
    /// Peers outside the requester's ISP. Under the locality policy each of
    /// them was charged to the requester's ISP (or granted through PM).
    pub external_peers: Vec<PeerId>,
    /// The initial seed, when the BitTorrent draw picked it; never charged.
    pub initial_seed: Option<PeerId>,
    pub via_pm: bool,
}

impl AnnounceResponse {
    pub fn is_empty(&self) -> bool {
        self.local_peers.is_empty() && self.external_peers.is_empty() && self.initial_seed.is_none()
    }

    /// Contacts in connection order: external first, then the seed, then local.
    pub fn contacts(&self) -> impl Iterator<Item = PeerId> + '_ {
        self.external_peers
            .iter()
            .copied()
            .chain(self.initial_seed)
            .chain(self.local_peers.iter().copied())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrackerError {
    #[error("peer {0} is not registered; it must announce `started` again")]
    StalePeer(PeerId),
    #[error("peer {peer} announced from ISP {got}, registered in ISP {registered}")]
    IspMismatch { peer: PeerId, registered: IspId, got: IspId },
    #[error("PM flag is only valid on started or periodic announces")]
    InvalidPmFlag,
}

#[derive(Clone, Debug)]
struct Entry {
    isp: IspId,
    last_announce: f64,
    is_seed: bool,
    is_initial_seed: bool,
    handouts: u32,
    pos_all: usize,
    pos_isp: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PmGrant {
    pub time: f64,
    pub isp: IspId,
    pub requester: PeerId,
    pub granted: PeerId,
}

#[derive(Clone, Debug)]
pub struct Tracker {
    cfg: TrackerConfig,
    registry: BTreeMap<PeerId, Entry>,
    all: Vec<PeerId>,
    members: BTreeMap<IspId, Vec<PeerId>>,
    outgoing: BTreeMap<IspId, u32>,
    pm_last_grant: BTreeMap<IspId, f64>,
    rr_last: Option<IspId>,
    rng: SimRng,
    pm_log: Vec<PmGrant>,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig, seed: u64) -> Self {
        Tracker {
            cfg,
            registry: BTreeMap::new(),
            all: Vec::new(),
            members: BTreeMap::new(),
            outgoing: BTreeMap::new(),
            pm_last_grant: BTreeMap::new(),
            rr_last: None,
            rng: rng::stream(seed, Stream::Tracker),
            pm_log: Vec::new(),
        }
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn is_registered(&self, peer: PeerId) -> bool {
        self.registry.contains_key(&peer)
    }

    pub fn registered_count(&self) -> usize {
        self.registry.len()
    }

    pub fn outgoing_count(&self, isp: IspId) -> u32 {
        self.outgoing.get(&isp).copied().unwrap_or(0)
    }

    pub fn handouts(&self, peer: PeerId) -> u32 {
        self.registry.get(&peer).map_or(0, |e| e.handouts)
    }

    pub fn pm_grants(&self) -> &[PmGrant] {
        &self.pm_log
    }

    /// Recomputes every ISP's outgoing count from the per-peer hand-outs of
    /// the registered peers and compares it with the maintained counters.
    pub fn ledger_consistent(&self) -> bool {
        let mut recomputed: BTreeMap<IspId, u32> = BTreeMap::new();
        for e in self.registry.values() {
            *recomputed.entry(e.isp).or_default() += e.handouts;
        }
        let nonzero = |m: &BTreeMap<IspId, u32>| -> BTreeMap<IspId, u32> {
            m.iter().filter(|(_, &v)| v > 0).map(|(k, v)| (*k, *v)).collect()
        };
        nonzero(&recomputed) == nonzero(&self.outgoing)
    }

    pub fn announce(&mut self, req: &AnnounceRequest, now: f64) -> Result<AnnounceResponse, TrackerError> {
        if req.pm_flag && !matches!(req.event, AnnounceEvent::Started | AnnounceEvent::Periodic) {
            return Err(TrackerError::InvalidPmFlag);
        }
        match self.registry.get_mut(&req.peer) {
            Some(e) => {
                if e.isp != req.isp && !e.is_initial_seed {
                    return Err(TrackerError::IspMismatch {
                        peer: req.peer,
                        registered: e.isp,
                        got: req.isp,
                    });
                }
                e.last_announce = now;
            }
            None if req.event == AnnounceEvent::Started => self.register(req, now),
            None => return Err(TrackerError::StalePeer(req.peer)),
        }
        match req.event {
            AnnounceEvent::Stopped => {
                self.depart(req.peer);
                return Ok(AnnounceResponse::default());
            }
            AnnounceEvent::Completed => {
                if let Some(e) = self.registry.get_mut(&req.peer) {
                    e.is_seed = true;
                }
            }
            AnnounceEvent::Started | AnnounceEvent::Periodic => {}
        }
        Ok(self.respond(req, now))
    }

    fn register(&mut self, req: &AnnounceRequest, now: f64) {
        let isp = if req.initial_seed { IspId::SEED } else { req.isp };
        let members = self.members.entry(isp).or_default();
        let entry = Entry {
            isp,
            last_announce: now,
            is_seed: req.initial_seed,
            is_initial_seed: req.initial_seed,
            handouts: 0,
            pos_all: self.all.len(),
            pos_isp: members.len(),
        };
        members.push(req.peer);
        self.all.push(req.peer);
        self.registry.insert(req.peer, entry);
    }

    /// Removes a peer and gives its hand-outs back to its ISP's budget.
    pub fn depart(&mut self, peer: PeerId) -> bool {
        let Some(e) = self.registry.remove(&peer) else {
            return false;
        };
        if e.handouts > 0 {
            let c = self.outgoing.get_mut(&e.isp).expect("counted ISP");
            *c -= e.handouts;
            if *c == 0 {
                self.outgoing.remove(&e.isp);
            }
        }
        self.all.swap_remove(e.pos_all);
        if let Some(&moved) = self.all.get(e.pos_all) {
            self.registry.get_mut(&moved).unwrap().pos_all = e.pos_all;
        }
        let members = self.members.get_mut(&e.isp).unwrap();
        members.swap_remove(e.pos_isp);
        if let Some(&moved) = members.get(e.pos_isp) {
            self.registry.get_mut(&moved).unwrap().pos_isp = e.pos_isp;
        }
        if members.is_empty() {
            self.members.remove(&e.isp);
        }
        true
    }

    /// Drops every peer whose last announce is more than `expiry` seconds old.
    pub fn expire(&mut self, now: f64) -> Vec<PeerId> {
        let expiry = self.cfg.expiry;
        let stale: Vec<PeerId> = self
            .registry
            .iter()
            .filter(|(_, e)| now - e.last_announce > expiry)
            .map(|(p, _)| *p)
            .collect();
        for &p in &stale {
            self.depart(p);
        }
        stale
    }

    /// Uniform sample of up to `k` registered peers other than `requester`.
    fn draw(&mut self, requester: PeerId, k: u32) -> Vec<PeerId> {
        let skip = self.registry.get(&requester).map(|e| e.pos_all);
        let others = self.all.len() - usize::from(skip.is_some());
        let k = (k as usize).min(others);
        if k == 0 {
            return Vec::new();
        }
        index::sample(&mut self.rng, others, k)
            .into_iter()
            .map(|i| match skip {
                Some(s) if i >= s => self.all[i + 1],
                _ => self.all[i],
            })
            .collect()
    }

    fn respond(&mut self, req: &AnnounceRequest, now: f64) -> AnnounceResponse {
        let entry = &self.registry[&req.peer];
        let (isp, requester_is_seed) = (entry.isp, entry.is_initial_seed);
        let drawn = self.draw(req.peer, req.numwant);
        let mut resp = AnnounceResponse::default();

        // The initial seed picks its neighbours with the BitTorrent policy.
        if requester_is_seed {
            resp.external_peers = drawn;
            return resp;
        }

        let mut want_external = 0u32;
        let mut drawn_external = Vec::new();
        for p in drawn {
            let e = &self.registry[&p];
            if e.is_initial_seed {
                resp.initial_seed = Some(p);
            } else if e.isp == isp {
                resp.local_peers.push(p);
            } else {
                want_external += 1;
                drawn_external.push(p);
            }
        }

        let Some(limit) = self.cfg.limit else {
            resp.external_peers = drawn_external;
            return resp;
        };

        if req.pm_flag && self.cfg.pm_enabled {
            if let Some(p) = self.pm_grant(isp, req.peer, now) {
                resp.external_peers.push(p);
                resp.via_pm = true;
            }
        } else {
            let remaining = limit.saturating_sub(self.outgoing_count(isp));
            let grant = if remaining >= want_external {
                want_external
            } else if remaining > 0 && self.registry[&req.peer].handouts == 0 {
                1
            } else {
                0
            };
            let mut attempts = 0;
            while (resp.external_peers.len() as u32) < grant && attempts < 4 * grant + 8 {
                attempts += 1;
                match self.select_external(isp) {
                    Some(p) if !resp.external_peers.contains(&p) => resp.external_peers.push(p),
                    Some(_) => {}
                    None => break,
                }
            }
            let granted = resp.external_peers.len() as u32;
            if granted > 0 {
                *self.outgoing.entry(isp).or_default() += granted;
                self.registry.get_mut(&req.peer).unwrap().handouts += granted;
            }
        }

        // Refill the slots the budget took away with more local peers.
        let target = (req.numwant as usize)
            .saturating_sub(resp.external_peers.len() + usize::from(resp.initial_seed.is_some()));
        if resp.local_peers.len() < target {
            let members = &self.members[&isp];
            let pool: Vec<PeerId> = members
                .iter()
                .copied()
                .filter(|&p| p != req.peer && !resp.local_peers.contains(&p))
                .collect();
            let extra = (target - resp.local_peers.len()).min(pool.len());
            for i in index::sample(&mut self.rng, pool.len(), extra) {
                resp.local_peers.push(pool[i]);
            }
        }
        resp
    }

    /// One peer outside `requester_isp` (the initial seed is never a
    /// candidate), or `None` when no such peer is registered.
    pub fn select_external(&mut self, requester_isp: IspId) -> Option<PeerId> {
        match self.cfg.selection {
            Selection::Random => {
                let total: usize = self
                    .members
                    .iter()
                    .filter(|(&i, _)| i != requester_isp && !i.is_seed_pseudo())
                    .map(|(_, m)| m.len())
                    .sum();
                if total == 0 {
                    return None;
                }
                let mut k = self.rng.gen_range(0..total);
                for (&i, m) in &self.members {
                    if i == requester_isp || i.is_seed_pseudo() {
                        continue;
                    }
                    if k < m.len() {
                        return Some(m[k]);
                    }
                    k -= m.len();
                }
                unreachable!("index within total")
            }
            Selection::RoundRobin => {
                let eligible = |i: &IspId| *i != requester_isp && !i.is_seed_pseudo();
                let after = self.rr_last.map_or(
                    self.members.range(..).find(|(i, _)| eligible(i)),
                    |last| {
                        self.members
                            .range((std::ops::Bound::Excluded(last), std::ops::Bound::Unbounded))
                            .find(|(i, _)| eligible(i))
                    },
                );
                let (isp, members) = match after {
                    Some((i, m)) => (*i, m),
                    None => {
                        let (i, m) = self.members.iter().find(|(i, _)| eligible(i))?;
                        (*i, m)
                    }
                };
                let peer = members[self.rng.gen_range(0..members.len())];
                self.rr_last = Some(isp);
                Some(peer)
            }
        }
    }

    /// Partition-merging grant: at most one external peer per ISP every
    /// `pm_interval` seconds. Grants are not charged to the outgoing budget.
    pub fn pm_grant(&mut self, requester_isp: IspId, requester: PeerId, now: f64) -> Option<PeerId> {
        if !self.cfg.pm_enabled {
            return None;
        }
        if let Some(&last) = self.pm_last_grant.get(&requester_isp) {
            if now - last < self.cfg.pm_interval {
                return None;
            }
        }
        // once every other ISP has drained only the initial seed can repair
        let granted = self
            .select_external(requester_isp)
            .or_else(|| self.members.get(&IspId::SEED).and_then(|m| m.first().copied()))?;
        self.pm_last_grant.insert(requester_isp, now);
        self.pm_log.push(PmGrant {
            time: now,
            isp: requester_isp,
            requester,
            granted,
        });
        Some(granted)
    }
}

/// One line of a tracker trace: `time peer isp event pm_flag`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceLine {
    pub time: f64,
    pub peer: PeerId,
    pub isp: IspId,
    pub event: AnnounceEvent,
    pub pm_flag: bool,
}

impl fmt::Display for TraceLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            self.time,
            self.peer.0,
            self.isp.0,
            self.event,
            u8::from(self.pm_flag)
        )
    }
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceLine>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(n, l)| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let bad = |what: &str| format!("line {}: {what}: {l:?}", n + 1);
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            Ok(TraceLine {
                time: f[0].parse().map_err(|_| bad("bad time"))?,
                peer: PeerId(f[1].parse().map_err(|_| bad("bad peer"))?),
                isp: IspId(f[2].parse().map_err(|_| bad("bad isp"))?),
                event: f[3].parse().map_err(|e: String| bad(&e))?,
                pm_flag: match f[4] {
                    "0" | "false" => false,
                    "1" | "true" => true,
                    _ => return Err(bad("bad pm flag")),
                },
            })
        })
        .collect()
}

/// Replays a trace, expiring stale peers before each line.
pub fn replay(tracker: &mut Tracker, trace: &[TraceLine]) -> Vec<Result<AnnounceResponse, TrackerError>> {
    let numwant = tracker.cfg.numwant;
    trace
        .iter()
        .map(|l| {
            tracker.expire(l.time);
            let mut req = AnnounceRequest::new(l.peer, l.isp, l.event, numwant);
            req.pm_flag = l.pm_flag;
            tracker.announce(&req, l.time)
        })
        .collect()
}
