use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;

use ordered_float::OrderedFloat;
use rand::Rng;
use thiserror::Error;

use super::bitfield::Bitfield;
use super::choke::{self, Candidate};
use super::piece::select_piece;
use super::pm::{PmOutcome, PmTimer};
use super::rates::ClockGroup;
use crate::ids::{IspId, PeerId};
use crate::metrics::{CompletionRecord, TransferLedger};
use crate::rng::{self, SimRng, Stream};
use crate::scenario::{PeerSet, ScenarioConfig, ScenarioError};
use crate::tracker::{AnnounceEvent, AnnounceRequest, AnnounceResponse, PmGrant, Tracker, TrackerConfig};

const SWEEP_INTERVAL: f64 = 300.0;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Record one text line per processed event.
    pub trace: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOutput {
    pub ledger: TransferLedger,
    pub completions: Vec<CompletionRecord>,
    pub end_time: f64,
    pub pm_grants: Vec<PmGrant>,
    /// Peers removed by a forced partition.
    pub crashed: Vec<PeerId>,
    pub trace: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StallDiagnostic {
    pub time: f64,
    pub window: f64,
    /// ISPs with leechers and no completed piece within the window.
    pub stalled: Vec<IspId>,
    /// ISPs whose leechers are only connected to peers of the same ISP.
    pub isolated: Vec<IspId>,
    pub completed: usize,
    pub pm_grants: usize,
}

impl fmt::Display for StallDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |v: &[IspId]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
        write!(
            f,
            "swarm stalled at t={:.1}s: no piece completed for {:.0}s in ISPs [{}]; partitioned ISPs [{}]; {} leechers completed",
            self.time,
            self.window,
            list(&self.stalled),
            list(&self.isolated),
            self.completed
        )
    }
}

#[derive(Debug, Error)]
pub enum SwarmError {
    #[error(transparent)]
    Invalid(#[from] ScenarioError),
    #[error("{0}")]
    Stall(Box<StallDiagnostic>),
}

/// Simulates the scenario until every leecher of both churn sets has
/// completed and left.
pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput, SwarmError> {
    run_with(cfg, &RunOptions::default())
}

pub fn run_with(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunOutput, SwarmError> {
    cfg.validate()?;
    let mut e = Engine::new(cfg, opts);
    e.run()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Pending,
    Leecher,
    Seed,
    InitialSeed,
    Gone,
}

#[derive(Clone, Debug)]
struct Link {
    other: u32,
    /// Index of the mirror link in the other peer.
    rev: u32,
    /// This side chokes the other.
    choking: bool,
    /// Pieces the other side has and this side lacks.
    useful: u32,
    /// Settled bytes received from the other side.
    recv: f64,
    mark: f64,
    /// Transfer from this side to the other.
    upload: Option<u32>,
    since: f64,
}

#[derive(Clone, Debug)]
struct Peer {
    id: u32,
    isp: IspId,
    rate: f64,
    max_upload: u64,
    arrival: f64,
    role: Role,
    have: Bitfield,
    n_have: u32,
    in_flight: Bitfield,
    partial: Vec<(u32, u64)>,
    avail: Vec<u16>,
    links: Vec<Link>,
    uploads: Vec<u32>,
    optimistic: Option<PeerId>,
    rounds: u32,
    seed_cursor: Option<PeerId>,
    announce_gen: u64,
    next_announce: f64,
    last_announce: f64,
    pm: Option<PmTimer>,
    pm_gen: u64,
    pm_at: f64,
}

impl Peer {
    fn leecher(&self) -> bool {
        self.role == Role::Leecher
    }

    fn seedlike(&self) -> bool {
        matches!(self.role, Role::Seed | Role::InitialSeed)
    }

    fn active(&self) -> bool {
        matches!(self.role, Role::Leecher | Role::Seed | Role::InitialSeed)
    }

    fn link_to(&self, other: u32) -> Option<usize> {
        self.links.iter().position(|l| l.other == other)
    }

    fn partial_bytes(&self, piece: u32) -> u64 {
        self.partial.iter().find(|(p, _)| *p == piece).map_or(0, |x| x.1)
    }
}

#[derive(Clone, Debug)]
struct Transfer {
    src: u32,
    dst: u32,
    piece: u32,
    need: u64,
    done: f64,
    v0: f64,
    rate: f64,
    group: u32,
    gen: u64,
    live: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum What {
    Arrival(u32),
    Announce(u32, u64),
    Choke(u32),
    GroupHead(u32, u64),
    Pm(u32, u64),
    Depart(u32),
    Partition(u32),
    Sweep,
    StallCheck,
}

impl What {
    fn rank(&self) -> (u8, u32) {
        match *self {
            What::Arrival(p) => (0, p),
            What::Announce(p, _) => (1, p),
            What::Choke(p) => (2, p),
            What::GroupHead(g, _) => (3, g),
            What::Pm(p, _) => (4, p),
            What::Depart(p) => (5, p),
            What::Partition(i) => (6, i),
            What::Sweep => (7, 0),
            What::StallCheck => (8, 0),
        }
    }

    fn label(&self) -> String {
        match *self {
            What::Arrival(p) => format!("arrival {p}"),
            What::Announce(p, _) => format!("announce_due {p}"),
            What::Choke(p) => format!("choke_round {p}"),
            What::GroupHead(g, _) => format!("block_complete group={g}"),
            What::Pm(p, _) => format!("pm_check {p}"),
            What::Depart(p) => format!("departure {p}"),
            What::Partition(i) => format!("partition isp={i}"),
            What::Sweep => "tracker_expiry".into(),
            What::StallCheck => "stall_check".into(),
        }
    }
}

type QueueKey = (OrderedFloat<f64>, u8, u32, u64);

struct Engine<'a> {
    cfg: &'a ScenarioConfig,
    n_pieces: u32,
    block: u64,
    slots: usize,
    max_peer_set: usize,
    max_initiate: usize,
    min_peers: usize,
    numwant: u32,
    optimistic_every: u32,
    pm_t0: Option<f64>,
    stall_window: f64,
    n_leechers: u32,
    seed: u32,
    peers: Vec<Peer>,
    counterpart: Vec<Option<u32>>,
    transfers: Vec<Transfer>,
    free: Vec<u32>,
    groups: Vec<ClockGroup>,
    dirty: Vec<u32>,
    queue: BinaryHeap<Reverse<(QueueKey, What)>>,
    seq: u64,
    tracker: Tracker,
    rng: SimRng,
    now: f64,
    out: RunOutput,
    remaining: u32,
    isp_active: Vec<u32>,
    isp_progress: Vec<f64>,
    trace: bool,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a ScenarioConfig, opts: &RunOptions) -> Self {
        let n_pieces = cfg.n_pieces();
        let specs = cfg.peers();
        let seed_spec = cfg.initial_seed();
        let n_isps = cfg.n_isps() as usize;
        let mut peers: Vec<Peer> = specs
            .iter()
            .chain(std::iter::once(&seed_spec))
            .map(|s| Peer {
                id: s.peer_id.0,
                isp: s.isp_id,
                rate: s.max_upload as f64,
                max_upload: s.max_upload,
                arrival: s.arrival_time,
                role: Role::Pending,
                have: Bitfield::new(n_pieces),
                n_have: 0,
                in_flight: Bitfield::new(n_pieces),
                partial: Vec::new(),
                avail: Vec::new(),
                links: Vec::new(),
                uploads: Vec::new(),
                optimistic: None,
                rounds: 0,
                seed_cursor: None,
                announce_gen: 0,
                next_announce: f64::INFINITY,
                last_announce: f64::NEG_INFINITY,
                pm: None,
                pm_gen: 0,
                pm_at: f64::INFINITY,
            })
            .collect();
        let seed = seed_spec.peer_id.0;
        peers[seed as usize].have = Bitfield::full(n_pieces);
        peers[seed as usize].n_have = n_pieces;

        let mut counterpart = vec![None; peers.len()];
        if cfg.replacement_churn() {
            for s in specs.iter().filter(|s| s.set_index == PeerSet::Second) {
                let k = s.peer_id.0 - cfg.torrent_size;
                if let Some(c) = counterpart.get_mut((k % cfg.torrent_size.max(1)) as usize) {
                    if c.is_none() {
                        *c = Some(s.peer_id.0);
                    }
                }
            }
        }

        let cap = cfg.egress_cap.map_or(f64::INFINITY, |c| c as f64);
        let mut groups = vec![ClockGroup::new(f64::INFINITY)];
        groups.extend((0..n_isps).map(|_| ClockGroup::new(cap)));

        let c = &cfg.client;
        Engine {
            cfg,
            n_pieces,
            block: c.block_size,
            slots: c.unchoke_slots as usize,
            max_peer_set: c.max_peer_set as usize,
            max_initiate: c.max_initiate as usize,
            min_peers: c.min_peers as usize,
            numwant: cfg.tracker.numwant,
            optimistic_every: ((c.optimistic_interval / c.choke_interval).round() as u32).max(1),
            pm_t0: cfg.policy.locality().filter(|p| p.partition_merging).map(|p| p.t0),
            stall_window: cfg.stall_window(),
            n_leechers: specs.len() as u32,
            seed,
            peers,
            counterpart,
            transfers: Vec::new(),
            free: Vec::new(),
            groups,
            dirty: Vec::new(),
            queue: BinaryHeap::new(),
            seq: 0,
            tracker: Tracker::new(TrackerConfig::from_scenario(cfg), cfg.rng_seed),
            rng: rng::stream(cfg.rng_seed, Stream::Swarm),
            now: 0.0,
            out: RunOutput::default(),
            remaining: specs.len() as u32,
            isp_active: vec![0; n_isps],
            isp_progress: vec![0.0; n_isps],
            trace: opts.trace,
        }
    }

    fn push(&mut self, time: f64, what: What) {
        let (rank, subject) = what.rank();
        self.seq += 1;
        self.queue.push(Reverse(((OrderedFloat(time), rank, subject, self.seq), what)));
    }

    fn piece_len(&self, piece: u32) -> u64 {
        let start = u64::from(piece) * self.cfg.piece_size;
        self.cfg.piece_size.min(self.cfg.content_size - start)
    }

    fn run(&mut self) -> Result<RunOutput, SwarmError> {
        if self.n_leechers == 0 {
            return Ok(std::mem::take(&mut self.out));
        }
        for i in 0..self.n_leechers as usize {
            let p = &self.peers[i];
            let deferred = self.cfg.replacement_churn() && i as u32 >= self.cfg.torrent_size;
            if !deferred {
                let t = p.arrival;
                self.push(t, What::Arrival(i as u32));
            }
        }
        self.push(0.0, What::Arrival(self.seed));
        for part in &self.cfg.partitions {
            self.push(part.at, What::Partition(part.isp));
        }
        self.push(SWEEP_INTERVAL, What::Sweep);
        let check = self.stall_check_interval();
        self.push(check, What::StallCheck);

        while let Some(Reverse(((t, ..), what))) = self.queue.pop() {
            self.now = t.0;
            if self.trace {
                let line = format!("{:.6} {}", self.now, what.label());
                self.out.trace.push(line);
            }
            match what {
                What::Arrival(p) => self.arrive(p),
                What::Announce(p, gen) => self.periodic_announce(p, gen),
                What::Choke(p) => self.choke_round(p),
                What::GroupHead(g, gen) => self.group_head(g, gen),
                What::Pm(p, gen) => self.pm_check(p, gen),
                What::Depart(p) => self.depart(p),
                What::Partition(isp) => self.partition(IspId(isp)),
                What::Sweep => {
                    self.tracker.expire(self.now);
                    self.push(self.now + SWEEP_INTERVAL, What::Sweep);
                }
                What::StallCheck => {
                    if let Some(diag) = self.stall_diagnostic() {
                        return Err(SwarmError::Stall(Box::new(diag)));
                    }
                    self.push(self.now + check, What::StallCheck);
                }
            }
            self.flush_groups();
            if self.remaining == 0 {
                break;
            }
        }
        self.out.end_time = self.now;
        self.out.pm_grants = self.tracker.pm_grants().to_vec();
        Ok(std::mem::take(&mut self.out))
    }

    fn stall_check_interval(&self) -> f64 {
        (self.stall_window / 4.0).clamp(1.0, 60.0)
    }

    // ---- tracker interaction ----

    fn announce(&mut self, p: u32, event: AnnounceEvent, pm_flag: bool) -> AnnounceResponse {
        let peer = &self.peers[p as usize];
        // ask only for as many contacts as the client can still initiate
        let numwant = match event {
            AnnounceEvent::Completed | AnnounceEvent::Stopped => 0,
            _ => self.numwant.min(self.max_initiate.saturating_sub(peer.links.len()) as u32),
        };
        let mut req = AnnounceRequest::new(PeerId(p), peer.isp, event, numwant);
        req.pm_flag = pm_flag;
        req.initial_seed = peer.role == Role::InitialSeed;
        let now = self.now;
        self.peers[p as usize].last_announce = now;
        match self.tracker.announce(&req, now) {
            Ok(r) => r,
            // expired while alive: register again
            Err(_) => {
                req.event = AnnounceEvent::Started;
                req.pm_flag = false;
                self.tracker.announce(&req, now).unwrap_or_default()
            }
        }
    }

    fn connect_contacts(&mut self, p: u32, resp: &AnnounceResponse) {
        for q in resp.contacts() {
            let granted = resp.via_pm && resp.external_peers.contains(&q);
            self.connect(p, q.0, granted);
        }
    }

    fn schedule_announce(&mut self, p: u32, at: f64) {
        let peer = &mut self.peers[p as usize];
        peer.announce_gen += 1;
        peer.next_announce = at;
        let gen = peer.announce_gen;
        self.push(at, What::Announce(p, gen));
    }

    fn periodic_announce(&mut self, p: u32, gen: u64) {
        let peer = &self.peers[p as usize];
        if !peer.active() || peer.announce_gen != gen {
            return;
        }
        let resp = self.announce(p, AnnounceEvent::Periodic, false);
        self.connect_contacts(p, &resp);
        let next = self.now + self.cfg.tracker.announce_interval;
        self.schedule_announce(p, next);
    }

    fn maybe_early_announce(&mut self, p: u32) {
        let peer = &self.peers[p as usize];
        if !peer.leecher() || peer.links.len() >= self.min_peers {
            return;
        }
        let at = self.now.max(peer.last_announce + self.cfg.client.min_reannounce);
        if at < peer.next_announce {
            self.schedule_announce(p, at);
        }
    }

    // ---- lifecycle ----

    fn arrive(&mut self, p: u32) {
        let now = self.now;
        let n = self.n_pieces as usize;
        let peer = &mut self.peers[p as usize];
        if peer.role != Role::Pending {
            return;
        }
        if p == self.seed {
            peer.role = Role::InitialSeed;
        } else {
            peer.role = Role::Leecher;
            peer.arrival = now;
            peer.avail = vec![0; n];
            let i = peer.isp.index();
            if self.isp_active[i] == 0 {
                self.isp_progress[i] = now;
            }
            self.isp_active[i] += 1;
            if let Some(t0) = self.pm_t0 {
                let timer = PmTimer::new(t0, now, &mut self.rng);
                let at = timer.deadline();
                let peer = &mut self.peers[p as usize];
                peer.pm = Some(timer);
                peer.pm_gen += 1;
                peer.pm_at = at;
                let gen = peer.pm_gen;
                self.push(at, What::Pm(p, gen));
            }
        }
        let resp = self.announce(p, AnnounceEvent::Started, false);
        self.connect_contacts(p, &resp);
        self.schedule_announce(p, now + self.cfg.tracker.announce_interval);
        let phase = self.rng.gen_range(0.0..self.cfg.client.choke_interval);
        self.push(now + phase, What::Choke(p));
    }

    fn complete(&mut self, d: u32) {
        let now = self.now;
        let peer = &mut self.peers[d as usize];
        peer.role = Role::Seed;
        peer.avail = Vec::new();
        peer.partial.clear();
        peer.pm = None;
        peer.pm_gen += 1;
        let record = CompletionRecord {
            peer: PeerId(d),
            arrival_time: peer.arrival,
            completion_time: now,
            max_upload: peer.max_upload,
        };
        let isp = peer.isp.index();
        self.isp_active[isp] -= 1;
        self.out.completions.push(record);
        self.announce(d, AnnounceEvent::Completed, false);
        let mut i = 0;
        while i < self.peers[d as usize].links.len() {
            let other = self.peers[d as usize].links[i].other;
            if self.peers[other as usize].seedlike() {
                self.disconnect(d, other);
            } else {
                i += 1;
            }
        }
        self.push(now + self.cfg.seed_linger, What::Depart(d));
        if let Some(next) = self.counterpart[d as usize] {
            self.push(now, What::Arrival(next));
        }
    }

    fn depart(&mut self, p: u32) {
        if self.peers[p as usize].role != Role::Seed {
            return;
        }
        self.announce(p, AnnounceEvent::Stopped, false);
        self.drop_all_links(p);
        self.peers[p as usize].role = Role::Gone;
        self.remaining -= 1;
    }

    fn drop_all_links(&mut self, p: u32) {
        while let Some(l) = self.peers[p as usize].links.last() {
            let other = l.other;
            self.disconnect(p, other);
        }
    }

    /// Severs every inter-ISP connection of `isp`; the members holding them
    /// vanish without telling the tracker.
    fn partition(&mut self, isp: IspId) {
        let victims: Vec<u32> = self
            .peers
            .iter()
            .filter(|p| p.isp == isp && matches!(p.role, Role::Leecher | Role::Seed))
            .filter(|p| p.links.iter().any(|l| self.peers[l.other as usize].isp != isp))
            .map(|p| p.id)
            .collect();
        for v in victims {
            if self.peers[v as usize].leecher() {
                self.isp_active[isp.index()] -= 1;
            }
            self.drop_all_links(v);
            let peer = &mut self.peers[v as usize];
            peer.role = Role::Gone;
            peer.pm_gen += 1;
            self.remaining -= 1;
            self.out.crashed.push(PeerId(v));
        }
    }

    // ---- connections ----

    fn connect(&mut self, a: u32, b: u32, pm_grant: bool) -> bool {
        if a == b {
            return false;
        }
        let (pa, pb) = (&self.peers[a as usize], &self.peers[b as usize]);
        if !pa.active() || !pb.active() || (pa.seedlike() && pb.seedlike()) || pa.link_to(b).is_some() {
            return false;
        }
        // partition repairs are accepted even by a full peer set
        let cap_a = if pm_grant { self.max_peer_set } else { self.max_initiate };
        if pa.links.len() >= cap_a || (pb.links.len() >= self.max_peer_set && !pm_grant) {
            return false;
        }
        let useful_ab = if pa.leecher() { pb.have.count_missing_from(&pa.have) } else { 0 };
        let useful_ba = if pb.leecher() { pa.have.count_missing_from(&pb.have) } else { 0 };
        let (ia, ib) = (pa.links.len() as u32, pb.links.len() as u32);
        let now = self.now;
        let link = |other: u32, rev: u32, useful: u32| Link {
            other,
            rev,
            choking: true,
            useful,
            recv: 0.0,
            mark: 0.0,
            upload: None,
            since: now,
        };
        self.peers[a as usize].links.push(link(b, ib, useful_ab));
        self.peers[b as usize].links.push(link(a, ia, useful_ba));
        self.add_availability(a, b, 1);
        self.add_availability(b, a, 1);
        if useful_ab > 0 {
            self.observe_needed(a);
            self.interest_gained(a, ia as usize);
        }
        if useful_ba > 0 {
            self.observe_needed(b);
            self.interest_gained(b, ib as usize);
        }
        true
    }

    /// Adds (or removes) `from`'s pieces to `to`'s neighborhood counts.
    fn add_availability(&mut self, to: u32, from: u32, sign: i32) {
        if !self.peers[to as usize].leecher() {
            return;
        }
        let ones: Vec<u32> = self.peers[from as usize].have.ones().collect();
        let avail = &mut self.peers[to as usize].avail;
        for p in ones {
            let c = &mut avail[p as usize];
            *c = if sign > 0 { *c + 1 } else { c.saturating_sub(1) };
        }
    }

    fn disconnect(&mut self, a: u32, b: u32) {
        let Some(ia) = self.peers[a as usize].link_to(b) else {
            return;
        };
        let ib = self.peers[a as usize].links[ia].rev as usize;
        self.peers[a as usize].links[ia].choking = true;
        self.peers[b as usize].links[ib].choking = true;
        if let Some(t) = self.peers[a as usize].links[ia].upload {
            self.finish(t, true);
        }
        if let Some(t) = self.peers[b as usize].links[ib].upload {
            self.finish(t, true);
        }
        // an abort that turns out complete can finish the download and drop the link
        let Some(ia) = self.peers[a as usize].link_to(b) else {
            return;
        };
        let ib = self.peers[a as usize].links[ia].rev as usize;
        self.add_availability(a, b, -1);
        self.add_availability(b, a, -1);
        self.remove_link(a, ia);
        self.remove_link(b, ib);
        for (x, y) in [(a, b), (b, a)] {
            let peer = &mut self.peers[x as usize];
            if peer.optimistic == Some(PeerId(y)) {
                peer.optimistic = None;
            }
        }
        self.maybe_early_announce(a);
        self.maybe_early_announce(b);
    }

    fn remove_link(&mut self, p: u32, i: usize) {
        let links = &mut self.peers[p as usize].links;
        links.swap_remove(i);
        if let Some(moved) = links.get(i) {
            let (o, r) = (moved.other as usize, moved.rev as usize);
            self.peers[o].links[r].rev = i as u32;
        }
    }

    // ---- interest and choking ----

    fn observe_needed(&mut self, p: u32) {
        if let Some(pm) = self.peers[p as usize].pm.as_mut() {
            pm.observe_needed();
        }
    }

    /// Peer `x` became interested in the neighbor behind link `li`.
    fn interest_gained(&mut self, x: u32, li: usize) {
        let l = &self.peers[x as usize].links[li];
        let (y, rev) = (l.other, l.rev as usize);
        let py = &self.peers[y as usize];
        if !py.links[rev].choking {
            self.try_start(y, rev);
        } else if self.unchoked_count(y) < self.slots {
            self.unchoke(y, rev);
        }
    }

    fn unchoked_count(&self, p: u32) -> usize {
        self.peers[p as usize].links.iter().filter(|l| !l.choking).count()
    }

    fn is_interested_in(&self, x: u32, li: usize) -> bool {
        let peer = &self.peers[x as usize];
        peer.leecher() && peer.links[li].useful > 0
    }

    fn unchoke(&mut self, u: u32, li: usize) {
        let link = &mut self.peers[u as usize].links[li];
        link.choking = false;
        link.since = self.now;
        self.try_start(u, li);
    }

    fn choke(&mut self, u: u32, li: usize) {
        let link = &mut self.peers[u as usize].links[li];
        link.choking = true;
        if let Some(t) = link.upload {
            self.finish(t, true);
        }
    }

    fn choke_round(&mut self, p: u32) {
        if !self.peers[p as usize].active() {
            return;
        }
        let now = self.now;
        self.push(now + self.cfg.client.choke_interval, What::Choke(p));
        let peer = &mut self.peers[p as usize];
        peer.rounds += 1;
        let rotate = peer.rounds.is_multiple_of(self.optimistic_every);
        let n = peer.links.len();
        let mut interested: Vec<(usize, PeerId)> = Vec::new();
        for i in 0..n {
            let l = &self.peers[p as usize].links[i];
            if self.is_interested_in(l.other, l.rev as usize) {
                interested.push((i, PeerId(l.other)));
            }
        }

        let keep: Vec<PeerId> = if self.peers[p as usize].leecher() {
            let cands: Vec<Candidate> = interested
                .iter()
                .map(|&(i, peer)| Candidate {
                    peer,
                    rate: self.received(p, i) - self.peers[p as usize].links[i].mark,
                })
                .collect();
            let current = self.peers[p as usize].optimistic;
            let u = choke::leecher_unchoke(&cands, self.slots, current, rotate, &mut self.rng);
            self.peers[p as usize].optimistic = u.optimistic;
            u.regular.into_iter().chain(u.optimistic).collect()
        } else {
            let mut ids: Vec<PeerId> = interested.iter().map(|x| x.1).collect();
            ids.sort();
            let current: Vec<(PeerId, f64)> = self.peers[p as usize]
                .links
                .iter()
                .filter(|l| !l.choking)
                .map(|l| (PeerId(l.other), l.since))
                .collect();
            let mut cursor = self.peers[p as usize].seed_cursor;
            let out = choke::seed_unchoke(&ids, &current, self.slots, rotate, &mut cursor);
            self.peers[p as usize].seed_cursor = cursor;
            out
        };

        // choking can finish a piece and complete a neighbor, which may drop links
        let others: Vec<u32> = self.peers[p as usize].links.iter().map(|l| l.other).collect();
        for &o in &others {
            if let Some(i) = self.peers[p as usize].link_to(o) {
                if !self.peers[p as usize].links[i].choking && !keep.contains(&PeerId(o)) {
                    self.choke(p, i);
                }
            }
        }
        for &o in &others {
            if let Some(i) = self.peers[p as usize].link_to(o) {
                if self.peers[p as usize].links[i].choking && keep.contains(&PeerId(o)) {
                    self.unchoke(p, i);
                }
            }
        }
        for i in 0..self.peers[p as usize].links.len() {
            let r = self.received(p, i);
            self.peers[p as usize].links[i].mark = r;
        }
    }

    /// Bytes received over link `i`, including the in-flight transfer.
    fn received(&self, p: u32, i: usize) -> f64 {
        let l = &self.peers[p as usize].links[i];
        let inflight = self.peers[l.other as usize].links[l.rev as usize]
            .upload
            .map_or(0.0, |t| self.progress(t));
        l.recv + inflight
    }

    fn progress(&self, t: u32) -> f64 {
        let tr = &self.transfers[t as usize];
        let v = self.groups[tr.group as usize].virtual_at(self.now);
        (tr.done + tr.rate * (v - tr.v0)).min(tr.need as f64)
    }

    // ---- transfers ----

    fn group_for(&self, src: IspId, dst: IspId) -> u32 {
        if self.cfg.egress_cap.is_some() && src != dst && !src.is_seed_pseudo() {
            1 + src.0
        } else {
            0
        }
    }

    fn try_start(&mut self, u: u32, li: usize) {
        let l = &self.peers[u as usize].links[li];
        if l.choking || l.upload.is_some() {
            return;
        }
        let (d, rev) = (l.other, l.rev as usize);
        let pd = &self.peers[d as usize];
        if !pd.leecher() || pd.links[rev].useful == 0 {
            return;
        }
        let partial: Vec<u32> = pd.partial.iter().map(|x| x.0).collect();
        let pu = &self.peers[u as usize];
        let Some(piece) = select_piece(&pd.have, &pu.have, &pd.in_flight, &partial, &pd.avail, &mut self.rng) else {
            return;
        };
        let need = self.piece_len(piece) - pd.partial_bytes(piece);
        let group = self.group_for(pu.isp, pd.isp);
        self.peers[d as usize].in_flight.set(piece);
        let g = &mut self.groups[group as usize];
        g.advance(self.now);
        g.add(0.0);
        let tr = Transfer {
            src: u,
            dst: d,
            piece,
            need,
            done: 0.0,
            v0: g.v,
            rate: 0.0,
            group,
            gen: 0,
            live: true,
        };
        let t = match self.free.pop() {
            Some(t) => {
                let gen = self.transfers[t as usize].gen + 1;
                self.transfers[t as usize] = Transfer { gen, ..tr };
                t
            }
            None => {
                self.transfers.push(tr);
                self.transfers.len() as u32 - 1
            }
        };
        self.peers[u as usize].links[li].upload = Some(t);
        self.peers[u as usize].uploads.push(t);
        self.reallocate(u);
    }

    fn reallocate(&mut self, u: u32) {
        let peer = &self.peers[u as usize];
        if peer.uploads.is_empty() {
            return;
        }
        let rate = peer.rate / peer.uploads.len() as f64;
        for k in 0..self.peers[u as usize].uploads.len() {
            let t = self.peers[u as usize].uploads[k];
            self.set_rate(t, rate);
        }
    }

    fn set_rate(&mut self, t: u32, rate: f64) {
        let tr = &mut self.transfers[t as usize];
        if tr.rate == rate {
            return;
        }
        let g = &mut self.groups[tr.group as usize];
        g.advance(self.now);
        tr.done = (tr.done + tr.rate * (g.v - tr.v0)).min(tr.need as f64);
        tr.v0 = g.v;
        g.nominal += rate - tr.rate;
        tr.rate = rate;
        tr.gen += 1;
        let vkey = g.v + (tr.need as f64 - tr.done) / rate;
        g.heap.push(Reverse((OrderedFloat(vkey), t, tr.gen)));
        if !self.dirty.contains(&tr.group) {
            self.dirty.push(tr.group);
        }
    }

    fn flush_groups(&mut self) {
        while let Some(g) = self.dirty.pop() {
            let now = self.now;
            let group = &mut self.groups[g as usize];
            group.advance(now);
            group.refresh_factor();
            while let Some(Reverse((_, t, gen))) = group.heap.peek() {
                let tr = &self.transfers[*t as usize];
                if tr.live && tr.gen == *gen {
                    break;
                }
                group.heap.pop();
            }
            group.head_gen += 1;
            if let Some(Reverse((vkey, ..))) = group.heap.peek() {
                let at = group.real_time_of(vkey.0).max(now);
                let gen = group.head_gen;
                self.push(at, What::GroupHead(g, gen));
            }
        }
    }

    fn group_head(&mut self, g: u32, gen: u64) {
        if self.groups[g as usize].head_gen != gen {
            return;
        }
        self.groups[g as usize].advance(self.now);
        let mut first = true;
        loop {
            let group = &mut self.groups[g as usize];
            let Some(&Reverse((vkey, t, tgen))) = group.heap.peek() else {
                break;
            };
            let tr = &self.transfers[t as usize];
            if !tr.live || tr.gen != tgen {
                group.heap.pop();
                continue;
            }
            if !first && vkey.0 > group.v + 1e-9 * group.v.abs().max(1.0) {
                break;
            }
            group.heap.pop();
            if first {
                group.v = group.v.max(vkey.0);
                first = false;
            }
            self.finish(t, false);
        }
        if !self.dirty.contains(&g) {
            self.dirty.push(g);
        }
    }

    /// Ends a transfer. An interrupted transfer keeps its whole blocks.
    fn finish(&mut self, t: u32, interrupted: bool) {
        let progress = self.progress(t);
        let tr = &mut self.transfers[t as usize];
        debug_assert!(tr.live);
        tr.live = false;
        let (u, d, piece, need, rate, group) = (tr.src, tr.dst, tr.piece, tr.need, tr.rate, tr.group);
        let g = &mut self.groups[group as usize];
        g.advance(self.now);
        g.remove(rate);
        if !self.dirty.contains(&group) {
            self.dirty.push(group);
        }
        self.free.push(t);

        let pu = &mut self.peers[u as usize];
        pu.uploads.retain(|&x| x != t);
        let li = pu.link_to(d).expect("transfer runs over a link");
        pu.links[li].upload = None;
        let rev = pu.links[li].rev as usize;
        self.peers[d as usize].in_flight.clear(piece);

        let completed = !interrupted || progress >= need as f64 - 1e-6;
        let bytes = if completed {
            need
        } else {
            ((progress / self.block as f64).floor() as u64 * self.block).min(need - 1)
        };
        if bytes > 0 {
            self.out.ledger.push(self.now, PeerId(u), PeerId(d), bytes);
            let pd = &mut self.peers[d as usize];
            pd.links[rev].recv += bytes as f64;
            if !completed {
                match pd.partial.iter_mut().find(|x| x.0 == piece) {
                    Some(x) => x.1 += bytes,
                    None => pd.partial.push((piece, bytes)),
                }
            }
        }
        self.reallocate(u);

        if completed {
            self.peers[d as usize].partial.retain(|x| x.0 != piece);
            let isp = self.peers[d as usize].isp.index();
            self.isp_progress[isp] = self.now;
            self.on_piece(d, piece);
            if let Some(li) = self.peers[u as usize].link_to(d) {
                self.try_start(u, li);
            }
        } else {
            self.retry_downloads(d);
        }
    }

    /// Gives idle unchoked uploaders of `d` a chance to start a transfer.
    fn retry_downloads(&mut self, d: u32) {
        if !self.peers[d as usize].leecher() {
            return;
        }
        for i in 0..self.peers[d as usize].links.len() {
            let l = &self.peers[d as usize].links[i];
            let (u, rev) = (l.other, l.rev as usize);
            let ul = &self.peers[u as usize].links[rev];
            if !ul.choking && ul.upload.is_none() {
                self.try_start(u, rev);
            }
        }
    }

    fn on_piece(&mut self, d: u32, piece: u32) {
        let peer = &mut self.peers[d as usize];
        peer.have.set(piece);
        peer.n_have += 1;
        let mut gained = Vec::new();
        for i in 0..self.peers[d as usize].links.len() {
            let (x, rev) = {
                let l = &self.peers[d as usize].links[i];
                (l.other, l.rev as usize)
            };
            let px = &mut self.peers[x as usize];
            if px.have.get(piece) {
                if px.leecher() {
                    px.avail[piece as usize] += 1;
                }
                self.peers[d as usize].links[i].useful -= 1;
            } else if px.leecher() {
                px.avail[piece as usize] += 1;
                px.links[rev].useful += 1;
                if let Some(pm) = px.pm.as_mut() {
                    pm.observe_needed();
                }
                if px.links[rev].useful == 1 {
                    gained.push((x, rev));
                }
            }
        }
        for (x, rev) in gained {
            if self.peers[x as usize].links.get(rev).is_some_and(|l| l.other == d) {
                self.interest_gained(x, rev);
            }
        }
        if self.peers[d as usize].n_have == self.n_pieces {
            self.complete(d);
        }
    }

    // ---- partition merging ----

    fn pm_check(&mut self, p: u32, gen: u64) {
        let peer = &self.peers[p as usize];
        if !peer.leecher() || peer.pm_gen != gen {
            return;
        }
        let visible = peer.links.iter().any(|l| l.useful > 0);
        let now = self.now;
        let mut timer = peer.pm.clone().expect("pm timer on leechers");
        let outcome = timer.check(now, visible, &mut self.rng);
        let at = timer.deadline();
        let peer = &mut self.peers[p as usize];
        peer.pm = Some(timer);
        peer.pm_gen += 1;
        peer.pm_at = at;
        let gen = peer.pm_gen;
        self.push(at, What::Pm(p, gen));
        if outcome == PmOutcome::Announce {
            let resp = self.announce(p, AnnounceEvent::Periodic, true);
            self.connect_contacts(p, &resp);
        }
    }

    // ---- stall detection ----

    fn stall_diagnostic(&self) -> Option<StallDiagnostic> {
        let stalled: Vec<IspId> = (0..self.isp_active.len())
            .filter(|&i| self.isp_active[i] > 0 && self.now - self.isp_progress[i] > self.stall_window)
            .map(|i| IspId(i as u32))
            .collect();
        if stalled.is_empty() {
            return None;
        }
        Some(StallDiagnostic {
            time: self.now,
            window: self.stall_window,
            isolated: self.isolated_isps(),
            stalled,
            completed: self.out.completions.len(),
            pm_grants: self.tracker.pm_grants().len(),
        })
    }

    /// ISPs with leechers whose connected components stay inside the ISP.
    fn isolated_isps(&self) -> Vec<IspId> {
        let n = self.peers.len();
        let mut comp = vec![usize::MAX; n];
        let mut internal: Vec<bool> = Vec::new();
        for start in 0..n {
            if comp[start] != usize::MAX || !self.peers[start].active() {
                continue;
            }
            let id = internal.len();
            let isp = self.peers[start].isp;
            let mut only_isp = true;
            let mut stack = vec![start];
            comp[start] = id;
            while let Some(x) = stack.pop() {
                only_isp &= self.peers[x].isp == isp;
                for l in &self.peers[x].links {
                    let o = l.other as usize;
                    if comp[o] == usize::MAX {
                        comp[o] = id;
                        stack.push(o);
                    }
                }
            }
            internal.push(only_isp);
        }
        let mut out = Vec::new();
        for i in 0..self.isp_active.len() {
            let isp = IspId(i as u32);
            let mut leechers = self.peers.iter().enumerate().filter(|(_, p)| p.isp == isp && p.leecher());
            let mut any = false;
            if leechers.all(|(k, _)| {
                any = true;
                internal[comp[k]]
            }) && any
            {
                out.push(isp);
            }
        }
        out
    }
}
