//! End-to-end acceptance checks. Prints one PASS/FAIL line per check and a
//! summary; the process fails only when a check cannot run at all.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::time::Instant;

use num_bigint::BigInt;
use num_traits::Zero;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::Rng;

use locality_core::estimator::{aggregate, model_upload, Estimate, SavingsTable, TorrentProfile};
use locality_core::ingest::{self, DatasetSpec, PrefixTable};
use locality_core::metrics::{inter_isp_bytes, percentile95, report, IspMap, MetricsReport, TransferLedger};
use locality_core::rng::{stream, Stream};
use locality_core::scenario::*;
use locality_core::swarm::{run, run_with, RunOptions, RunOutput, SwarmError};
use locality_core::tracker::{AnnounceEvent, AnnounceRequest, Selection, Tracker, TrackerConfig};
use locality_core::{Exact, IspId, PeerId};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { name, pass, detail }
}

fn homogeneous(n: u32, seed_rate: u64, limit: Option<u32>) -> ScenarioConfig {
    let mut cfg = build_homogeneous(n, 10, DEFAULT_RATE).expect("valid scenario");
    cfg.seed_rate = seed_rate;
    if let Some(l) = limit {
        cfg.policy = Policy::Locality(LocalityParams::with_limit(l));
    }
    cfg
}

fn simulate(cfg: &ScenarioConfig) -> (RunOutput, MetricsReport) {
    let out = run(cfg).unwrap_or_else(|e| panic!("run failed: {e}"));
    let r = report(&out.ledger, &out.completions, cfg, out.end_time);
    (out, r)
}

fn in_range(v: f64, lo: f64, hi: f64) -> bool {
    (lo..=hi).contains(&v)
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

fn ideal_time() -> Outcome {
    let mut cfg = build_homogeneous(1, 1, DEFAULT_RATE).expect("valid scenario");
    cfg.content_size = 100 * MB;
    cfg.piece_size = 400 * KB;
    let (out, _) = simulate(&cfg);
    let t = out.completions[0].download_time();
    check("single leecher ideal time", in_range(t, 5000.0, 5500.0), format!("{t:.0} s, want [5000, 5500]"))
}

struct SwarmRuns {
    slow_random: MetricsReport,
    slow_l4: MetricsReport,
    fast_l4: MetricsReport,
    fast_l4_small: MetricsReport,
    fast_sweep: Vec<(u32, MetricsReport)>,
}

fn swarm_runs() -> SwarmRuns {
    let limits: Vec<u32> = (1..=9).map(|k| 400 * k).collect();
    SwarmRuns {
        slow_random: simulate(&homogeneous(1000, DEFAULT_RATE, Some(3600))).1,
        slow_l4: simulate(&homogeneous(1000, DEFAULT_RATE, Some(4))).1,
        fast_l4: simulate(&homogeneous(1000, FAST_SEED_RATE, Some(4))).1,
        fast_l4_small: simulate(&homogeneous(100, FAST_SEED_RATE, Some(4))).1,
        fast_sweep: limits
            .iter()
            .map(|&l| (l, simulate(&homogeneous(1000, FAST_SEED_RATE, Some(l))).1))
            .collect(),
    }
}

fn swarm_checks(r: &SwarmRuns) -> Vec<Outcome> {
    let fast_wide = &r.fast_sweep.last().expect("non-empty sweep").1;
    let (x, y): (Vec<f64>, Vec<f64>) = r.fast_sweep.iter().map(|(l, m)| (f64::from(*l), m.mean_overhead)).unzip();
    let rho = pearson(&x, &y);
    let slow_ratio = r.slow_l4.mean_slowdown / r.slow_random.mean_slowdown;
    let fast_ratio = r.fast_l4.mean_slowdown / fast_wide.mean_slowdown;
    vec![
        check(
            "random-policy overhead (slow seed, L=3600)",
            in_range(r.slow_random.mean_overhead, 70.0, 95.0),
            format!("{:.2}, want [70, 95]", r.slow_random.mean_overhead),
        ),
        check(
            "high-locality overhead (fast seed, L=4)",
            in_range(r.fast_l4.mean_overhead, 0.8, 3.0),
            format!("{:.3}, want [0.8, 3]", r.fast_l4.mean_overhead),
        ),
        check(
            "overhead linear in L (fast seed, 400..3600)",
            rho >= 0.98,
            format!("pearson {rho:.4}, want >= 0.98; overheads {:?}", y.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>()),
        ),
        check(
            "slowdown bound (slow seed)",
            slow_ratio <= 1.55,
            format!("L=4 {:.3} / L=3600 {:.3} = {slow_ratio:.3}, want <= 1.55", r.slow_l4.mean_slowdown, r.slow_random.mean_slowdown),
        ),
        check(
            "slowdown unchanged (fast seed)",
            (fast_ratio - 1.0).abs() <= 0.10,
            format!("L=4 {:.3} / L=3600 {:.3} = {fast_ratio:.3}, want within 10%", r.fast_l4.mean_slowdown, fast_wide.mean_slowdown),
        ),
        check(
            "overhead independent of torrent size (L=4)",
            in_range(r.fast_l4_small.mean_overhead, 0.8, 3.0) && in_range(r.fast_l4.mean_overhead, 0.8, 3.0),
            format!(
                "100 peers {:.3}, 1000 peers {:.3}, want both in [0.8, 3]",
                r.fast_l4_small.mean_overhead, r.fast_l4.mean_overhead
            ),
        ),
    ]
}

fn congestion() -> Outcome {
    let mut random = homogeneous(1000, FAST_SEED_RATE, None);
    random.egress_cap = Some(40 * KB);
    let mut local = homogeneous(1000, FAST_SEED_RATE, Some(4));
    local.egress_cap = Some(40 * KB);
    let a = simulate(&random).1.mean_download_time;
    let b = simulate(&local).1.mean_download_time;
    let ratio = a / b;
    check(
        "congested egress favours locality",
        ratio >= 1.5,
        format!("random {a:.0} s / L=4 {b:.0} s = {ratio:.2}, want >= 1.5"),
    )
}

fn partition_cfg(pm: bool) -> ScenarioConfig {
    let mut cfg = homogeneous(1000, FAST_SEED_RATE, None);
    let mut lp = LocalityParams::with_limit(4);
    lp.partition_merging = pm;
    lp.t0 = 60.0;
    lp.t1 = 60.0;
    cfg.policy = Policy::Locality(lp);
    cfg.tracker.announce_interval = 20_000.0;
    cfg.tracker.expiry = 30_000.0;
    cfg.client.min_reannounce = 20_000.0;
    cfg.client.stall_window = Some(3000.0);
    cfg.partitions = vec![Partition { isp: 0, at: 1000.0 }];
    cfg
}

fn partition_repair() -> Outcome {
    let on = partition_cfg(true);
    let peers = on.peers();
    let members: BTreeSet<PeerId> = peers.iter().filter(|s| s.isp_id == IspId(0)).map(|s| s.peer_id).collect();
    let in_isp0 = |p: PeerId| members.contains(&p);
    let detail_on = match run(&on) {
        Ok(out) => {
            let crashed: BTreeSet<PeerId> = out.crashed.iter().copied().filter(|p| in_isp0(*p)).collect();
            let done: BTreeSet<PeerId> = out.completions.iter().map(|c| c.peer).filter(|p| in_isp0(*p)).collect();
            let survivors: BTreeSet<PeerId> = members.difference(&crashed).copied().collect();
            let grants = out.pm_grants.iter().filter(|g| g.isp == IspId(0) && g.time >= 1000.0).count();
            Ok((survivors.is_subset(&done) && !survivors.is_empty(), grants, survivors.len(), done.len()))
        }
        Err(e) => Err(e.to_string()),
    };
    let off = run(&partition_cfg(false));
    let stalled = matches!(off, Err(SwarmError::Stall(_)));
    match detail_on {
        Ok((all_done, grants, survivors, done)) => check(
            "partition merging repairs a cut ISP",
            all_done && grants >= 1 && stalled,
            format!("PM on: {done}/{survivors} surviving leechers complete, {grants} grants; PM off stalled: {stalled}"),
        ),
        Err(e) => check("partition merging repairs a cut ISP", false, format!("PM on failed: {e}")),
    }
}

fn started(t: &mut Tracker, peer: u32, isp: u32) {
    let req = AnnounceRequest::new(PeerId(peer), IspId(isp), AnnounceEvent::Started, 0);
    t.announce(&req, 0.0).expect("fresh peer");
}

fn round_robin_fairness() -> Outcome {
    let mut cfg = TrackerConfig::locality(1_000);
    cfg.selection = Selection::RoundRobin;
    let mut t = Tracker::new(cfg, 9);
    let mut id = 0;
    for (isp, n) in [(0u32, 5u32), (1, 3), (2, 40), (3, 400)] {
        for _ in 0..n {
            started(&mut t, id, isp);
            id += 1;
        }
    }
    let isp_of = |p: PeerId| match p.0 {
        0..=4 => 0,
        5..=7 => 1,
        8..=47 => 2,
        _ => 3,
    };
    let mut counts = [0u32; 4];
    for _ in 0..300 {
        let p = t.select_external(IspId(0)).expect("external peers exist");
        counts[isp_of(p)] += 1;
    }
    check(
        "round-robin selection is size independent",
        counts == [0, 100, 100, 100],
        format!("split {:?} over ISPs of 3/40/400 peers, want 100/100/100", &counts[1..]),
    )
}

#[derive(Clone, Debug)]
struct Op {
    peer: u32,
    kind: u8,
    pm: bool,
    dt: u16,
}

fn tracker_cap() -> Outcome {
    let mut runner = TestRunner::new(Config { cases: 6, failure_persistence: None, ..Config::default() });
    let ops = prop::collection::vec(
        (0u32..400, 0u8..6, any::<bool>(), 0u16..120).prop_map(|(peer, kind, pm, dt)| Op { peer, kind, pm, dt }),
        10_000,
    );
    let strategy = (1u32..20, any::<bool>(), any::<bool>(), ops);
    let steps = std::cell::Cell::new(0usize);
    let result = runner.run(&strategy, |(limit, pm_enabled, rr, ops)| {
        let mut cfg = TrackerConfig::locality(limit);
        cfg.pm_enabled = pm_enabled;
        cfg.pm_interval = 60.0;
        cfg.expiry = 900.0;
        if rr {
            cfg.selection = Selection::RoundRobin;
        }
        let mut t = Tracker::new(cfg, u64::from(limit));
        let mut now = 0.0;
        for op in &ops {
            now += f64::from(op.dt);
            let isp = IspId(op.peer % 7);
            let event = match op.kind {
                0 | 1 => AnnounceEvent::Started,
                2 => AnnounceEvent::Periodic,
                3 => AnnounceEvent::Completed,
                4 => AnnounceEvent::Stopped,
                _ => {
                    t.expire(now);
                    continue;
                }
            };
            let mut req = AnnounceRequest::new(PeerId(op.peer), isp, event, 50);
            req.pm_flag = op.pm;
            let _ = t.announce(&req, now);
            for i in 0..7 {
                prop_assert!(t.outgoing_count(IspId(i)) <= limit);
            }
            prop_assert!(t.ledger_consistent());
        }
        steps.set(steps.get() + ops.len());
        Ok(())
    });
    check(
        "tracker cap and ledger consistency",
        result.is_ok(),
        match result {
            Ok(()) => format!("{} announce events over 6 traces", steps.get()),
            Err(e) => format!("{e}"),
        },
    )
}

fn exact(n: u64) -> Exact {
    Exact::from_integer(BigInt::from(n))
}

fn estimator_exactness() -> Outcome {
    let c = 1_234_567u64;
    let ninety = model_upload::<Exact>(100, 1000, c).expect("valid sizes") == exact(90 * c);
    let mut rng = stream(11, Stream::Repetition);
    let mut identity = 0;
    for k in 0..100 {
        let n_as = rng.gen_range(1..40u32);
        let counts: Vec<(u32, u64)> = (0..n_as).map(|a| (a, rng.gen_range(1..5_000u64))).collect();
        let content = rng.gen_range(1..10_000_000_000u64);
        let p = TorrentProfile::new(format!("p{k}"), counts.clone(), content).expect("valid profile");
        let st: u64 = counts.iter().map(|c| c.1).sum();
        let sq: BigInt = counts.iter().map(|c| BigInt::from(c.1) * BigInt::from(c.1)).sum();
        let closed = exact(content) * (exact(st) - Exact::new(sq, BigInt::from(st)));
        let summed = counts
            .iter()
            .map(|c| model_upload::<Exact>(c.1, st, content).expect("valid"))
            .fold(Exact::zero(), |a, b| a + b);
        if summed == closed && locality_core::estimator::model_total::<Exact>(&p) == closed {
            identity += 1;
        }
    }
    check(
        "estimator exact arithmetic",
        ninety && identity == 100,
        format!("100 of 1000 peers gives 90 C: {ninety}; sum identity on {identity}/100 profiles"),
    )
}

fn model_fit() -> Outcome {
    let prof = reference_profile("as", 996, 354, 31);
    let mut cfg = build_from_distribution(&prof, DEFAULT_RATE).expect("valid scenario");
    cfg.seed_rate = FAST_SEED_RATE;
    let (out, _) = simulate(&cfg);
    let map = IspMap::from_config(&cfg);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (i, (_, n)) in prof.iter().enumerate() {
        if *n < 5 {
            continue;
        }
        let sim = inter_isp_bytes(&out.ledger, &map, IspId(i as u32)).expect("known ISP") as f64;
        let model: f64 = model_upload(u64::from(*n), 996, cfg.content_size).expect("valid sizes");
        worst = worst.max((sim / model - 1.0).abs());
        checked += 1;
    }
    check(
        "per-AS upload matches the model",
        worst <= 0.25,
        format!("{checked} ASes with >= 5 peers, worst deviation {:.1}%, want <= 25%", worst * 100.0),
    )
}

fn percentile_oracle() -> Outcome {
    let mut rng = stream(13, Stream::Repetition);
    let window = 300.0;
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n_peers = rng.gen_range(2..30u32);
        let n_isps = rng.gen_range(2..5u32);
        let isp_of: Vec<IspId> = (0..n_peers).map(|_| IspId(rng.gen_range(0..n_isps))).collect();
        let map = IspMap::new(isp_of.clone(), n_isps);
        let end = rng.gen_range(1.0..20_000.0);
        let mut ledger = TransferLedger::new();
        for _ in 0..rng.gen_range(0..400) {
            let t = rng.gen_range(0.0..end);
            let a = rng.gen_range(0..n_peers);
            let b = (a + rng.gen_range(1..n_peers)) % n_peers;
            ledger.push(t, PeerId(a), PeerId(b), rng.gen_range(1..1_000_000));
        }
        let isp = IspId(rng.gen_range(0..n_isps));
        let n_windows = ((end / window).ceil() as usize).max(1);
        let mut volumes: Vec<u64> = (0..n_windows)
            .map(|k| {
                let lo = window * k as f64;
                let hi = if k + 1 == n_windows { f64::INFINITY } else { window * (k + 1) as f64 };
                ledger
                    .records
                    .iter()
                    .filter(|r| r.time >= lo && r.time < hi)
                    .filter(|r| isp_of[r.src.0 as usize] == isp && isp_of[r.dst.0 as usize] != isp)
                    .map(|r| r.bytes)
                    .sum()
            })
            .collect();
        volumes.sort();
        let mut rank = 1;
        while rank * 100 < 95 * n_windows {
            rank += 1;
        }
        if percentile95(&ledger, &map, isp, window, end).ok() != Some(volumes[rank - 1]) {
            mismatches += 1;
        }
    }
    check("95th percentile matches sort oracle", mismatches == 0, format!("{mismatches} mismatches in 1000 ledgers"))
}

fn coverage() -> Outcome {
    let r = ingest::coverage_requests(1000, 100, 0.9);
    let mut rng = stream(17, Stream::Repetition);
    let at22 = ingest::simulate_coverage(1000, 100, 22, 10_000, &mut rng);
    let at21 = ingest::simulate_coverage(1000, 100, 21, 10_000, &mut rng);
    check(
        "crawl coverage request count",
        r.as_ref().ok() == Some(&22) && at22 >= 0.9 && at21 < 0.9,
        format!("R = {r:?}, simulated coverage {at22:.4} at 22 and {at21:.4} at 21"),
    )
}

fn determinism() -> Outcome {
    let mut cfg = build_homogeneous(200, 4, DEFAULT_RATE).expect("valid scenario");
    cfg.seed_rate = FAST_SEED_RATE;
    let mut lp = LocalityParams::with_limit(3);
    lp.round_robin = true;
    lp.partition_merging = true;
    cfg.policy = Policy::Locality(lp);
    cfg.churn = Some(Churn { second_set_size: 100, replacement_on_completion: true });
    cfg.rng_seed = 2024;
    let once = || {
        let out = run_with(&cfg, &RunOptions { trace: true }).expect("run completes");
        let r = report(&out.ledger, &out.completions, &cfg, out.end_time);
        (out.ledger.to_canonical_string(), r.to_csv(), out.trace.join("\n"))
    };
    let (a, b) = (once(), once());
    check(
        "same seed gives identical output",
        a == b,
        format!("ledger {} bytes, report and trace compared byte for byte", a.0.len()),
    )
}

fn brute_force(snapshot: &str, prefixes: &str) -> (BTreeMap<String, Exact>, BTreeMap<u32, Exact>) {
    let mut nets: Vec<(u32, u32, u32)> = Vec::new();
    for line in prefixes.lines().skip(1) {
        let (cidr, asn) = line.split_once(',').expect("two columns");
        let (net, len) = cidr.split_once('/').expect("cidr");
        let len: u32 = len.parse().expect("length");
        let mask = if len == 0 { 0 } else { u32::MAX << (32 - len) };
        nets.push((u32::from(net.parse::<Ipv4Addr>().expect("address")) & mask, mask, asn.parse().expect("asn")));
    }
    let owner = |ip: u32| {
        nets.iter()
            .filter(|(net, mask, _)| ip & mask == *net)
            .max_by_key(|(_, mask, _)| mask.count_ones())
            .map(|n| n.2)
    };
    let mut torrents: Vec<(String, u64, BTreeSet<String>)> = Vec::new();
    for line in snapshot.lines() {
        if let Some(rest) = line.strip_prefix("#torrent ") {
            let (id, size) = rest.split_once(' ').expect("id and size");
            torrents.push((id.to_string(), size.parse().expect("size"), BTreeSet::new()));
        } else if !line.is_empty() {
            torrents.last_mut().expect("section").2.insert(line.to_string());
        }
    }
    let mut per_torrent = BTreeMap::new();
    let mut per_as: BTreeMap<u32, Exact> = BTreeMap::new();
    for (id, size, peers) in torrents {
        let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
        for p in &peers {
            let ip: Ipv4Addr = p.split_once(':').expect("port").0.parse().expect("address");
            if let Some(a) = owner(u32::from(ip)) {
                *counts.entry(a).or_default() += 1;
            }
        }
        let st: u64 = counts.values().sum();
        if st == 0 {
            continue;
        }
        let mut total = Exact::zero();
        for (a, n) in counts {
            let up = Exact::new(BigInt::from(n) * BigInt::from(st - n) * BigInt::from(size), BigInt::from(st));
            *per_as.entry(a).or_insert_with(Exact::zero) += up.clone();
            total += up;
        }
        per_torrent.insert(id, total);
    }
    (per_torrent, per_as)
}

fn pipeline() -> Outcome {
    let spec = DatasetSpec { torrents: 300, ases: 200, ..DatasetSpec::default() };
    let data = ingest::generate_dataset(&spec, 21);
    let snap = ingest::parse_snapshot(&data.snapshot).expect("clean snapshot");
    let table = PrefixTable::from_csv(&data.prefixes).expect("clean prefixes");
    let (profiles, _) = ingest::profiles(&snap, &table).expect("mapping");
    let report = aggregate::<Exact>(&profiles, &SavingsTable::zero());
    let (torrents, ases) = brute_force(&data.snapshot, &data.prefixes);
    let oracle_total = torrents.values().fold(Exact::zero(), |a, b| a + b);
    let torrents_match = report.torrents.len() == torrents.len()
        && report.torrents.iter().all(|(id, t)| torrents.get(id) == Some(t.get(Estimate::Random)));
    let ases_match = report.ases.iter().filter(|(_, t)| !t.random.is_zero()).count()
        == ases.values().filter(|v| !v.is_zero()).count()
        && ases.iter().all(|(a, v)| report.ases.get(a).map(|t| &t.random).unwrap_or(&Exact::zero()) == v);
    let total_match = *report.total.get(Estimate::Random) == oracle_total;

    let five = TorrentProfile::new("five".to_string(), vec![(1, 5), (2, 45)], 1_000).expect("valid profile");
    let table = SavingsTable::new(vec![(5, Exact::new(BigInt::from(2), BigInt::from(5)))]).expect("valid table");
    let est = locality_core::estimator::apply_savings(&five, &table);
    let small = est.iter().find(|e| e.as_id == 1).expect("AS present");
    let forty = !small.random.is_zero()
        && small.locality == small.random.clone() * Exact::new(BigInt::from(3), BigInt::from(5));
    check(
        "ingest and estimate match brute-force oracle",
        torrents_match && ases_match && total_match && forty,
        format!(
            "{} torrents, total {} bytes exact: {total_match}, per-torrent {torrents_match}, per-AS {ases_match}; 5-peer AS 40% lower: {forty}",
            torrents.len(),
            locality_core::num::round_exact(&oracle_total)
        ),
    )
}

fn main() {
    let start = Instant::now();
    let mut results = vec![ideal_time()];
    let runs = swarm_runs();
    results.extend(swarm_checks(&runs));
    results.push(congestion());
    results.push(partition_repair());
    results.push(round_robin_fairness());
    results.push(tracker_cap());
    results.push(estimator_exactness());
    results.push(model_fit());
    results.push(percentile_oracle());
    results.push(coverage());
    results.push(determinism());
    results.push(pipeline());

    for r in &results {
        println!("{} {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let passed = results.iter().filter(|r| r.pass).count();
    println!(
        "acceptance: {passed}/{} passed in {:.0} s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
}
