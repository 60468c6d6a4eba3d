use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use locality_cli::{estimate, Axis, Sweep};
use locality_core::estimator::{model_upload, read_profiles};
use locality_core::Exact;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_locality"))
}

fn small(policy: &str, extra: &str) -> String {
    format!(
        "torrent_size = 60\ncontent_size = 6144000\npiece_size = 256000\nseed_rate = 100000\n\
         arrival_window = 10.0\nseed_linger = 60.0\nrng_seed = 5\n\n\
         [layout]\nkind = \"homogeneous\"\nn_isps = 3\n\n\
         [[upload_classes]]\nrate = 20000\nfraction = \"1/1\"\n\n{policy}\n{extra}"
    )
}

const L2: &str = "[policy]\nkind = \"locality\"\nlimit = 2\n";

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn data(text: &str) -> Vec<String> {
    text.lines().filter(|l| !l.starts_with('#')).map(String::from).collect()
}

#[test]
fn run_writes_per_isp_metrics_and_is_repeatable() {
    let d = tempfile::tempdir().unwrap();
    let f = write(d.path(), "s.toml", &small(L2, ""));
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["run", f.to_str().unwrap(), "--out", out.to_str().unwrap(), "--json"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ta = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(ta, fs::read_to_string(b.join("metrics.csv")).unwrap());
    let lines: Vec<&str> = ta.lines().collect();
    assert!(lines[0].starts_with("#manifest config_hash=") && lines[0].contains("rng_seed=5"));
    assert_eq!(lines[1], "isp,peers,overhead,p95_bytes,slowdown_mean,slowdown_min,slowdown_max");
    assert_eq!(lines.len(), 2 + 3 + 1);
    assert!(lines[5].starts_with("mean,60,"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["report"]["per_isp"].as_array().unwrap().len(), 3);
}

#[test]
fn seed_flag_overrides_file() {
    let d = tempfile::tempdir().unwrap();
    let f = write(d.path(), "s.toml", &small(L2, ""));
    let out = d.path().join("o");
    let o = run(&["run", f.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "77", "--trace"]);
    assert!(o.status.success());
    let text = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(text.lines().next().unwrap().contains("rng_seed=77"));
    let trace = fs::read_to_string(out.join("trace.txt")).unwrap();
    assert!(trace.contains("choke_round"));
}

#[test]
fn invalid_scenario_exits_2_with_line() {
    let d = tempfile::tempdir().unwrap();
    let bad = small(L2, "").replace("n_isps = 3", "n_isps = 7");
    let f = write(d.path(), "bad.toml", &bad);
    let o = run(&["run", f.to_str().unwrap(), "--out", d.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.toml:"), "{err}");

    let f = write(d.path(), "typo.toml", "torrent_size = \"x\"\n");
    assert_eq!(run(&["run", f.to_str().unwrap()]).status.code(), Some(2));
}

const PARTITIONED: &str = "[tracker]\nannounce_interval = 20000.0\nexpiry = 30000.0\n\n\
    [client]\nmin_reannounce = 20000.0\nstall_window = 600.0\n\n[[partition]]\nisp = 0\nat = 100.0\n";

#[test]
fn stall_exits_3() {
    let d = tempfile::tempdir().unwrap();
    let s = small(L2, PARTITIONED)
        .replace("content_size = 6144000", "content_size = 10240000")
        .replace("seed_rate = 100000", "seed_rate = 20000")
        .replace("torrent_size = 60", "torrent_size = 150");
    let f = write(d.path(), "p.toml", &s);
    let o = run(&["run", f.to_str().unwrap(), "--out", d.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stalled"));
}

#[test]
fn sweep_rows_are_unions_of_single_runs() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "base.toml", &small(L2, ""));
    let sw = write(d.path(), "sw.toml", "axis = \"limit\"\nvalues = [1, 3]\nrepetitions = 2\nbase_file = \"base.toml\"\n");
    let out = d.path().join("sweep");
    let o = run(&["sweep", sw.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows = data(&text);
    assert!(rows[0].starts_with("axis_value,rep,isp,peers,overhead"));
    // 2 values x 2 reps x (3 ISPs + mean) + 2 summaries
    assert_eq!(rows.len(), 1 + 2 * 2 * 4 + 2);

    // re-run the (3, rep 0) cell on its own
    let single = write(d.path(), "single.toml", &small("[policy]\nkind = \"locality\"\nlimit = 3\n", ""));
    let one = d.path().join("one");
    assert!(run(&["run", single.to_str().unwrap(), "--out", one.to_str().unwrap()]).status.success());
    let metrics = data(&fs::read_to_string(one.join("metrics.csv")).unwrap());
    for m in &metrics[1..] {
        assert!(rows.contains(&format!("3,0,{m}")), "missing {m}");
    }
}

#[test]
fn failed_cells_exit_4_and_are_recorded() {
    let d = tempfile::tempdir().unwrap();
    let s = small(L2, PARTITIONED)
        .replace("content_size = 6144000", "content_size = 10240000")
        .replace("seed_rate = 100000", "seed_rate = 20000")
        .replace("torrent_size = 60", "torrent_size = 150");
    write(d.path(), "base.toml", &s);
    let sw = write(d.path(), "sw.toml", "axis = \"seed_rate\"\nvalues = [50000, 100000]\nbase_file = \"base.toml\"\n");
    let out = d.path().join("o");
    let o = run(&["sweep", sw.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("#failed")).count(), 2);
}

#[test]
fn bundled_sweep_grids() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let limit = Sweep::load(&root.join("sweep_limit.toml"), None).unwrap();
    assert_eq!(limit.axis, Axis::Limit);
    assert_eq!(limit.values.len(), 19);
    let egress = Sweep::load(&root.join("sweep_egress.toml"), None).unwrap();
    assert_eq!(egress.values.len(), 14);
    assert_eq!(egress.cell(40_000, 0).egress_cap, Some(40_000));
}

#[test]
fn invalid_sweep_value_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "base.toml", &small(L2, ""));
    let sw = write(d.path(), "sw.toml", "axis = \"peers_per_isp\"\nvalues = [7]\nbase_file = \"base.toml\"\n");
    assert_eq!(run(&["sweep", sw.to_str().unwrap()]).status.code(), Some(2));
    let sw = write(d.path(), "sw2.toml", "axis = \"colour\"\nvalues = [7]\nbase_file = \"base.toml\"\n");
    assert_eq!(run(&["sweep", sw.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn estimate_with_and_without_savings() {
    let profiles = "torrent_id,as_id,peer_count,content_bytes\na,1,100,1000\na,2,900,1000\nb,1,5,10\nb,3,5,10\n";
    let none = estimate(profiles, None).unwrap();
    let rows = data(&none.detail);
    assert_eq!(rows[0], "torrent_id,as_id,S_A,random_bytes,locality_bytes,ideal_bytes");
    // 100 of 1000 peers, 1000 bytes: 90 copies
    assert_eq!(rows[1], "a,1,100,90000,90000,1000");
    assert_eq!(rows[2], "a,2,900,90000,90000,0");
    for r in &rows[1..] {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(f[3], f[4]);
    }
    let with = estimate(profiles, Some("as_size,saving\n5,0.4\n")).unwrap();
    assert_eq!(data(&with.detail)[3], "b,1,5,25,15,0");
}

#[test]
fn estimate_cli_matches_brute_force_sum() {
    let d = tempfile::tempdir().unwrap();
    let snap = d.path().join("crawl");
    let o = run(&["synth", "--torrents", "60", "--ases", "40", "--seed", "4", "--out", snap.to_str().unwrap()]);
    assert!(o.status.success());
    let prof = d.path().join("prof");
    let o = run(&[
        "ingest",
        "--snapshot",
        snap.join("snapshot.txt").to_str().unwrap(),
        "--prefixes",
        snap.join("prefixes.csv").to_str().unwrap(),
        "--out",
        prof.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let profiles_path = prof.join("profiles.csv");
    let est = d.path().join("est");
    let o = run(&["estimate", "--profiles", profiles_path.to_str().unwrap(), "--out", est.to_str().unwrap()]);
    assert!(o.status.success());

    let profiles = read_profiles(&fs::read_to_string(&profiles_path).unwrap()).unwrap();
    let mut brute = Exact::from_integer(0.into());
    for p in &profiles {
        for &(_, n) in &p.as_counts {
            brute += model_upload::<Exact>(n, p.total_peers(), p.content_size).unwrap();
        }
    }
    let torrents = fs::read_to_string(est.join("torrents.csv")).unwrap();
    let total = torrents.lines().find(|l| l.starts_with("total,")).unwrap();
    let random: &str = total.split(',').nth(1).unwrap();
    assert_eq!(random, locality_core::num::round_exact(&brute).to_string());
}

#[test]
fn coverage_subcommand() {
    let o = run(&["coverage", "--population", "1000", "--per-response", "100"]);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "22");
    assert_eq!(run(&["coverage", "--population", "10", "--per-response", "0"]).status.code(), Some(2));
}
