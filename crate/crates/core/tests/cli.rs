use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
env.horizon = 8
data.episodes = 15
train.episodes = 2
train.offline_steps = 10
train.hidden = 8, 8
train.critic_hidden = 8, 8
train.batch = 8
train.actor_batch = 4
train.acting_steps = 4
diffusion.steps = 8
ablate.seeds = 1
eval.episodes = 2
";

fn cgdp(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_cgdp"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join("out").join(name)).unwrap()
}

#[test]
fn gen_data_with_no_episodes_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = cgdp(dir.path(), "data.episodes = 0\n", &["gen-data"]);
    assert_eq!(out.status.code(), Some(0));
    let path = std::fs::read_dir(dir.path().join("out"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    assert_eq!(std::fs::read_to_string(path).unwrap(), "6 4 0\n");
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut first = Vec::new();
    for round in 0..2 {
        for cmd in ["gen-data", "train", "eval"] {
            let out = cgdp(dir.path(), SMALL, &[cmd]);
            assert_eq!(
                out.status.code(),
                Some(0),
                "{cmd}: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        }
        let mut files: Vec<_> = std::fs::read_dir(dir.path().join("out"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        let contents: Vec<_> = files.iter().map(|p| std::fs::read(p).unwrap()).collect();
        if round == 0 {
            first = contents;
        } else {
            assert_eq!(first, contents);
        }
    }
}

#[test]
fn guidance_off_has_zero_kl() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cgdp(dir.path(), SMALL, &["gen-data"]).status.code(), Some(0));
    let out = cgdp(dir.path(), SMALL, &["--guidance", "off", "train"]);
    assert_eq!(out.status.code(), Some(0));
    let metrics = read(dir.path(), "metrics.txt");
    let mut lines = metrics.lines();
    let header: Vec<&str> = lines.next().unwrap().split(' ').collect();
    let kl = header.iter().position(|h| *h == "kl_integral").unwrap();
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert_eq!(row.split(' ').nth(kl).unwrap().parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn ablate_writes_three_arms_and_zero_flip_matches_notears() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL}ablate.flip_prob = 0\n");
    assert_eq!(cgdp(dir.path(), &cfg, &["gen-data"]).status.code(), Some(0));
    let out = cgdp(dir.path(), &cfg, &["ablate"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(dir.path(), "ablate.csv");
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "arm,mean,std");
    assert_eq!(rows.len(), 4);
    let stats = |arm: &str| {
        rows.iter()
            .find(|r| r.starts_with(arm))
            .unwrap()
            .split_once(',')
            .unwrap()
            .1
            .to_string()
    };
    assert_eq!(stats("notears"), stats("corrupted"));
}

#[test]
fn verify_all_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "\
verify.lemma1_samples = 10000
verify.lemma1_steps = 500
verify.prop1_seeds = 3
verify.prop1_steps = 1000
verify.prop2_seeds = 2
verify.theorem1_seeds = 2
verify.theorem1_rollouts = 50
verify.theorem1_horizon = 10
";
    let out = cgdp(dir.path(), cfg, &["verify", "all"]);
    let summary = read(dir.path(), "summary.txt");
    for name in ["lemma1", "prop1", "prop2", "theorem1"] {
        let csv = read(dir.path(), &format!("{name}.csv"));
        assert!(csv.lines().count() >= 2, "{name}.csv is empty");
        assert!(summary.lines().any(|l| l.starts_with(name)), "{summary}");
    }
    assert!(summary.lines().any(|l| l.starts_with("lemma1 PASS")), "{summary}");
    let all_pass = summary.lines().all(|l| l.split(' ').nth(1) == Some("PASS"));
    assert_eq!(out.status.code(), Some(if all_pass { 0 } else { 1 }));
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cgdp(dir.path(), "", &["verify", "lemma9"]).status.code(), Some(2));
    assert_eq!(
        cgdp(dir.path(), "no.such_key = 1\n", &["dump-config"]).status.code(),
        Some(2)
    );
    assert_eq!(cgdp(dir.path(), "", &["train"]).status.code(), Some(1));
}

#[test]
fn dump_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = cgdp(dir.path(), SMALL, &["dump-config"]);
    assert_eq!(out.status.code(), Some(0));
    let dumped = String::from_utf8(out.stdout).unwrap();
    let again = cgdp(dir.path(), &dumped, &["dump-config"]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), dumped);
}
