use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[fl]
rounds = 3
train_samples = 600
test_samples = 200
batch_size = 5

[run]
episodes = 12
episodes_per_round = 2

[qmix]
batch_size = 16

[qmix.epsilon]
start = 1.0
end = 0.001
anneal_episodes = 6
"#;

fn fadingfl(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fadingfl"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(output: Output) -> Output {
    assert!(
        output.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        output.status,
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn setup() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    (dir, config)
}

fn bytes(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn every_subcommand_repeats_byte_for_byte() {
    let (dir, config) = setup();
    // same output directory both times, since the checkpoint records it
    let out = dir.path().join("out");
    let files = [
        "metrics.csv",
        "rounds.csv",
        "checkpoint.json",
        "effective_config.toml",
        "eval/metrics.csv",
        "eval/rounds.csv",
        "msr/metrics.csv",
        "theory/theory_report.json",
        "partition/partition_report.json",
    ];
    let mut runs = Vec::new();
    for _ in 0..2 {
        ok(fadingfl(&["train"], &config, &out));
        ok(fadingfl(&["eval"], &config, &out));
        ok(fadingfl(&["baseline", "--policy", "max-sum-rate"], &config, &out.join("msr")));
        ok(fadingfl(&["verify-theory", "--check", "theorem1", "--trials", "200"], &config, &out.join("theory")));
        ok(fadingfl(&["partition-report"], &config, &out.join("partition")));
        runs.push(files.map(|f| bytes(&out.join(f))));
        fs::remove_dir_all(&out).unwrap();
    }
    for (i, file) in files.iter().enumerate() {
        assert!(runs[0][i] == runs[1][i], "{file} differs between runs");
    }
}

#[test]
fn seed_flag_changes_the_run() {
    let (dir, config) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(fadingfl(&["baseline", "--policy", "random", "--seed", "1"], &config, &a));
    ok(fadingfl(&["baseline", "--policy", "random", "--seed", "2"], &config, &b));
    assert!(bytes(&a.join("metrics.csv")) != bytes(&b.join("metrics.csv")));
}

#[test]
fn dumped_config_reloads_to_the_same_dump() {
    let (dir, config) = setup();
    let first = ok(fadingfl(&["train", "--dump-effective-config"], &config, dir.path())).stdout;
    let text = String::from_utf8(first.clone()).unwrap();
    assert!(text.contains("episodes = 12"));
    assert!(!dir.path().join("metrics.csv").exists(), "dumping must not run anything");
    let dumped = dir.path().join("dumped.toml");
    fs::write(&dumped, &first).unwrap();
    let second = ok(fadingfl(&["train", "--dump-effective-config"], &dumped, dir.path())).stdout;
    assert_eq!(first, second);
}

#[test]
fn paper_profile_resolves() {
    let (dir, config) = setup();
    let out = ok(fadingfl(&["train", "--dump-effective-config", "--profile", "paper"], &config, dir.path()));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("profile = \"paper\""));
    assert!(text.contains("clients = 10"));
}

#[test]
fn bad_input_fails_with_a_message() {
    let (dir, config) = setup();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[channel]\nclientz = 4\n").unwrap();
    let out = fadingfl(&["train"], &bad, dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("channel.clientz"));

    fs::write(&bad, "[qmix]\ngamma = 1.5\n").unwrap();
    let out = fadingfl(&["train"], &bad, dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("qmix.gamma"));

    let out = fadingfl(&["baseline", "--policy", "oracle"], &config, dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown policy"));

    let out = fadingfl(&["eval"], &config, &dir.path().join("nothing-here"));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn theory_checks_pass_from_the_command_line() {
    let (dir, config) = setup();
    for check in ["lemma1", "lemma2", "theorem1"] {
        let out = ok(fadingfl(&["verify-theory", "--check", check, "--trials", "300"], &config, dir.path()));
        assert!(String::from_utf8_lossy(&out.stdout).contains("pass"));
    }
}
