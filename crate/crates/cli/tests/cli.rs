use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3
[dynamics]
n_trajectories = 2
steps = 400
[ae]
epochs = 20
[koopman]
n_max = 6
[eval]
dims = [3]
modes = ["raw-only"]
seeds = [0]
horizon = 50
trials = 2
"#;

fn ksid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ksid"))
        .args(args)
        .current_dir(dir)
        .env_remove("KSID_OUT")
        .output()
        .expect("run ksid")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn gen(dir: &Path) {
    let o = ksid(dir, &["gen-data", "--config", "run.toml", "--out", "data"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_for_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["gen-data", "spectrogram", "identify", "rollout", "compare", "inspect"] {
        let o = ksid(dir.path(), &[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        assert!(!o.stdout.is_empty());
    }
    assert_eq!(code(&ksid(dir.path(), &["--help"])), 0);
    assert_eq!(code(&ksid(dir.path(), &["no-such-command"])), 2);
}

#[test]
fn gen_data_is_deterministic_and_manifest_matches_files() {
    let d = setup(SMALL);
    gen(d.path());
    let first = fs::read(d.path().join("data/traj_000.csv")).unwrap();
    let o = ksid(d.path(), &["gen-data", "--config", "run.toml", "--out", "again"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(d.path().join("again/traj_000.csv")).unwrap(), first);
    assert_eq!(
        fs::read(d.path().join("data/manifest.json")).unwrap(),
        fs::read(d.path().join("again/manifest.json")).unwrap()
    );

    let manifest = json(&d.path().join("data/manifest.json"));
    let mut listed: Vec<String> =
        manifest["files"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    listed.push("manifest.json".into());
    listed.sort();
    let mut written: Vec<String> = fs::read_dir(d.path().join("data"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    written.sort();
    assert_eq!(listed, written);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let o = ksid(d.path(), &["gen-data", "--config", "run.toml", "--seed", "4", "--out", "other"]);
    assert_eq!(code(&o), 0);
    assert_ne!(fs::read(d.path().join("other/traj_000.csv")).unwrap(), first);
}

#[test]
fn usage_errors_exit_2() {
    let d = setup("[dynamics]\nn_trajectories = 0\n");
    assert_eq!(code(&ksid(d.path(), &["gen-data", "--config", "run.toml", "--out", "x"])), 2);

    let d = setup("[koopman]\nepsilon = 0.1\nn_maximum = 3\n");
    assert_eq!(code(&ksid(d.path(), &["gen-data", "--config", "run.toml", "--out", "x"])), 2);

    let d = setup(SMALL);
    fs::write(d.path().join("blocker"), "file").unwrap();
    assert_eq!(code(&ksid(d.path(), &["gen-data", "--config", "run.toml", "--out", "blocker/sub"])), 2);
    assert_eq!(code(&ksid(d.path(), &["gen-data", "--config", "missing.toml"])), 2);
    assert_eq!(
        code(&ksid(d.path(), &["identify", "--config", "run.toml", "--manifest", "nope.json", "--out", "x"])),
        2
    );
    assert_eq!(code(&ksid(d.path(), &["inspect", "run.toml"])), 2);
}

#[test]
fn output_dir_defaults() {
    let d = setup(SMALL);
    let o = Command::new(env!("CARGO_BIN_EXE_ksid"))
        .args(["gen-data", "--config", "run.toml"])
        .current_dir(d.path())
        .env("KSID_OUT", "from-env")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(d.path().join("from-env/manifest.json").exists());
    assert_eq!(code(&ksid(d.path(), &["gen-data", "--config", "run.toml"])), 0);
    assert!(d.path().join("ksid-out/manifest.json").exists());
}

#[test]
fn raw_only_identify_is_admissible_without_cae() {
    let d = setup(SMALL);
    gen(d.path());
    let o = ksid(d.path(), &["identify", "--config", "run.toml", "--manifest", "data/manifest.json", "--out", "id"]);
    let c = code(&o);
    assert!(c == 0 || c == 3, "{}", String::from_utf8_lossy(&o.stderr));
    let id = d.path().join("id");
    assert!(!id.join("cae_model.json").exists());
    for f in ["system.json", "A.csv", "B.csv", "C.csv", "ae_model.json", "report.json"] {
        assert!(id.join(f).exists(), "{f}");
    }
    let sys = json(&id.join("system.json"));
    if c == 0 {
        assert_eq!(sys["report"]["h2"], 0);
        assert_eq!(sys["report"]["admissible"], true);
    }
    let n = sys["lift_dim"].as_u64().unwrap() as usize;
    let a_csv = fs::read_to_string(id.join("A.csv")).unwrap();
    assert_eq!(a_csv.lines().count(), n);
    assert!(a_csv.lines().all(|l| l.split(',').count() == n));

    let o = ksid(d.path(), &["inspect", "id/system.json"]);
    assert_eq!(code(&o), 0);
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed, sys);
}

#[test]
fn zero_epsilon_is_inadmissible() {
    let d = setup(&SMALL.replace("n_max = 6", "n_max = 3\nepsilon = 0.0"));
    gen(d.path());
    let args = ["identify", "--config", "run.toml", "--manifest", "data/manifest.json", "--out", "strict"];
    assert_eq!(code(&ksid(d.path(), &args)), 3);
    assert!(d.path().join("strict/system.json").exists());

    let o = ksid(
        d.path(),
        &["identify", "--config", "run.toml", "--manifest", "data/manifest.json", "--allow-inadmissible", "--out", "lax"],
    );
    assert_eq!(code(&o), 0);
    let sys = json(&d.path().join("lax/system.json"));
    assert_eq!(sys["report"]["admissible"], false);
    assert_eq!(sys["report"]["metadata"]["inadmissible_allowed"], true);
}

#[test]
fn rollout_horizons_and_controls() {
    let d = setup(SMALL);
    gen(d.path());
    ksid(
        d.path(),
        &["identify", "--config", "run.toml", "--manifest", "data/manifest.json", "--allow-inadmissible", "--out", "id"],
    );
    let base = ["rollout", "--config", "run.toml", "--system", "id/system.json", "--theta", "-0.4", "--theta-dot", "0.2"];

    let o = ksid(d.path(), &[&base[..], &["--horizon", "0", "--out", "h0"]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.path().join("h0/rollout.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("t,theta_true,theta_pred,thetadot_true,thetadot_pred"));

    assert_eq!(code(&ksid(d.path(), &[&base[..], &["--horizon", "20", "--out", "free"]].concat())), 0);
    fs::write(d.path().join("zeros.txt"), "0\n".repeat(20)).unwrap();
    assert_eq!(code(&ksid(d.path(), &[&base[..], &["--controls", "zeros.txt", "--out", "zero"]].concat())), 0);
    assert_eq!(
        fs::read(d.path().join("free/rollout.csv")).unwrap(),
        fs::read(d.path().join("zero/rollout.csv")).unwrap()
    );
    assert_eq!(fs::read_to_string(d.path().join("free/rollout.csv")).unwrap().lines().count(), 22);

    fs::write(d.path().join("short.txt"), "0.1\n0.2\n").unwrap();
    assert_eq!(
        code(&ksid(d.path(), &[&base[..], &["--controls", "short.txt", "--horizon", "5", "--out", "s"]].concat())),
        2
    );

    let mut broken = json(&d.path().join("id/system.json"));
    broken["a"].as_array_mut().unwrap().pop();
    fs::write(d.path().join("broken.json"), broken.to_string()).unwrap();
    let o = ksid(
        d.path(),
        &["rollout", "--system", "broken.json", "--theta", "0", "--theta-dot", "0", "--horizon", "3", "--out", "b"],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn compare_rows_follow_config() {
    let d = setup(SMALL);
    let o = ksid(d.path(), &["compare", "--config", "run.toml", "--out", "cmp"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.path().join("cmp/table.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("3,raw-only,"));
    assert_eq!(String::from_utf8(o.stdout).unwrap(), csv);

    let d = setup(&SMALL.replace("dims = [3]", "dims = []"));
    assert_eq!(code(&ksid(d.path(), &["compare", "--config", "run.toml", "--out", "cmp"])), 2);
}
