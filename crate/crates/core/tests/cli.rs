use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use langevin_soc::cli::{load_reference, main_with_args};

const SMALL: &str = r#"
seed = 3
[hjb]
n_nodes = 401
[reinforce]
batch_size = 4
n_gradient_steps = 2
test_every = 1
k_test = 4
[eval]
k_test = 8
k_estimate = 32
snapshot_points = 11
"#;

fn run(args: &[&dyn AsRef<std::ffi::OsStr>]) -> PathBuf {
    let mut argv = vec![OsString::from("langevin-soc")];
    argv.extend(args.iter().map(|a| a.as_ref().to_os_string()));
    main_with_args(argv).unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    (dir, cfg)
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn hjb_solve_writes_a_loadable_reference() {
    let (tmp, cfg) = setup();
    let out = tmp.path().join("runs");
    let dir = run(&[&"hjb-solve", &"--config", &cfg, &"--out-dir", &out]);
    assert!(dir.starts_with(&out));
    assert!(dir.file_name().unwrap().to_string_lossy().starts_with("hjb-solve-seed3-"));
    let csv = dir.join("hjb_solution.csv");
    assert_eq!(header(&csv), "s,psi,phi,u_opt");
    let sol = load_reference(&csv).unwrap();
    assert_eq!(sol.nodal_values().len(), 401);
    assert!(fs::read_to_string(dir.join("manifest.toml")).unwrap().contains("hjb-solve"));
}

#[test]
fn reinforce_then_evaluate_and_replay() {
    let (tmp, cfg) = setup();
    let out = tmp.path().join("runs");
    let hjb = run(&[&"hjb-solve", &"--config", &cfg, &"--out-dir", &out]);
    let train = run(&[&"run-reinforce", &"--config", &cfg, &"--out-dir", &out]);
    for f in ["learning_curve.csv", "returns.csv", "policy_snapshots.csv", "policy.mlp"] {
        assert!(train.join(f).exists(), "missing {f}");
    }
    // test points at steps 0, 1, 2
    assert_eq!(fs::read_to_string(train.join("learning_curve.csv")).unwrap().lines().count(), 4);

    let policy = train.join("policy.mlp");
    let reference = hjb.join("hjb_solution.csv");
    let eval = run(&[
        &"evaluate",
        &"--config",
        &cfg,
        &"--out-dir",
        &out,
        &"--policy",
        &policy,
        &"--reference",
        &reference,
    ]);
    let first = fs::read(eval.join("evaluation.csv")).unwrap();

    let again = run(&[&"replay", &eval.join("manifest.toml"), &"--out-dir", &tmp.path().join("again")]);
    assert_eq!(fs::read(again.join("evaluation.csv")).unwrap(), first);
    let retrained = run(&[&"replay", &train.join("manifest.toml"), &"--out-dir", &tmp.path().join("again")]);
    assert_eq!(
        fs::read(retrained.join("policy.mlp")).unwrap(),
        fs::read(train.join("policy.mlp")).unwrap()
    );
}

#[test]
fn seed_flag_changes_estimates() {
    let (tmp, cfg) = setup();
    let out = tmp.path().join("runs");
    let a = run(&[&"is-estimate", &"--config", &cfg, &"--out-dir", &out]);
    let b = run(&[&"is-estimate", &"--config", &cfg, &"--out-dir", &out, &"--seed", &"4"]);
    let text = fs::read_to_string(a.join("is_estimates.csv")).unwrap();
    assert_eq!(text.lines().count(), 3, "header plus zero and hjb rows:\n{text}");
    assert_ne!(text, fs::read_to_string(b.join("is_estimates.csv")).unwrap());
}
