use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use contact_hj::semigroup::TieBreak;
use contact_hj_cli::{prepare, verify_suite, Overrides, RunConfig, Seeds};

const BIN: &str = env!("CARGO_BIN_EXE_contact-hj");

const SMALL: &str = r#"
[model]
name = "discounted_quadratic"

[[model.params.potential]]
amplitude = 1.0
wavevector = [1, 0]

[grid]
nodes = 16

[scheme]
dt = 0.04
v_count = 11
"#;

fn run(dir: &Path, config: &str, extra: &[&str]) -> Output {
    let path = dir.join("run.toml");
    fs::write(&path, config).unwrap();
    Command::new(BIN)
        .arg("--config")
        .arg(&path)
        .args(extra)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn verify_on_defaults_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = format!(
        "experiment = \"verify\"\noutput_dir = {:?}\n[model]\nname = \"discounted_quadratic\"\n",
        out
    );
    let o = run(tmp.path(), &cfg, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("verify.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("check,measured,bound,pass"));
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() >= 10);
    assert!(rows.iter().all(|r| r.ends_with(",true")), "{table}");
    // eps = 0: both perturbation checks are exactly zero
    for name in ["legendre_gap", "gronwall_deviation"] {
        let row = rows.iter().find(|r| r.starts_with(name)).unwrap();
        assert_eq!(row.split(',').nth(1), Some("0.0000000000000000e0"));
    }
}

#[test]
fn step_constraint_is_a_configuration_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = format!("experiment = \"solve\"\n{}", SMALL.replace("dt = 0.04", "dt = 1.5"));
    let o = run(tmp.path(), &cfg, &["--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(msg.contains("lambda*dt < 1"), "{msg}");
    assert!(msg.contains("lambda*dt = 1.5"), "{msg}");
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn missing_experiment_and_unknown_model_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), SMALL, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no experiment selected"));
    let o = run(
        tmp.path(),
        &SMALL.replace("discounted_quadratic", "quartic"),
        &["--experiment", "solve"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown model"));
}

#[test]
fn sweep_rows_decrease_and_record_thresholds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let cfg = format!(
        "experiment = \"sweep\"\nepsilons = [0.1, 0.05]\n{SMALL}\n[perturbation]\nname = \"bump_xpu\"\n"
    );
    let o = run(tmp.path(), &cfg, &["--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').take(2).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], 0.1);
    assert!(rows[1][1] < rows[0][1], "{text}");
    let m = manifest(&out);
    let th = m["thresholds"].as_array().unwrap();
    assert_eq!(th.len(), 2);
    for (t, delta) in th.iter().zip([0.3, 0.15]) {
        assert!((t["delta"].as_f64().unwrap() - delta).abs() < 1e-12);
        assert!(t["epsilon_delta"].as_f64().unwrap() > 0.0);
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

const STABILITY: &str = r#"
experiment = "stability"
seed = 5
epsilon = 0.05

[perturbation]
name = "bump_xpu"

[run]
probes = 3
horizon = 10.0
"#;

#[test]
fn runs_are_bitwise_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("det");
    let cfg = format!("{STABILITY}{SMALL}");
    let o = run(tmp.path(), &cfg, &["--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let first = files(&out);
    assert!(first.iter().any(|(n, _)| n == "decay.csv"));
    fs::remove_dir_all(&out).unwrap();
    let o = run(tmp.path(), &cfg, &["--out", out.to_str().unwrap(), "--workers", "2"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(first, files(&out));

    // a different seed moves the probes
    let o = run(tmp.path(), &cfg, &["--out", tmp.path().join("s6").to_str().unwrap(), "--seed", "6"]);
    assert_eq!(o.status.code(), Some(0));
    let decay = |d: &Path| fs::read(d.join("decay.csv")).unwrap();
    assert_ne!(decay(&out), decay(&tmp.path().join("s6")));
    assert_eq!(manifest(&tmp.path().join("s6"))["seeds"]["run"], 6);
}

#[test]
fn manifest_alone_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let o = run(tmp.path(), &format!("{STABILITY}{SMALL}"), &["--out", a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let b = tmp.path().join("b");
    let o = Command::new(BIN)
        .arg("--config")
        .arg(a.join("manifest.json"))
        .arg("--out")
        .arg(&b)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["decay.csv", "u_eps.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma["results"], mb["results"]);
    assert_eq!(ma["thresholds"], mb["thresholds"]);
}

#[test]
fn output_directory_creation_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("deep").join("nested");
    let cfg = format!("experiment = \"oracle\"\n{}", SMALL.replace("nodes = 16", "nodes = 8").replace("v_count = 11", "v_count = 5"));
    let o = run(tmp.path(), &cfg, &["--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(manifest(&out)["output_dir_created"], true);
    let o = run(tmp.path(), &cfg, &["--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(manifest(&out)["output_dir_created"], false);
}

#[test]
fn config_experiment_wins_over_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let cfg = format!("experiment = \"solve\"\n{SMALL}");
    let o = run(tmp.path(), &cfg, &["--out", out.to_str().unwrap(), "--experiment", "evolve"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("conflicts with config experiment"));
    assert!(out.join("solution.csv").exists());
    assert!(!out.join("trace").exists());
    assert_eq!(manifest(&out)["experiment"], "solve");
}

#[test]
fn falsified_invariant_exits_two_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = format!("experiment = \"audit\"\n{SMALL}\n[run]\naudit_tol = 1e-9\n");
    let o = run(tmp.path(), &cfg, &["--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("calibration defect <= audit_tol violated"), "{msg}");
    assert!(msg.contains("from node 4"), "{msg}");
    let m = manifest(&tmp.path().join("o"));
    assert_eq!(m["falsified"].as_array().unwrap().len(), 1);
}

#[test]
fn enumeration_order_ties_break_only_reproducibility() {
    let cfg = RunConfig::from_toml("experiment = \"verify\"\n[model]\nname = \"discounted_quadratic\"\n").unwrap();
    let (mut r, _, _) = prepare(cfg, &Overrides::default()).unwrap();
    let seeds = Seeds::new(0);
    let good = verify_suite(&r, &seeds).unwrap();
    assert!(good.all_pass(), "{:?}", good.failures());
    r.params.tie_break = TieBreak::EnumerationOrder;
    let bad = verify_suite(&r, &seeds).unwrap();
    assert!(bad.get("monotonicity").unwrap().pass);
    assert!(!bad.get("bitwise_reproducibility").unwrap().pass);
    let names: Vec<&str> = bad.failures().iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, ["bitwise_reproducibility"]);
}

#[test]
fn perturbed_verify_passes() {
    let cfg = RunConfig::from_toml(&format!(
        "experiment = \"verify\"\nepsilon = 0.05\n{SMALL}\n[perturbation]\nname = \"bump_xpu\"\n"
    ))
    .unwrap();
    let (r, _, _) = prepare(cfg, &Overrides::default()).unwrap();
    let t = verify_suite(&r, &Seeds::new(3)).unwrap();
    assert!(t.all_pass(), "{:?}", t.failures());
    let gap = t.get("legendre_gap").unwrap();
    assert!(gap.measured > 0.0 && gap.measured <= 0.05 + 2e-10);
    assert!(t.get("gronwall_deviation").unwrap().measured > 0.0);
    assert!(t.epsilon_delta.unwrap() >= 0.05);
}

#[test]
fn shipped_example_configs_resolve() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = RunConfig::load(&path).unwrap();
            let (_, exp, _) = prepare(cfg, &Overrides::default())
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert!(path.file_stem().unwrap().to_str().unwrap().starts_with(&exp.to_string()));
            seen += 1;
        }
    }
    assert_eq!(seen, 8);
}
