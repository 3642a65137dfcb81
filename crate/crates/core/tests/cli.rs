use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kolsens::cli::Summary;
use kolsens::engine::SensitivityReport;

const BIN: &str = env!("CARGO_BIN_EXE_kolsens");

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn kolsens(config: &Path, extra: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.arg("--config").arg(config).args(extra);
    match threads {
        Some(n) => cmd.env("KOLSENS_THREADS", n),
        None => cmd.env_remove("KOLSENS_THREADS"),
    };
    cmd.output().unwrap()
}

fn summary(out: &Path) -> Summary {
    let text = fs::read_to_string(kolsens::cli::summary_path(out)).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn complexity_prints_unit_case() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "command = \"complexity\"\n[complexity]\nd = 1\nN = 1\nM0 = 1\nM1 = 1\n");
    let out = kolsens(&cfg, &[], None);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "6");
}

#[test]
fn eps_sweep_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "s.toml",
        "command = \"eps-sweep\"\ndrift = [1.0]\nvol = [1.0]\ngamma = 1.0\neta = 0.0\n\
         epsilons = [0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.1]\n[fd]\nnx = 1001\n",
    );
    let csv = dir.path().join("sweep.csv");
    let out = kolsens(&cfg, &["--out", csv.to_str().unwrap(), "--seed", "5"], None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epsilon,v_fd,approx,abs_error"));
    assert_eq!(lines.count(), 10);
    let s = summary(&csv);
    assert_eq!(s.seed, 5);
    assert_eq!(s.version, env!("CARGO_PKG_VERSION"));
    assert_eq!(s.config_hash.len(), 64);
    let slope = s.slope.unwrap();
    assert!((1.7..=2.3).contains(&slope), "slope {slope}");
}

#[test]
fn dim_sweep_rows_follow_input_order_and_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "d.toml",
        "command = \"dim-sweep\"\nboundary = \"sine\"\n[mc]\nN = 10\nM0 = 2000\nM1 = 200\nruns = 2\nseed = 3\n\
         [dim_sweep]\ndims = [5, 1, 3]\n",
    );
    let strip = |p: &Path| -> Vec<String> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    let mut tables = vec![];
    for (i, threads) in [Some("1"), Some("3"), None].into_iter().enumerate() {
        let out_path = dir.path().join(format!("d{i}.csv"));
        let out = kolsens(&cfg, &["--out", out_path.to_str().unwrap()], threads);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        tables.push(strip(&out_path));
    }
    let header = fs::read_to_string(dir.path().join("d0.csv")).unwrap();
    assert!(header.lines().next().unwrap().ends_with(",lambda_min,runtime_seconds"));
    let ds: Vec<&str> = tables[0][1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ds, ["5", "1", "3"]);
    assert_eq!(tables[0], tables[1]);
    assert_eq!(tables[0], tables[2]);
}

#[test]
fn approx_json_has_exact_fields_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "a.json",
        r#"{"command": "approx", "drift": [1.0], "vol": [1.0], "gamma": 1.0, "eta": 1.0, "epsilon": 0.05,
            "mc": {"N": 10, "M0": 5000, "M1": 100, "runs": 1}}"#,
    );
    let path = dir.path().join("a.out.json");
    let out = kolsens(&cfg, &["--out", path.to_str().unwrap(), "--format", "json"], None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&path).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    let mut keys: Vec<&str> = value.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    let mut expected = vec![
        "v0", "sens_drift", "sens_vol", "gamma", "eta", "epsilon", "approx", "used_hessian_path",
        "runtime_seconds", "predicted_ops", "seed", "d", "N", "M0", "M1", "h",
    ];
    expected.sort_unstable();
    assert_eq!(keys, expected);
    let report: SensitivityReport = serde_json::from_str(&text).unwrap();
    let again: SensitivityReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(report, again);
    assert_eq!(report.approx.to_bits(), report.approx_at(&kolsens::UncertaintySpec::new(1.0, 1.0, 0.05).unwrap()).to_bits());
}

#[test]
fn flags_override_and_hash_tracks_meaningful_changes() {
    let dir = tempfile::tempdir().unwrap();
    let base = "command = \"value\"\nboundary = \"sine\"\ndrift = [1.0]\nvol = [1.0]\n[mc]\nN = 4\nM0 = 1000\nM1 = 10\nruns = 3\n";
    let cfg = write(dir.path(), "v.toml", base);
    let run = |extra: &[&str], name: &str| -> Summary {
        let p = dir.path().join(name);
        let mut args = vec!["--out", p.to_str().unwrap()];
        args.extend_from_slice(extra);
        let out = kolsens(&cfg, &args, None);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        summary(&p)
    };
    let a = run(&[], "a.csv");
    let b = run(&["--format", "json"], "b.json");
    let c = run(&["--seed", "9"], "c.csv");
    let d = run(&["--runs", "2"], "d.csv");
    assert_eq!(a.config_hash, b.config_hash);
    assert_ne!(a.config_hash, c.config_hash);
    assert_ne!(a.config_hash, d.config_hash);
    assert_eq!(c.seed, 9);
    assert_eq!(d.runs, 2);
    let table = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert!(table.starts_with("quantity,mean,std_dev,std_error,runs\nv0,"));
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "s.toml",
        "command = \"sensitivity\"\nboundary = \"sine\"\n[generate]\ndim = 3\nseed = 4\n[mc]\nN = 5\nM0 = 500\nM1 = 50\nruns = 2\n",
    );
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for (p, threads) in [(&a, "1"), (&b, "2")] {
        let out = kolsens(&cfg, &["--out", p.to_str().unwrap(), "--sampling", "path"], Some(threads));
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", "command = \"value\"\nbogus = 1\n");
    assert_eq!(kolsens(&bad, &[], None).status.code(), Some(2));
    let missing = dir.path().join("missing.toml");
    assert_eq!(kolsens(&missing, &[], None).status.code(), Some(2));
    let external = write(dir.path(), "e.toml", "command = \"value\"\ndrift = [1.0]\nvol = [1.0]\nboundary = \"external\"\n");
    assert_eq!(kolsens(&external, &[], None).status.code(), Some(2));
    let bad_pool = write(dir.path(), "p.toml", "command = \"value\"\ndrift = [1.0]\nvol = [1.0]\n[mc]\nM0 = 5\nM1 = 10\n");
    assert_eq!(kolsens(&bad_pool, &[], None).status.code(), Some(2));

    let unstable = write(dir.path(), "u.toml", "command = \"fd-solve\"\ndrift = [1.0]\nvol = [1.0]\n[fd]\nnx = 201\nnt = 3\n");
    assert_eq!(kolsens(&unstable, &[], None).status.code(), Some(3));

    let regime = write(
        dir.path(),
        "r.toml",
        "command = \"approx\"\ndrift = [1.0]\nvol = [0.5]\nepsilon = 0.7\n[mc]\nN = 2\nM0 = 100\nM1 = 10\nruns = 1\n",
    );
    assert_eq!(kolsens(&regime, &["--strict"], None).status.code(), Some(4));
    assert_eq!(kolsens(&regime, &[], None).status.code(), Some(0));

    assert_eq!(kolsens(&bad, &["--format", "xml"], None).status.code(), Some(2));
    let threads = write(dir.path(), "t.toml", "command = \"complexity\"\n[complexity]\nd = 1\n");
    assert_eq!(kolsens(&threads, &[], Some("zero")).status.code(), Some(2));
}

#[test]
fn fd_solve_outputs_profile_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "f.toml",
        "command = \"fd-solve\"\ndrift = [1.0]\nvol = [1.0]\ngamma = 1.0\neta = 0.0\nepsilon = 0.1\n[fd]\nnx = 401\n",
    );
    let csv = dir.path().join("f.csv");
    let out = kolsens(&cfg, &["--out", csv.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("x,v\n"));
    assert_eq!(text.lines().count(), 402);
    let fd = summary(&csv).fd.unwrap();
    assert!((fd.v_fd - 11.64).abs() < 0.2, "{}", fd.v_fd);
}
