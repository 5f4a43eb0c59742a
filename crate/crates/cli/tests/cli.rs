use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const FAST: &[&str] = &["--steps", "12", "--episodes", "2", "--batch-size", "16", "--width", "16"];

fn digflow(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_digflow"))
        .args(args)
        .env("DIGFLOW_OUT", out_root)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_config(dir: &Path) -> toml::Table {
    fs::read_to_string(dir.join("config.toml")).unwrap().parse().unwrap()
}

fn lambda(t: &toml::Table) -> f64 {
    t["train"]["dig"]["lambda"].as_float().unwrap()
}

fn data_rows(csv_text: &str) -> Vec<csv::StringRecord> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(csv_text.as_bytes())
        .records()
        .map(|r| r.unwrap())
        .collect()
}

#[test]
fn dedicated_flag_beats_set_which_beats_file() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("run.toml");
    fs::write(&file, "[train.dig]\nlambda = 0.1\n[train]\nwidth = 16\n").unwrap();
    let cfg = file.to_str().unwrap();

    let mut args = vec!["train", "--config", cfg];
    args.extend(FAST);
    let o = digflow(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(lambda(&run_config(&tmp.path().join("train/seed-0"))), 0.1);

    let out = tmp.path().join("set");
    let mut args = vec!["train", "--config", cfg, "--set", "train.dig.lambda=0.3", "--out", out.to_str().unwrap()];
    args.extend(FAST);
    assert!(digflow(&args, tmp.path()).status.success());
    assert_eq!(lambda(&run_config(&out.join("seed-0"))), 0.3);

    let out = tmp.path().join("flag");
    let mut args = vec![
        "train", "--config", cfg, "--set", "train.dig.lambda=0.3", "--lambda", "0.2", "--out",
        out.to_str().unwrap(),
    ];
    args.extend(FAST);
    let o = digflow(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(lambda(&run_config(&out.join("seed-0"))), 0.2);
    assert!(stderr(&o).contains("lambda = 0.2"), "resolved config goes to stderr");
}

#[test]
fn empty_config_file_resolves_to_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("empty.toml");
    fs::write(&file, "").unwrap();
    let o = digflow(&["train", "--config", file.to_str().unwrap(), "--steps", "2", "--episodes", "1"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let t = run_config(&tmp.path().join("train/seed-0"));
    let dig = &t["train"]["dig"];
    assert_eq!(dig["gate"]["tau"].as_float(), Some(1.0));
    assert_eq!(dig["lambda"].as_float(), Some(0.4));
    assert_eq!(dig["spectral_bound"].as_float(), Some(2.0));
    assert_eq!(dig["gate"]["g_min"].as_float(), Some(0.05));
    assert_eq!(dig["discrepancy"]["kind"].as_str(), Some("sliced_w2"));
    assert_eq!(dig["discrepancy"]["projections"].as_integer(), Some(32));
}

#[test]
fn unknown_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("bad.toml");
    fs::write(&file, "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = digflow(&["train", "--config", file.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("train.learning_rate") && e.contains("unknown field"), "{e}");
    assert!(!tmp.path().join("train").exists());
}

#[test]
fn malformed_number_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("bad.toml");
    fs::write(&file, "[train.dig.gate]\ntau = \"hot\"\n").unwrap();
    let o = digflow(&["train", "--config", file.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`train.dig.gate.tau`"), "{}", stderr(&o));

    let o = digflow(&["train", "--lambda", "abc"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--lambda"), "{}", stderr(&o));
}

#[test]
fn summary_is_byte_identical_across_runs_and_job_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("det");
    let run = |jobs: &str| {
        let mut args = vec!["train", "--set", "seeds=[0, 1, 2]", "--jobs", jobs, "--out", out.to_str().unwrap()];
        args.extend(FAST);
        let o = digflow(&args, tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
        (
            fs::read(out.join("summary.csv")).unwrap(),
            fs::read(out.join("loss_curve.csv")).unwrap(),
        )
    };
    let first = run("1");
    let second = run("1");
    let parallel = run("3");
    assert_eq!(first, second);
    assert_eq!(first, parallel);
    let text = String::from_utf8(first.0).unwrap();
    assert!(text.starts_with("# digflow "));
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][1], "3");
}

#[test]
fn verify_passes_with_a_five_row_table() {
    let tmp = tempfile::tempdir().unwrap();
    let o = digflow(&["verify"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 5, "{table}");
    assert!(rows.iter().all(|r| r.ends_with("PASS")), "{table}");
    let jsonl = fs::read_to_string(tmp.path().join("verify/verify.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0]["type"], "header");
    assert!(lines[1..].iter().all(|v| v["passed"] == true));
}

#[test]
fn discrepancy_ablation_writes_four_rows_with_error_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--axis", "discrepancy", "--seed", "3"];
    args.extend(FAST);
    let o = digflow(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = tmp.path().join("ablate-discrepancy");
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    let rows = data_rows(&summary);
    let names: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(names, ["sliced_w2(M=32)", "sinkhorn(eps=0.1)", "mmd_rbf(sigma=1)", "cosine_mean"]);
    let header = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(summary.as_bytes())
        .headers()
        .unwrap()
        .clone();
    assert!(header.iter().any(|h| h == "perturbed_mse_std"));
    for r in &rows {
        assert!(r.iter().skip(2).all(|v| v.parse::<f64>().unwrap().is_finite()));
    }
    let plot = data_rows(&fs::read_to_string(dir.join("ablate_discrepancy.csv")).unwrap());
    assert_eq!(plot.len(), 4);
    for i in 0..4 {
        assert!(dir.join(format!("{i:02}-{}", ["sliced_w2_M_32_", "sinkhorn_eps_0.1_", "mmd_rbf_sigma_1_", "cosine_mean"][i]))
            .join("seed-3/checkpoint.bin")
            .exists());
    }
}

#[test]
fn eval_from_checkpoint_matches_the_training_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--seed", "4", "--shortcut-fraction", "0.2"];
    args.extend(FAST);
    assert!(digflow(&args, tmp.path()).status.success());
    let ckpt = tmp.path().join("train/seed-4/checkpoint.bin");
    let o = digflow(&["eval", "--checkpoint", ckpt.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));

    let col = |path: &Path, name: &str| {
        let text = fs::read_to_string(path).unwrap();
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let i = r.headers().unwrap().iter().position(|h| h == name).unwrap();
        r.records().next().unwrap().unwrap()[i].to_string()
    };
    let trained = tmp.path().join("train/summary.csv");
    let evald = tmp.path().join("eval/summary.csv");
    assert_eq!(col(&trained, "clean_mse_mean"), col(&evald, "clean_mse_mean"));
    assert_eq!(col(&trained, "perturbed_mse_mean"), col(&evald, "perturbed_mse_mean"));

    let o = digflow(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--width", "32"], tmp.path());
    assert!(!o.status.success());
    let missing = tmp.path().join("nope.bin");
    let o = digflow(&["eval", "--checkpoint", missing.to_str().unwrap(), "--width", "16"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.bin"), "{}", stderr(&o));
}

#[test]
fn refine_sweep_writes_one_row_per_count() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["refine-sweep", "--set", "sweep.n_refine=[0, 2, 5]"];
    args.extend(FAST);
    let o = digflow(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let plot = data_rows(&fs::read_to_string(tmp.path().join("refine-sweep/refine_curve.csv")).unwrap());
    let xs: Vec<&str> = plot.iter().map(|r| &r[0]).collect();
    assert_eq!(xs, ["0", "2", "5"]);
}
