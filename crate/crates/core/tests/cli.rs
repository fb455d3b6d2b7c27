use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "n_train = 6
n_test = 4
[train]
iters = 4
batch = 2
eval_every = 2
[model]
widths = [6]
[ao]
outer_iters = 2
inner_steps = 2
restarts = 0
[gradcheck]
scenarios = 1
params_per_scenario = 30
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uavgnn"))
        .current_dir(dir)
        .env_remove("UAVGNN_OUT")
        .args(args)
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn data_rows(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
}

#[test]
fn gen_is_reproducible_and_guarded() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(
        run(d, &["--config", "small.toml", "--out", "a", "gen"]).status.code(),
        Some(0)
    );
    assert_eq!(
        run(d, &["--config", "small.toml", "--out", "b", "gen"]).status.code(),
        Some(0)
    );
    for f in ["train.jsonl", "test.jsonl"] {
        let a = std::fs::read(d.join("a").join(f)).unwrap();
        let b = std::fs::read(d.join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let train = std::fs::read_to_string(d.join("a/train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 1 + 6);
    let meta = std::fs::read_to_string(d.join("a/gen_meta.json")).unwrap();
    assert!(meta.contains("\"config_hash\"") && meta.contains("\"n_train\": 6"));

    let again = run(d, &["--config", "small.toml", "--out", "a", "gen"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert_eq!(
        run(d, &["--config", "small.toml", "--out", "a", "--force", "gen"])
            .status
            .code(),
        Some(0)
    );
}

#[test]
fn invalid_config_names_field() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.toml"), "[generator]\nn_uav = 0\n").unwrap();
    let out = run(dir.path(), &["--config", "bad.toml", "gen"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("generator.n_uav"));
    let out = run(dir.path(), &["eval", "--scheme", "greedy"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn env_sets_output_dir_and_flag_wins() {
    let dir = setup();
    let d = dir.path();
    let status = Command::new(env!("CARGO_BIN_EXE_uavgnn"))
        .current_dir(d)
        .env("UAVGNN_OUT", "from-env")
        .args(["--config", "small.toml", "gen"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(d.join("from-env/train.jsonl").exists());
    let status = Command::new(env!("CARGO_BIN_EXE_uavgnn"))
        .current_dir(d)
        .env("UAVGNN_OUT", "from-env")
        .args(["--config", "small.toml", "--out", "from-flag", "gen"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(d.join("from-flag/train.jsonl").exists());
}

#[test]
fn train_then_eval_every_scheme() {
    let dir = setup();
    let d = dir.path();
    let with = |extra: &[&'static str]| -> Vec<&'static str> {
        [&["--config", "small.toml", "--out", "o"][..], extra].concat()
    };
    assert!(run(d, &with(&["gen"])).status.success());
    let t = run(d, &with(&["train"]));
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));

    let hist = std::fs::read_to_string(d.join("o/history.csv")).unwrap();
    assert!(hist.contains("# config_hash "));
    assert!(hist.contains("# tool uavgnn "));
    let iters: Vec<&str> = data_rows(&hist).iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iters, ["0", "2", "4"]);
    let ckpt = std::fs::read_to_string(d.join("o/model.ckpt")).unwrap();
    assert!(ckpt.lines().any(|l| l.starts_with("config {")));

    let mut ids = Vec::new();
    for scheme in ["gnn", "random", "fixed_power", "ao"] {
        let e = run(d, &with(&["eval", "--scheme", scheme]));
        assert!(e.status.success(), "{scheme}: {}", String::from_utf8_lossy(&e.stderr));
        let csv = std::fs::read_to_string(d.join(format!("o/metrics_{scheme}.csv"))).unwrap();
        let rows = data_rows(&csv);
        assert_eq!(rows.len(), 4 + 1);
        assert!(rows.last().unwrap().starts_with(&format!("{scheme},mean,")));
        ids.push(
            rows.iter()
                .map(|r| r.split(',').nth(1).unwrap().to_owned())
                .collect::<Vec<_>>(),
        );
    }
    assert!(ids.windows(2).all(|w| w[0] == w[1]));

    // the final logged test sum rate is reproduced from the checkpoint
    let last = data_rows(&hist).last().unwrap().split(',').nth(2).unwrap().to_owned();
    let gnn = std::fs::read_to_string(d.join("o/metrics_gnn.csv")).unwrap();
    let mean = data_rows(&gnn).last().unwrap().split(',').nth(2).unwrap().to_owned();
    assert_eq!(last, mean);

    let o = run(d, &with(&["eval", "--scheme", "oracle"]));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cap"));
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let dir = setup();
    let out = run(dir.path(), &["--config", "small.toml", "--out", "empty", "train"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn sweep_writes_one_row_per_value_with_hashes() {
    let dir = setup();
    let d = dir.path();
    let out = run(
        d,
        &[
            "--config",
            "small.toml",
            "--out",
            "s",
            "sweep",
            "--axis",
            "N",
            "--values",
            "1,2",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(d.join("s/sweep_N.csv")).unwrap();
    let header = csv.lines().find(|l| !l.starts_with('#')).unwrap();
    assert!(header.starts_with("axis,value,n_uav,n_du,n_d2d,gnn_sum_rate"));
    assert!(header.ends_with(",config_hash"));
    let rows = data_rows(&csv);
    assert_eq!(rows.len(), 2);
    let hashes: Vec<&str> = rows.iter().map(|r| r.rsplit(',').next().unwrap()).collect();
    assert_ne!(hashes[0], hashes[1]);
    assert!(hashes.iter().all(|h| h.len() == 16));

    let bad = run(
        d,
        &[
            "--config",
            "small.toml",
            "--out",
            "s2",
            "sweep",
            "--axis",
            "M",
            "--values",
            "3,2",
        ],
    );
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_blocks_and_threshold() {
    let dir = setup();
    let d = dir.path();
    let out = run(d, &["--config", "small.toml", "--out", "g", "gradcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("layer1.msg.hidden.weight"));
    assert!(stdout.contains("head.yellow.bias"));
    std::fs::write(d.join("strict.toml"), format!("{SMALL}threshold = 1e-300\n")).unwrap();
    let out = run(d, &["--config", "strict.toml", "--out", "g", "--force", "gradcheck"]);
    assert_eq!(out.status.code(), Some(4));
}
