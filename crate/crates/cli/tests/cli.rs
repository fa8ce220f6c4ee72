use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 11

[grid]
case = "pair2"

[excitation]
durations = [12.0, 6.0, 6.0, 6.0]
period = 1.0
amplitude = 0.2

[slicing]
history = 8
horizon = 4
stride = 8
test_window = 100

[model]
history = 8
hidden_layers = 1
hidden_width = 8
tcn_channels = 4
tcn_kernel = 2

[training]
batch_size = 32
learning_rate = 0.003
max_epochs = 3
patience = 10
"#;

fn gridnode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridnode"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = gridnode(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("study.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn simulate_is_deterministic_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    for run in ["a", "b"] {
        ok(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join(run))]);
    }
    ok(&["--seed", "12", "simulate", "--config", s(&cfg), "--out", s(&dir.path().join("c"))]);
    let read = |run: &str, j: usize| std::fs::read(dir.path().join(run).join(format!("trajectory_{j}.csv"))).unwrap();
    for j in 1..=4 {
        assert_eq!(read("a", j), read("b", j));
        assert_ne!(read("a", j), read("c", j));
    }
    let text = String::from_utf8(read("a", 1)).unwrap();
    assert!(text.starts_with("time,node,u,omega,v,omega_noisy,v_noisy,delta_diag\n"));
}

#[test]
fn pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let cfg = write_config(p, SMALL);
    ok(&["simulate", "--config", s(&cfg), "--out", s(&p.join("traj"))]);
    let out = ok(&["dataset", "--config", s(&cfg), "--traj", s(&p.join("traj")), "--out", s(&p.join("data"))]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("d4.gnds (5 samples x 2 nodes, H=100 K=100 D=100)"), "{text}");
    ok(&["train", "--config", s(&cfg), "--data", s(&p.join("data")), "--out", s(&p.join("ck/mpg.gnck"))]);
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&p.join("data")),
        "--model",
        "monolith",
        "--out",
        s(&p.join("ck/mono.gnck")),
    ]);
    let report = std::fs::read_to_string(p.join("ck/mpg_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 5);
    assert_eq!(report.lines().next(), Some("epoch,train_loss,val_loss,best"));

    ok(&[
        "eval",
        "--ckpt",
        s(&p.join("ck/mpg.gnck")),
        "--ckpt",
        s(&p.join("ck/mono.gnck")),
        "--data",
        s(&p.join("data/d4.gnds")),
        "--out",
        s(&p.join("eval")),
    ]);
    let agg = std::fs::read_to_string(p.join("eval/aggregate.csv")).unwrap();
    let rows: Vec<&str> = agg.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for model in ["mpg", "monolith"] {
        assert_eq!(rows.iter().filter(|r| r.split(',').nth(1) == Some(model)).count(), 2);
    }
    let table = std::fs::read_to_string(p.join("eval/eval_mpg.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 5 * 2 * 2);
    let traj = std::fs::read_to_string(p.join("eval/trajectory.csv")).unwrap();
    assert!(traj.starts_with("time,node,omega_true,omega_measured,v_true,v_measured,omega_mpg,v_mpg,omega_monolith,v_monolith\n"));
    assert_eq!(traj.lines().count(), 1 + 100 * 2);
}

#[test]
fn sweep_ranks_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let text = format!(
        "{SMALL}\n[sweep]\nhidden_layers = [1]\nhidden_width = [4, 8]\ntcn_channels = [4]\nlearning_rate = [0.001, 0.01]\n"
    );
    let cfg = write_config(p, &text.replace("max_epochs = 3", "max_epochs = 2"));
    ok(&["simulate", "--config", s(&cfg), "--out", s(&p.join("traj"))]);
    ok(&["dataset", "--config", s(&cfg), "--traj", s(&p.join("traj")), "--out", s(&p.join("data"))]);
    ok(&["sweep", "--config", s(&cfg), "--data", s(&p.join("data")), "--out", s(&p.join("sweep"))]);
    let csv = std::fs::read_to_string(p.join("sweep/sweep.csv")).unwrap();
    let losses: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(6).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 4);
    assert!(losses.windows(2).all(|w| w[0] <= w[1]));
    assert!(p.join("sweep/best.gnck").exists());
}

#[test]
fn config_prints_canonical_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let first = ok(&["config", "--config", s(&cfg)]).stdout;
    let canon = dir.path().join("canon.toml");
    std::fs::write(&canon, &first).unwrap();
    assert_eq!(ok(&["config", "--config", s(&canon)]).stdout, first);
    assert_eq!(ok(&["config"]).stdout, ok(&["config"]).stdout);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(gridnode(&["simulate", "--bogus"]).status.code(), Some(2));
    assert_eq!(gridnode(&["simulate", "--config", s(&p.join("missing.toml")), "--out", s(p)]).status.code(), Some(4));

    let bad = write_config(p, "[grid]\ncase = \"ieee14\"\n");
    let out = gridnode(&["simulate", "--config", s(&bad), "--out", s(p)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ieee14"));
    let unknown = write_config(p, "seeed = 1\n");
    assert_eq!(gridnode(&["config", "--config", s(&unknown)]).status.code(), Some(2));

    let cfg = write_config(p, SMALL);
    ok(&["simulate", "--config", s(&cfg), "--out", s(&p.join("traj"))]);
    assert_eq!(
        gridnode(&["dataset", "--config", s(&cfg), "--traj", s(&p.join("nowhere")), "--out", s(&p.join("data"))])
            .status
            .code(),
        Some(4)
    );
    ok(&["dataset", "--config", s(&cfg), "--traj", s(&p.join("traj")), "--out", s(&p.join("data"))]);
    let wild = write_config(p, &SMALL.replace("learning_rate = 0.003", "learning_rate = 1e12"));
    let out = gridnode(&["train", "--config", s(&wild), "--data", s(&p.join("data")), "--out", s(&p.join("x.gnck"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let other = write_config(p, &SMALL.replace("pair2", "triangle3"));
    let out = gridnode(&["dataset", "--config", s(&other), "--traj", s(&p.join("traj")), "--out", s(&p.join("d2"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6, "{text}");
}
