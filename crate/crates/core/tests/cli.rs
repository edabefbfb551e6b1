use std::path::Path;
use std::process::{Command, Output};

fn dirinet(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dirinet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn dirinet")
}

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("synth.cfg"), "n_nodes = 8\ndays = 1\n").unwrap();
    std::fs::write(d.join("as.txt"), "id\ns000\ns002\ns003\ns005\ns007\n").unwrap();
    std::fs::write(d.join("vs.txt"), "s001\ns004\ns006\n").unwrap();
    assert!(dirinet(d, &["synth", "--config", "synth.cfg", "--out-dir", "data"]).status.success());
    let out = dirinet(
        d,
        &["graph-build", "--nodes", "data/nodes.csv", "--distances", "data/distances.csv", "--out", "g.json"],
    );
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("N=8 edges="));
    tmp
}

#[test]
fn propagate_writes_estimates_and_manifest() {
    let tmp = setup();
    let d = tmp.path();
    let out = dirinet(
        d,
        &["propagate", "--graph", "g.json", "--readings", "data/readings.csv", "--observed", "as.txt", "--out", "p.csv"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 24);
    let est = dirinet::data::load_speed_csv(&d.join("p.csv")).unwrap();
    assert_eq!(est.missing_rate(), 0.0);
    let manifest = std::fs::read_to_string(d.join("p.csv.manifest")).unwrap();
    for key in ["command = propagate", "input.readings.sha256 = ", "output.estimates.sha256 = ", "mode = coupled"] {
        assert!(manifest.contains(key), "missing `{key}`");
    }
}

#[test]
fn decoupled_mode_requires_reference_speed() {
    let tmp = setup();
    let d = tmp.path();
    let base = ["propagate", "--graph", "g.json", "--readings", "data/readings.csv", "--observed", "as.txt"];
    let missing = dirinet(d, &[&base[..], &["--mode", "decoupled", "--out", "x.csv"]].concat());
    assert_eq!(missing.status.code(), Some(2));
    let bad = dirinet(d, &[&base[..], &["--mode", "decoupled", "--vref", "fast", "--out", "x.csv"]].concat());
    assert_eq!(bad.status.code(), Some(2));
    let ok = dirinet(d, &[&base[..], &["--mode", "decoupled", "--vref", "65", "--out", "x.csv"]].concat());
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
}

#[test]
fn exit_codes_distinguish_input_protocol_and_checkpoint_errors() {
    let tmp = setup();
    let d = tmp.path();
    assert_eq!(dirinet(d, &["no-such-command"]).status.code(), Some(2));
    let missing_file = dirinet(
        d,
        &["propagate", "--graph", "nope.json", "--readings", "data/readings.csv", "--observed", "as.txt", "--out", "p.csv"],
    );
    assert_eq!(missing_file.status.code(), Some(2));

    std::fs::write(d.join("unknown.txt"), "s999\n").unwrap();
    let unknown = dirinet(
        d,
        &["propagate", "--graph", "g.json", "--readings", "data/readings.csv", "--observed", "unknown.txt", "--out", "p.csv"],
    );
    assert_eq!(unknown.status.code(), Some(2));

    std::fs::write(d.join("vs_bad.txt"), "s042\n").unwrap();
    let protocol = dirinet(
        d,
        &["eval", "--estimates", "data/truth.csv", "--truth", "data/truth.csv", "--vs", "vs_bad.txt", "--out", "r.csv"],
    );
    assert_eq!(protocol.status.code(), Some(3));

    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let ckpt = dirinet(
        d,
        &[
            "estimate", "--checkpoint", "junk.ckpt", "--graph", "g.json", "--readings", "data/readings.csv",
            "--observed", "as.txt", "--out", "e.csv",
        ],
    );
    assert_eq!(ckpt.status.code(), Some(4));
}

#[test]
fn eval_reports_truth_against_itself_as_exact() {
    let tmp = setup();
    let d = tmp.path();
    let out = dirinet(
        d,
        &[
            "eval", "--estimates", "data/truth.csv", "--truth", "data/truth.csv", "--vs", "vs.txt", "--distances",
            "data/distances.csv", "--out", "r.csv",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(d.join("r.csv")).unwrap();
    let row: Vec<&str> = report.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "3");
    assert_eq!(row[1], "0.800000");
    assert_eq!(&row[2..5], ["0.000000", "0.000000", "0.000000"]);
    assert_eq!(row[5], (3 * 288).to_string());
}

#[test]
fn train_and_estimate_round_trip() {
    let tmp = setup();
    let d = tmp.path();
    std::fs::write(d.join("t.cfg"), "hidden = 4\nlatent = 2\ntime_dim = 2\nmask_dim = 2\nmax_epochs = 2\n").unwrap();
    let train = dirinet(
        d,
        &[
            "train", "--graph", "g.json", "--readings", "data/readings.csv", "--config", "t.cfg", "--vs", "vs.txt",
            "--out-checkpoint", "m.ckpt", "--seed", "2",
        ],
    );
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let history = std::fs::read_to_string(d.join("m.ckpt.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,mean_loss,batches\n0,"));
    let manifest = std::fs::read_to_string(d.join("m.ckpt.manifest")).unwrap();
    assert!(manifest.contains("seed = 2"));
    assert!(manifest.contains("model.hidden = 4"));

    let est = dirinet(
        d,
        &[
            "estimate", "--checkpoint", "m.ckpt", "--graph", "g.json", "--readings", "data/readings.csv",
            "--observed", "as.txt", "--out", "e.csv",
        ],
    );
    assert!(est.status.success(), "{}", String::from_utf8_lossy(&est.stderr));
    let e = dirinet::data::load_speed_csv(&d.join("e.csv")).unwrap();
    assert_eq!(e.len(), 288);
    assert_eq!(e.missing_rate(), 0.0);
}

#[test]
fn replay_refuses_changed_inputs() {
    let tmp = setup();
    let d = tmp.path();
    assert!(dirinet(
        d,
        &["propagate", "--graph", "g.json", "--readings", "data/readings.csv", "--observed", "as.txt", "--out", "p.csv"],
    )
    .status
    .success());
    std::fs::write(d.join("as.txt"), "s000\ns001\n").unwrap();
    let out = dirinet(d, &["replay", "--manifest", "p.csv.manifest"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("changed"));
}
