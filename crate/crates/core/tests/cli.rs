use std::path::Path;
use std::process::{Command, Output};

use dronekey::cli::{EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE};
use dronekey::datamodel::{load_dataset, save_jsonl, KeypointPrediction, Keypoints2D};
use dronekey::pose3d::load_pose_lines;

const SUBCOMMANDS: [&str; 10] = [
    "generate",
    "train",
    "predict",
    "solve-pose",
    "smooth",
    "eval-kp",
    "eval-pose",
    "gradcheck",
    "gate-dump",
    "pipeline",
];

fn dronekey(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dronekey"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(args: &[&str]) -> i32 {
    dronekey(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    assert_eq!(code(&["--help"]), EXIT_OK);
    for sub in SUBCOMMANDS {
        let out = dronekey(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(EXIT_OK), "{sub} --help");
        assert!(
            String::from_utf8_lossy(&out.stdout).contains("Usage"),
            "{sub}"
        );
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&[]), EXIT_USAGE);
    let out = dronekey(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(
        code(&["generate", "--out", "x.jsonl", "--bogus"]),
        EXIT_USAGE
    );
    assert_eq!(code(&["generate"]), EXIT_USAGE);
    assert_eq!(
        code(&["solve-pose", "--data", "d", "--out", "o"]),
        EXIT_USAGE
    );
    assert_eq!(
        code(&[
            "solve-pose",
            "--data",
            "d",
            "--out",
            "o",
            "--use-gt",
            "--use-obs"
        ]),
        EXIT_USAGE
    );
    assert_eq!(code(&["--threads", "0", "gradcheck"]), EXIT_USAGE);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = dir.path().join("out.jsonl");
    assert_eq!(
        code(&[
            "solve-pose",
            "--data",
            p(&missing),
            "--use-gt",
            "--out",
            p(&out)
        ]),
        EXIT_DATA
    );

    let garbage = dir.path().join("garbage.jsonl");
    std::fs::write(&garbage, "{\"meta\":{}}\nnot json\n").unwrap();
    assert_eq!(
        code(&["eval-kp", "--data", p(&garbage), "--pred", p(&garbage)]),
        EXIT_DATA
    );

    let data = dir.path().join("d.jsonl");
    assert_eq!(
        code(&[
            "--quiet",
            "generate",
            "--out",
            p(&data),
            "--frames",
            "4",
            "--translation"
        ]),
        EXIT_OK
    );
    let config = dir.path().join("cfg.json");
    std::fs::write(&config, "{\"epochs\": 1, \"no_such_field\": 3}").unwrap();
    let ckpt = dir.path().join("m.json");
    assert_eq!(
        code(&[
            "train",
            "--data",
            p(&data),
            "--config",
            p(&config),
            "--out",
            p(&ckpt)
        ]),
        EXIT_DATA
    );
    std::fs::write(&config, "{\"batch_size\": 0}").unwrap();
    assert_eq!(
        code(&[
            "train",
            "--data",
            p(&data),
            "--config",
            p(&config),
            "--out",
            p(&ckpt)
        ]),
        EXIT_DATA
    );

    // infeasible depth range for the model size
    assert_eq!(
        code(&[
            "generate",
            "--out",
            p(&out),
            "--depth-min",
            "1.0",
            "--depth-max",
            "1.1"
        ]),
        EXIT_DATA
    );

    let poses = dir.path().join("poses.jsonl");
    assert_eq!(
        code(&[
            "--quiet",
            "solve-pose",
            "--data",
            p(&data),
            "--use-gt",
            "--out",
            p(&poses)
        ]),
        EXIT_OK
    );
    assert_eq!(
        code(&["smooth", "--in", p(&poses), "--out", p(&out), "--q-pos=-1"]),
        EXIT_DATA
    );
}

#[test]
fn degenerate_keypoints_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    assert_eq!(
        code(&["--quiet", "generate", "--out", p(&data), "--frames", "3"]),
        EXIT_OK
    );
    let ds = load_dataset(&data).unwrap();
    let collapsed: Vec<KeypointPrediction> = ds
        .records
        .iter()
        .map(|r| {
            KeypointPrediction::new(
                &r.sequence_id,
                r.frame_id,
                &Keypoints2D::from_array([[5.0, 5.0]; 4]),
            )
        })
        .collect();
    let pred = dir.path().join("pred.jsonl");
    save_jsonl(&collapsed, &pred).unwrap();
    let out = dir.path().join("poses.jsonl");
    assert_eq!(
        code(&[
            "solve-pose",
            "--data",
            p(&data),
            "--pred",
            p(&pred),
            "--out",
            p(&out)
        ]),
        EXIT_NUMERICAL
    );
    assert!(!out.exists());
}

#[test]
fn gradcheck_passes() {
    let out = dronekey(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("loss") && text.contains("network"), "{text}");
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let f = |name: &str| dir.path().join(name);
    let run = |args: &[&str]| {
        let out = dronekey(args);
        assert_eq!(
            out.status.code(),
            Some(EXIT_OK),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    };
    run(&[
        "--quiet",
        "--seed",
        "3",
        "generate",
        "--out",
        p(&f("d.jsonl")),
        "--frames",
        "6",
        "--translation",
        "--rotation",
        "--sigma",
        "1.5",
        "--depth-min",
        "1",
        "--depth-max",
        "2",
    ]);
    std::fs::write(f("cfg.json"), "{\"epochs\": 2, \"learning_rate\": 0.001}").unwrap();
    run(&[
        "--quiet",
        "train",
        "--data",
        p(&f("d.jsonl")),
        "--config",
        p(&f("cfg.json")),
        "--out",
        p(&f("m.json")),
        "--log",
        p(&f("log.csv")),
    ]);
    let log = std::fs::read_to_string(f("log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,loss,scale"));
    assert_eq!(log.lines().count(), 3);

    run(&[
        "--quiet",
        "train",
        "--data",
        p(&f("d.jsonl")),
        "--init",
        p(&f("m.json")),
        "--epochs",
        "1",
        "--out",
        p(&f("m2.json")),
    ]);

    run(&[
        "--quiet",
        "predict",
        "--data",
        p(&f("d.jsonl")),
        "--model",
        p(&f("m.json")),
        "--out",
        p(&f("kp.jsonl")),
    ]);
    run(&[
        "--quiet",
        "solve-pose",
        "--data",
        p(&f("d.jsonl")),
        "--use-obs",
        "--out",
        p(&f("poses.jsonl")),
    ]);
    run(&[
        "--quiet",
        "smooth",
        "--in",
        p(&f("poses.jsonl")),
        "--out",
        p(&f("smooth.jsonl")),
    ]);
    assert_eq!(load_pose_lines(&f("smooth.jsonl")).unwrap().len(), 6);

    let out = run(&[
        "eval-kp",
        "--data",
        p(&f("d.jsonl")),
        "--pred",
        p(&f("kp.jsonl")),
        "--out",
        p(&f("kp_report.json")),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("Avg"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f("kp_report.json")).unwrap()).unwrap();
    for key in ["sr90", "sr95", "ap", "per_sequence"] {
        assert!(report.get(key).is_some(), "{key}");
    }

    run(&[
        "--quiet",
        "eval-pose",
        "--data",
        p(&f("d.jsonl")),
        "--pred",
        p(&f("smooth.jsonl")),
        "--out",
        p(&f("pose_report.json")),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f("pose_report.json")).unwrap()).unwrap();
    for key in ["mae_angle_deg", "rmse_m", "mae_m"] {
        assert!(report[key].as_f64().is_some(), "{key}");
    }

    run(&[
        "--quiet",
        "gate-dump",
        "--model",
        p(&f("m.json")),
        "--data",
        p(&f("d.jsonl")),
        "--out",
        p(&f("gates.csv")),
    ]);
    let gates = std::fs::read_to_string(f("gates.csv")).unwrap();
    assert_eq!(gates.lines().count(), 7);
    run(&[
        "--quiet",
        "--threads",
        "2",
        "gate-dump",
        "--layers",
        "3",
        "--data",
        p(&f("d.jsonl")),
        "--out",
        p(&f("gates3.csv")),
    ]);
    assert_eq!(
        std::fs::read_to_string(f("gates3.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
}
