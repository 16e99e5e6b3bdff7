use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tsqlora_cli::config::Overrides;
use tsqlora_cli::output::{self, MetricLine, Phase, ScoreRow};
use tsqlora_cli::{CliError, Common};

const SMALL: &str = "
[data]
n = 300
dim = 6
classes = 3
[model]
hidden = [8, 8]
adapted = [1]
[train]
iterations = 30
batch_size = 16
";

fn setup(config: &str) -> (tempfile::TempDir, Common) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, config).unwrap();
    let common = Common {
        config: path,
        out: dir.path().join("out"),
        overrides: Overrides::default(),
    };
    (dir, common)
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tsqlora"))
}

fn exit_code(args: &[&str], cwd: &Path) -> i32 {
    bin().args(args).current_dir(cwd).output().unwrap().status.code().unwrap()
}

#[test]
fn missing_config_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let code = exit_code(&["train", "--config", "absent.toml", "--out", "o"], dir.path());
    assert_eq!(code, 2);
    assert!(!dir.path().join("o").exists());
}

#[test]
fn invalid_settings_exit_2_before_outputs() {
    let (dir, common) = setup("[train]\nbatch_size = 100000\n");
    let err = tsqlora_cli::cmd_train(&common).unwrap_err();
    assert_eq!(err.code, CliError::CONFIG);
    assert!(!common.out.exists());
    let (_, common) = setup("[train.quality]\ntau = 0.0\n");
    assert_eq!(tsqlora_cli::cmd_train(&common).unwrap_err().code, CliError::CONFIG);
    drop(dir);
}

#[test]
fn malformed_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("d.jsonl"), "{\"features\": [1.0], \"label\": 0}\nnot json\n").unwrap();
    fs::write(
        dir.path().join("c.toml"),
        "[data]\nsource = \"file\"\npath = \"d.jsonl\"\n",
    )
    .unwrap();
    let out = bin()
        .args(["train", "--config", "c.toml", "--out", "o"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.contains("line 2"), "{stderr}");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.toml"),
        format!("{SMALL}lr = 1e300\ngrad_clip = inf\n"),
    )
    .unwrap();
    let code = exit_code(&["train", "--config", "c.toml", "--out", "o"], dir.path());
    assert_eq!(code, 4);
}

fn read_lines(out: &Path) -> Vec<MetricLine> {
    output::read_metrics(&out.join(output::METRICS)).unwrap()
}

#[test]
fn minimal_run_writes_parseable_outputs() {
    let (_dir, common) = setup("[train]\niterations = 1\n");
    let outcome = tsqlora_cli::cmd_train(&common).unwrap();
    let out = &common.out;
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join(output::MANIFEST)).unwrap()).unwrap();
    assert_eq!(manifest["run_id"], outcome.run_id.as_str());
    assert_eq!(manifest["config"]["train"]["iterations"], 1);
    let lines = read_lines(out);
    assert!(matches!(lines.first(), Some(MetricLine::Quality { phase: Phase::Warmup, .. })));
    assert!(matches!(lines.last(), Some(MetricLine::Final { .. })));
    let summary: Vec<output::SummaryRow> = output::read_csv(&out.join(output::SUMMARY)).unwrap();
    assert_eq!(summary.len(), 1);
    let ranks: Vec<output::RankRow> = output::read_csv(&out.join(output::RANKS)).unwrap();
    assert!(ranks.is_empty());
    let hist: Vec<output::HistBin> = output::read_csv(&out.join(output::QUALITY_HIST)).unwrap();
    assert_eq!(hist.len(), output::HIST_BINS);
}

#[test]
fn metrics_stream_is_byte_stable_and_consistent() {
    let (_a, first) = setup(SMALL);
    let (_b, second) = setup(SMALL);
    let one = tsqlora_cli::cmd_train(&first).unwrap();
    let two = tsqlora_cli::cmd_train(&Common {
        overrides: Overrides {
            seed: None,
            threads: Some(3),
        },
        ..second.clone()
    })
    .unwrap();
    assert_eq!(one.run_id, two.run_id);
    let a = fs::read(first.out.join(output::METRICS)).unwrap();
    let b = fs::read(second.out.join(output::METRICS)).unwrap();
    assert_eq!(a, b);

    // Every event's parameter count follows the rank accounting (8+8 per rank).
    let lines = read_lines(&first.out);
    let events: Vec<_> = lines
        .iter()
        .filter_map(|l| match l {
            MetricLine::Event(e) => Some(e),
            _ => None,
        })
        .collect();
    assert_eq!(events.len(), 9);
    for e in events {
        assert_eq!(e.active_params, e.layers[0].assigned * 16);
    }
}

#[test]
fn seed_flag_changes_the_run() {
    let (_a, first) = setup(SMALL);
    let (_b, second) = setup(SMALL);
    let one = tsqlora_cli::cmd_train(&first).unwrap();
    let two = tsqlora_cli::cmd_train(&Common {
        overrides: Overrides {
            seed: Some(9),
            threads: None,
        },
        ..second
    })
    .unwrap();
    assert_ne!(one.run_id, two.run_id);
    assert_ne!(one.report.warmup, two.report.warmup);
}

#[test]
fn score_matches_training_warmup() {
    let (_dir, common) = setup(SMALL);
    let rows = tsqlora_cli::cmd_score(&common).unwrap();
    assert_eq!(rows.len(), 240);
    let from_file: Vec<ScoreRow> = output::read_csv(&common.out.join(output::QUALITY)).unwrap();
    assert_eq!(from_file, rows);

    let train_out = common.out.join("train");
    tsqlora_cli::cmd_train(&Common {
        out: train_out.clone(),
        ..common.clone()
    })
    .unwrap();
    let warm = read_lines(&train_out)
        .into_iter()
        .find_map(|l| match l {
            MetricLine::Quality {
                phase: Phase::Warmup,
                scores,
                ..
            } => Some(scores),
            _ => None,
        })
        .unwrap();
    assert_eq!(warm, rows);
}

#[test]
fn zero_alpha_scores_are_zero() {
    let (_dir, common) = setup(&format!("{SMALL}[train.quality]\nalpha = [0.0, 0.0, 0.0]\n"));
    let rows = tsqlora_cli::cmd_score(&common).unwrap();
    assert!(rows.iter().all(|r| r.q == 0.0));
    assert!(rows.iter().all(|r| (r.p - 1.0 / 240.0).abs() < 1e-15));
}

#[test]
fn ablation_rows_and_disabled_mechanisms() {
    let (_dir, common) = setup(SMALL);
    tsqlora_cli::cmd_ablate(&common, 1).unwrap();
    let rows: Vec<output::AblationRow> = output::read_csv(&common.out.join(output::ABLATION)).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].seed, "mean");

    let (_dir, common) = setup(&format!(
        "{SMALL}quality_sampling = false\nsensitivity_aware = false\n"
    ));
    let report = tsqlora_cli::cmd_ablate(&common, 2).unwrap();
    assert_eq!(report.mean_delta(), 0.0);
    let rows: Vec<output::AblationRow> = output::read_csv(&common.out.join(output::ABLATION)).unwrap();
    assert!(rows.iter().all(|r| r.delta == 0.0));
    assert_eq!(rows.len(), 3);
}

#[test]
fn compare_uses_equal_budgets_and_is_deterministic() {
    let config = "
[data]
n = 300
dim = 8
classes = 3
[model]
hidden = [8, 8, 8]
adapted = [0, 1, 2]
[train]
iterations = 40
batch_size = 16
";
    let (_a, first) = setup(config);
    let (_b, second) = setup(config);
    let one = tsqlora_cli::cmd_compare(&first).unwrap();
    let two = tsqlora_cli::cmd_compare(&second).unwrap();
    assert_eq!(one[0].max_trainable_params, one[1].max_trainable_params);
    assert_eq!(one[0].accuracy, two[0].accuracy);
    assert_eq!(one[1].accuracy, two[1].accuracy);
    let rows: Vec<output::CompareRow> = output::read_csv(&first.out.join(output::COMPARE)).unwrap();
    assert_eq!(rows.iter().map(|r| r.arm.as_str()).collect::<Vec<_>>(), ["tsqlora", "lora"]);
}

#[test]
fn report_re_renders_identical_csvs() {
    let (_dir, common) = setup(SMALL);
    tsqlora_cli::cmd_train(&common).unwrap();
    let names = [output::RANKS, output::QUALITY, output::QUALITY_HIST];
    let before: Vec<Vec<u8>> = names.iter().map(|n| fs::read(common.out.join(n)).unwrap()).collect();
    for n in names {
        fs::remove_file(common.out.join(n)).unwrap();
    }
    let code = exit_code(&["report", "--out", common.out.to_str().unwrap()], Path::new("."));
    assert_eq!(code, 0);
    let after: Vec<Vec<u8>> = names.iter().map(|n| fs::read(common.out.join(n)).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn report_tolerates_a_truncated_tail() {
    let (_dir, common) = setup(SMALL);
    tsqlora_cli::cmd_train(&common).unwrap();
    let path = common.out.join(output::METRICS);
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("{\"kind\":\"step\",\"st");
    fs::write(&path, text).unwrap();
    assert!(tsqlora_cli::cmd_report(&common.out).is_ok());
}

#[test]
fn trains_from_a_jsonl_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = tsqlora::gen_gaussian_mixture(3, 120, 5, 2, 0.1).unwrap();
    let path: PathBuf = dir.path().join("pool.jsonl");
    data.write_jsonl(&path).unwrap();
    let config = dir.path().join("c.toml");
    fs::write(
        &config,
        format!(
            "[data]\nsource = \"file\"\npath = {:?}\n[model]\nhidden = [4]\nadapted = [0, 1]\n[train]\niterations = 5\nbatch_size = 8\n",
            path
        ),
    )
    .unwrap();
    let outcome = tsqlora_cli::cmd_train(&Common {
        config,
        out: dir.path().join("o"),
        overrides: Overrides::default(),
    })
    .unwrap();
    assert!(outcome.mean_q_noisy.is_some());
}
