use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Proc;

use efcm_cli::commands::ReportRow;
use efcm_cli::config::{self, RunConfig};
use efcm_cli::run::{read_csv, RecordRow, COMMON_FILES};
use efcm_cli::{execute, Command, MetricsFile, RunRecord};

fn cfg(out: &Path, extra: &[(&str, &str)]) -> RunConfig {
    let mut o: Vec<(String, String)> = vec![("out".into(), format!("{:?}", out.display().to_string()))];
    o.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    config::load(None, &o).unwrap()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

fn expected(cmd: Command) -> Vec<String> {
    let mut v: Vec<String> = COMMON_FILES.iter().chain(cmd.artifacts()).map(|s| s.to_string()).collect();
    v.sort();
    v
}

/// Path → contents of every file under `dir`.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn synth(out: &Path, kind: &str) -> PathBuf {
    let extra: Vec<(&str, &str)> = match kind {
        "patch" => vec![("synth.kind", "\"patch\""), ("synth.patch.samples_per_class", "16")],
        _ => vec![
            ("synth.kind", "\"slide\""),
            ("synth.slide.positives", "5"),
            ("synth.slide.negatives", "5"),
            ("synth.slide.width", "768"),
            ("synth.slide.height", "768"),
        ],
    };
    let dir = execute(Command::SynthData, &cfg(out, &extra)).unwrap();
    assert_eq!(listing(&dir.path), expected(Command::SynthData));
    dir.join("dataset")
}

fn quoted(p: &Path) -> String {
    format!("{:?}", p.display().to_string())
}

#[test]
fn pipeline_emits_the_documented_files_and_leaves_inputs_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let patches = synth(&out, "patch");
    let slides = synth(&out, "slide");
    let before = (snapshot(&patches), snapshot(&slides));

    let ds = quoted(&patches);
    let d = execute(
        Command::Distill,
        &cfg(
            &out,
            &[
                ("dataset", &ds),
                ("distill.total_steps", "12"),
                ("distill.warmup_steps", "2"),
                ("distill.checkpoint_every", "5"),
            ],
        ),
    )
    .unwrap();
    assert_eq!(listing(&d.path), expected(Command::Distill));
    assert_eq!(
        listing(&d.join("checkpoints")),
        ["final.bin", "final.json", "step_000005.bin", "step_000005.json", "step_000010.bin", "step_000010.json"]
    );
    #[derive(serde::Deserialize)]
    struct Loss {
        step: usize,
        loss: f64,
    }
    let losses: Vec<Loss> = read_csv(&d.join("loss.csv")).unwrap();
    assert_eq!(losses.len(), 12);
    assert!(losses.iter().enumerate().all(|(i, l)| l.step == i + 1 && l.loss.is_finite()));

    let ckpt = quoted(&d.join("checkpoints/final.json"));
    let f = execute(
        Command::Finetune,
        &cfg(&out, &[("dataset", &ds), ("checkpoint", &ckpt), ("finetune.epochs", "3"), ("finetune.batch_size", "8")]),
    )
    .unwrap();
    assert_eq!(listing(&f.path), expected(Command::Finetune));
    let m = MetricsFile::read(&f.join("metrics.json")).unwrap();
    let epochs: Vec<efcm_core::mil::EpochLog> = read_csv(&f.join("epochs.csv")).unwrap();
    let best = m.best_epoch.unwrap();
    let max = epochs.iter().filter_map(|e| e.val_auc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(epochs[best - 1].val_auc, Some(max));
    assert!(epochs[..best - 1].iter().all(|e| e.val_auc < Some(max)));
    assert_eq!(m.records.iter().map(|r| r.split.as_str()).collect::<Vec<_>>(), ["val", "test"]);
    assert!(m.records.iter().all(|r| r.epoch == Some(best)));

    let sl = quoted(&slides);
    let mil = execute(
        Command::MilRun,
        &cfg(
            &out,
            &[
                ("dataset", &sl),
                ("mil.k", "4"),
                ("mil.epochs", "2"),
                ("mil.head_epochs", "3"),
                ("mil.teacher_head_epochs", "3"),
                ("mil.hidden", "8"),
            ],
        ),
    )
    .unwrap();
    assert_eq!(listing(&mil.path), expected(Command::MilRun));
    let m = MetricsFile::read(&mil.join("metrics.json")).unwrap();
    let test = m.records.iter().find(|r| r.split == "test").unwrap();
    let heatmaps = listing(&mil.join("heatmaps"));
    assert_eq!(heatmaps.len(), 2 * test.class_counts.iter().sum::<usize>());
    let audit: efcm_core::mil::Audit = serde_json::from_slice(&fs::read(mil.join("audit.json")).unwrap()).unwrap();
    assert_eq!(audit.before.extractor, audit.after.extractor);

    assert_eq!((snapshot(&patches), snapshot(&slides)), before);

    let r = execute(Command::Report, &cfg(&out, &[])).unwrap();
    assert_eq!(listing(&r.path), expected(Command::Report));
    let rows: Vec<ReportRow> = read_csv(&r.join("report.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().filter(|r| r.subcommand == "mil-run").count(), 2);
}

#[test]
fn identical_config_and_seed_give_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let ds = quoted(&synth(&out, "patch"));
    let c = cfg(&out, &[("seed", "7"), ("dataset", &ds), ("finetune.epochs", "2"), ("finetune.batch_size", "8")]);
    let a = execute(Command::Finetune, &c).unwrap();
    let b = execute(Command::Finetune, &c).unwrap();
    assert_ne!(a.path, b.path);
    for f in ["metrics.json", "metrics.csv", "config.toml", "epochs.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c2 = cfg(&out, &[("seed", "8"), ("dataset", &ds), ("finetune.epochs", "2"), ("finetune.batch_size", "8")]);
    let d = execute(Command::Finetune, &c2).unwrap();
    assert_ne!(fs::read(a.join("epochs.csv")).unwrap(), fs::read(d.join("epochs.csv")).unwrap());
}

#[test]
fn results_files_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let c = cfg(&out, &[("seed", "4"), ("profile.protocol.timed", "2"), ("profile.protocol.warmup", "0")]);
    let p = execute(Command::Profile, &c).unwrap();
    assert_eq!(listing(&p.path), expected(Command::Profile));
    let m = MetricsFile::read(&p.join("metrics.json")).unwrap();
    assert_eq!(serde_json::from_slice::<MetricsFile>(&serde_json::to_vec(&m).unwrap()).unwrap(), m);
    let rec: RunRecord = serde_json::from_slice(&fs::read(p.join("run.json")).unwrap()).unwrap();
    assert_eq!((rec.status.as_str(), rec.seed), ("ok", 4));
    let echoed = config::load(Some(&p.join("config.toml")), &[]).unwrap();
    assert_eq!(echoed, c);
    let eff: efcm_core::profiler::EfficiencyReport =
        serde_json::from_slice(&fs::read(p.join("efficiency.json")).unwrap()).unwrap();
    assert_eq!(eff.rows.len(), 2);
    assert!(read_csv::<RecordRow>(&p.join("metrics.csv")).unwrap().is_empty());
}

#[test]
fn failures_exit_nonzero_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_efcm");
    let cfg_path = tmp.path().join("bad.toml");
    fs::write(&cfg_path, "seed = 1\n[distill]\nlearning_rate = 3\n").unwrap();
    let o = Proc::new(bin).args(["distill", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let o = Proc::new(bin)
        .args(["finetune", "--out"])
        .arg(tmp.path().join("runs"))
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset"));
    let runs = listing(&tmp.path().join("runs"));
    assert_eq!(runs.len(), 1);
    let rec: RunRecord =
        serde_json::from_slice(&fs::read(tmp.path().join("runs").join(&runs[0]).join("run.json")).unwrap()).unwrap();
    assert_eq!(rec.status, "failed");

    let o = Proc::new(bin)
        .args(["profile", "--seed", "5", "--set", "profile.protocol.timed=1", "--set", "profile.protocol.warmup=0", "--out"])
        .arg(tmp.path().join("p"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = PathBuf::from(String::from_utf8_lossy(&o.stdout).trim());
    assert!(dir.file_name().unwrap().to_string_lossy().ends_with("-s5"));
}
