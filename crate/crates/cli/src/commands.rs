//! One function per subcommand. Each writes into a fresh [`RunDir`] and
//! returns the deterministic [`MetricsFile`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;
use serde_json::json;

use efcm_core::data::{synth_patches, synth_slides, Dataset, DatasetKind};
use efcm_core::distill::{distill_train, smooth, DistillData};
use efcm_core::finetune::finetune_patches;
use efcm_core::mil::{
    argmax_attention_hits, bags_from_dataset, export_heatmap, run_strategy, split, train_teacher_head, with_teacher_features,
    EpochLog, HeadTrainConfig,
};
use efcm_core::profiler::{count_mac, count_params, efficiency_report, gflops};
use efcm_core::students::{ModelSpec, RandomTeacher, Student, Teacher};
use efcm_tensor::FeatureStore;

use crate::config::{RunConfig, TeacherSection};
use crate::run::{write_csv, MetricsFile, RecordRow, RunDir, RECORD_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    SynthData,
    Distill,
    Finetune,
    MilRun,
    Profile,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::Distill => "distill",
            Command::Finetune => "finetune",
            Command::MilRun => "mil-run",
            Command::Profile => "profile",
            Command::Report => "report",
        }
    }

    /// Entries a run directory holds besides the common files.
    pub fn artifacts(self) -> &'static [&'static str] {
        match self {
            Command::SynthData => &["dataset"],
            Command::Distill => &["checkpoints", "loss.csv"],
            Command::Finetune => &["best.json", "best.bin", "best.student.json", "best.student.bin", "epochs.csv"],
            Command::MilRun => &[
                "audit.json",
                "selections.json",
                "epochs.csv",
                "head.json",
                "head.bin",
                "student.json",
                "student.bin",
                "heatmaps",
            ],
            Command::Profile => &["efficiency.csv", "efficiency.json"],
            Command::Report => &["report.csv"],
        }
    }

    pub fn run(self, cfg: &RunConfig, dir: &RunDir) -> Result<MetricsFile> {
        match self {
            Command::SynthData => synth_data(cfg, dir),
            Command::Distill => distill(cfg, dir),
            Command::Finetune => finetune(cfg, dir),
            Command::MilRun => mil_run(cfg, dir),
            Command::Profile => profile(cfg, dir),
            Command::Report => report(cfg, dir),
        }
    }
}

fn read_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.dataset.as_ref().context("this subcommand needs a dataset (--dataset or `dataset` key)")?;
    Dataset::read(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_student(cfg: &RunConfig) -> Result<Student<f32>> {
    match &cfg.checkpoint {
        Some(p) => Student::load(p).with_context(|| format!("loading checkpoint {}", p.display())),
        None => Ok(Student::new(cfg.model_spec(), cfg.seed)?),
    }
}

fn build_teacher(cfg: &RunConfig, spec: &ModelSpec) -> Result<Teacher> {
    Ok(match cfg.teacher_section() {
        TeacherSection::FrozenRandom { seed } => Teacher::FrozenRandom(Box::new(RandomTeacher::new(
            ModelSpec::teacher(spec.input_size, spec.teacher_dim),
            seed.unwrap_or(cfg.seed),
        )?)),
        TeacherSection::File { path } => {
            Teacher::File(FeatureStore::load(&path).with_context(|| format!("loading teacher features {}", path.display()))?)
        }
    })
}

fn write_epochs(path: &Path, logs: &[EpochLog]) -> Result<()> {
    write_csv(path, logs, &["epoch", "train_loss", "val_auc", "val_acc"])
}

fn synth_data(cfg: &RunConfig, dir: &RunDir) -> Result<MetricsFile> {
    let s = cfg.synth.as_ref().context("synth-data needs a [synth] section")?;
    let ds = match s.kind {
        DatasetKind::Patch => synth_patches(&s.patch, cfg.seed)?,
        DatasetKind::Slide => synth_slides(&s.slide, cfg.seed)?,
    };
    ds.write(&dir.join("dataset"))?;
    let counts: BTreeMap<String, usize> = ds
        .manifest
        .sample_counts()
        .into_iter()
        .map(|((split, label), n)| (format!("{split}/{label}"), n))
        .collect();
    let mut m = MetricsFile::new(Command::SynthData.name(), cfg.seed);
    m.summary = json!({
        "kind": s.kind,
        "samples": ds.manifest.samples.len(),
        "slides": ds.manifest.slides.len(),
        "sample_counts": counts,
        "channel_means": ds.manifest.channel_means,
    });
    info!("wrote {} samples to {}", ds.manifest.samples.len(), dir.join("dataset").display());
    Ok(m)
}

#[derive(Serialize, serde::Deserialize)]
struct LossRow {
    step: usize,
    loss: f64,
    smoothed: f64,
    lr: f64,
}

const LOSS_WINDOW: usize = 50;

fn distill(cfg: &RunConfig, dir: &RunDir) -> Result<MetricsFile> {
    let dc = cfg.distill_config();
    let ds = read_dataset(cfg)?;
    let student = load_student(cfg)?;
    let teacher = build_teacher(cfg, &student.spec)?;
    let data = DistillData::from_dataset(&ds, Some("train"), student.spec.input_size)?;
    info!("distilling on {} samples for {} steps", data.len(), dc.total_steps);
    let out = distill_train(student, &data, &teacher, &dc, Some(&dir.subdir("checkpoints")?))?;
    let smoothed = smooth(&out.losses, LOSS_WINDOW);
    let rows: Vec<LossRow> = (0..out.losses.len())
        .map(|i| LossRow {
            step: i + 1,
            loss: out.losses[i],
            smoothed: smoothed[i],
            lr: out.lrs[i],
        })
        .collect();
    write_csv(&dir.join("loss.csv"), &rows, &["step", "loss", "smoothed", "lr"])?;
    let rel = |p: &PathBuf| p.strip_prefix(&dir.path).unwrap_or(p).display().to_string();
    let mut m = MetricsFile::new(Command::Distill.name(), cfg.seed);
    m.summary = json!({
        "samples": data.len(),
        "steps": out.losses.len(),
        "first_loss": out.losses.first(),
        "final_loss": out.losses.last(),
        "final_smoothed_loss": smoothed.last(),
        "smoothing_window": LOSS_WINDOW,
        "checkpoints": out.checkpoints.iter().map(rel).collect::<Vec<_>>(),
    });
    Ok(m)
}

fn finetune(cfg: &RunConfig, dir: &RunDir) -> Result<MetricsFile> {
    let fc = cfg.finetune_config();
    let ds = read_dataset(cfg)?;
    if ds.manifest.kind != DatasetKind::Patch {
        bail!("finetune needs a patch dataset");
    }
    let out = finetune_patches(load_student(cfg)?, &ds, &fc)?;
    out.model.save(&dir.join("best.json"))?;
    write_epochs(&dir.join("epochs.csv"), &out.epochs)?;
    let mut m = MetricsFile::new(Command::Finetune.name(), cfg.seed);
    m.best_epoch = out.best_epoch;
    m.records = [out.val, out.test]
        .into_iter()
        .flatten()
        .map(|mut r| {
            r.checkpoint = Some("best.json".into());
            r
        })
        .collect();
    m.summary = json!({ "epochs": out.epochs });
    Ok(m)
}

fn mil_run(cfg: &RunConfig, dir: &RunDir) -> Result<MetricsFile> {
    let mc = cfg.mil_config();
    let ds = read_dataset(cfg)?;
    if ds.manifest.kind != DatasetKind::Slide {
        bail!("mil-run needs a slide dataset");
    }
    let student = load_student(cfg)?;
    let teacher = build_teacher(cfg, &student.spec)?;
    let bags = with_teacher_features(&bags_from_dataset(&ds, student.spec.input_size)?, &teacher)?;
    let th_cfg = HeadTrainConfig {
        epochs: mc.teacher_head_epochs,
        ..mc.head_train(0x7EAC)
    };
    let (teacher_head, teacher_logs) = train_teacher_head(&bags, mc.hidden, &th_cfg)?;
    info!("running strategy {:?} on {} slides", mc.strategy, bags.len());
    let out = run_strategy(&mc, student, &bags, Some(&teacher_head), Some(&teacher_head))?;

    dir.write_json("audit.json", &out.audit)?;
    dir.write_json("selections.json", &out.selections)?;
    let logs = if out.epochs.is_empty() { &out.head_epochs } else { &out.epochs };
    write_epochs(&dir.join("epochs.csv"), logs)?;
    out.head.save(&dir.join("head.json"))?;
    out.student.save(&dir.join("student.json"), json!({ "mil": mc }))?;
    let heat = dir.subdir("heatmaps")?;
    for bag in &out.test_bags {
        let pooled = out.head.pool(bag.features()?)?;
        export_heatmap(bag, &pooled.weights, &heat.join(&bag.slide_id))?;
    }
    let test: Vec<_> = out.test_bags.iter().collect();
    let (hits, positives) = argmax_attention_hits(&out.head, &test)?;

    let mut m = MetricsFile::new(Command::MilRun.name(), cfg.seed);
    m.best_epoch = out.best_epoch;
    m.records = [out.val, Some(out.test)]
        .into_iter()
        .flatten()
        .map(|mut r| {
            r.checkpoint = Some("head.json".into());
            r
        })
        .collect();
    m.summary = json!({
        "strategy": mc.strategy,
        "slides": { "train": split(&bags, "train").len(), "val": split(&bags, "val").len(), "test": test.len() },
        "argmax_attention_on_tumor": { "hits": hits, "positives": positives },
        "teacher_head_epochs": teacher_logs,
        "test_scores": out.test_scores,
    });
    Ok(m)
}

fn profile(cfg: &RunConfig, dir: &RunDir) -> Result<MetricsFile> {
    let p = cfg.profile.clone().unwrap_or_default();
    let specs: Vec<(String, ModelSpec)> = p.models.iter().map(|n| (n.name.clone(), n.spec)).collect();
    let report = efficiency_report(&specs, p.protocol, cfg.seed)?;
    report.write_csv(&dir.join("efficiency.csv"))?;
    report.write_json(&dir.join("efficiency.json"))?;
    // FPS is wall-clock and lives only in the efficiency files.
    let mut models = BTreeMap::new();
    for (name, spec) in &specs {
        let mac = count_mac(spec, spec.input_size)?;
        models.insert(
            name.clone(),
            json!({ "params": count_params(spec)?, "mac": mac, "gflops": gflops(mac), "input_size": spec.input_size }),
        );
    }
    let mut m = MetricsFile::new(Command::Profile.name(), cfg.seed);
    m.summary = json!({ "protocol": p.protocol, "models": models });
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub subcommand: String,
    pub seed: u64,
    pub split: String,
    pub acc: f64,
    pub auc: f64,
    pub epoch: Option<usize>,
}

fn report(cfg: &RunConfig, dir: &RunDir) -> Result<MetricsFile> {
    let runs: Vec<PathBuf> = match cfg.report.as_ref().filter(|r| !r.runs.is_empty()) {
        Some(r) => r.runs.clone(),
        None => {
            let mut v: Vec<PathBuf> = fs::read_dir(&cfg.out)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p != &dir.path && p.join("metrics.json").is_file())
                .collect();
            v.sort();
            v
        }
    };
    let mut rows = Vec::new();
    for run in &runs {
        let mf = MetricsFile::read(&run.join("metrics.json"))?;
        let name = run.file_name().map_or_else(|| run.display().to_string(), |n| n.to_string_lossy().into_owned());
        for r in &mf.records {
            rows.push(ReportRow {
                run: name.clone(),
                subcommand: mf.subcommand.clone(),
                seed: mf.seed,
                split: r.split.clone(),
                acc: r.acc,
                auc: r.auc,
                epoch: r.epoch,
            });
        }
    }
    write_csv(&dir.join("report.csv"), &rows, &["run", "subcommand", "seed", "split", "acc", "auc", "epoch"])?;
    let mut m = MetricsFile::new(Command::Report.name(), cfg.seed);
    m.summary = json!({ "runs": runs.len(), "rows": rows });
    Ok(m)
}

/// Write the common files of a finished run.
pub fn write_metrics(dir: &RunDir, m: &MetricsFile) -> Result<()> {
    dir.write_json("metrics.json", m)?;
    let rows: Vec<RecordRow> = m.records.iter().map(RecordRow::from).collect();
    write_csv(&dir.join("metrics.csv"), &rows, &RECORD_HEADER)
}
