use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::report::{fmt_value, matrix_csv, rows_csv};
use crate::params::ParamStore;
use crate::partmodel::{EpochLog, LossBreakdown, Mode};
use crate::synth::{write_dataset, Dataset};

use super::{pretrain_backbone, run_benchmark, seed_dir, train_model, ExperimentConfig, PretrainLog, RunRecord};

pub const PRETRAIN_DIR: &str = "pretrain";
pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const BENCHMARK_DIR: &str = "benchmark";

/// Process exit code for an error: 2 for invalid input, 3 for divergence.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Dataset(_) | Error::Json(_) | Error::Checkpoint(_) => 2,
        Error::Divergence(_) => 3,
        _ => 1,
    }
}

/// Default location of the backbone pretrained for `seed`.
pub fn backbone_path(out: &Path, seed: u64) -> PathBuf {
    seed_dir(out, seed).join(PRETRAIN_DIR).join(BACKBONE_FILE)
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    cfg.dataset.validate()?;
    let ds = cfg.load_dataset()?;
    write_dataset(&ds, out)?;
    Ok(ds)
}

fn pretrain_csv(logs: &[PretrainLog]) -> String {
    let mut s = String::from("epoch,loss\n");
    for l in logs {
        writeln!(s, "{},{}", l.epoch, fmt_value(l.loss)).unwrap();
    }
    s
}

fn loss_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch");
    for f in LossBreakdown::FIELDS {
        write!(s, ",{f}").unwrap();
    }
    s.push('\n');
    for l in logs {
        write!(s, "{}", l.epoch).unwrap();
        for v in l.losses.values() {
            write!(s, ",{}", fmt_value(v)).unwrap();
        }
        s.push('\n');
    }
    s
}

/// Pretrains the backbone for `seed` into `<out>/seed_<s>/pretrain/`.
pub fn pretrain(cfg: &ExperimentConfig, ds: &Dataset, out: &Path, seed: u64) -> Result<ParamStore> {
    let dir = seed_dir(out, seed).join(PRETRAIN_DIR);
    let (params, logs) = pretrain_backbone(&cfg.vit, &cfg.pretrain, &ds.train, seed, |l| {
        log::info!("seed {seed} pretrain epoch {} loss {:.5}", l.epoch, l.loss);
    })?;
    fs::create_dir_all(&dir)?;
    let backbone = params.strip_prefix("vit");
    backbone.save(&dir.join(BACKBONE_FILE))?;
    fs::write(dir.join("pretrain_log.csv"), pretrain_csv(&logs))?;
    RunRecord::new("pretrain", seed, cfg).write(&dir)?;
    Ok(backbone)
}

fn load_backbone(out: &Path, seed: u64, checkpoint: Option<&Path>) -> Result<ParamStore> {
    let path = checkpoint.map_or_else(|| backbone_path(out, seed), Path::to_path_buf);
    if !path.exists() {
        return Err(Error::Config(format!("no backbone at {}; run `pretrain` first or pass --checkpoint", path.display())));
    }
    ParamStore::load(&path)
}

/// Late/early probing with ground-truth masks into `<out>/seed_<s>/benchmark/`.
pub fn benchmark(cfg: &ExperimentConfig, ds: &Dataset, out: &Path, seed: u64, checkpoint: Option<&Path>) -> Result<()> {
    let backbone = load_backbone(out, seed, checkpoint)?;
    let report = run_benchmark(cfg, &backbone, &ds.train, &ds.test, seed)?;
    let dir = seed_dir(out, seed).join(BENCHMARK_DIR);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("metrics.csv"), rows_csv(&report.rows(&ds.spec)))?;
    for r in &report.results {
        fs::write(dir.join(format!("map_matrix_{}.csv", r.masking.name())), matrix_csv(&r.matrix))?;
    }
    RunRecord::new("benchmark", seed, cfg).write(&dir)?;
    Ok(())
}

/// Trains `cfg.variant` into `<out>/seed_<s>/<variant>/`.
pub fn train(cfg: &ExperimentConfig, ds: &Dataset, out: &Path, seed: u64, checkpoint: Option<&Path>) -> Result<()> {
    let backbone = load_backbone(out, seed, checkpoint)?;
    let mode: Mode = cfg.variant;
    let (params, report) = train_model(cfg, &backbone, &ds.train, &ds.test, mode, seed, |l| {
        log::info!("seed {seed} {} epoch {} total {:.5}", mode.name(), l.epoch, l.losses.total);
    })?;
    let dir = seed_dir(out, seed).join(mode.name());
    fs::create_dir_all(&dir)?;
    params.save(&dir.join("model.ckpt"))?;
    fs::write(dir.join("metrics.csv"), rows_csv(&report.rows(&ds.spec.attribute_names())))?;
    fs::write(dir.join("loss_curve.csv"), loss_csv(&report.logs))?;
    RunRecord::new("train", seed, cfg).write(&dir)?;
    Ok(())
}
