//! Subcommand implementations. Every command writes its outputs under the
//! --out directory together with a manifest recording the effective config,
//! its hash, the seed, and the tool version.

use std::path::Path;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use din_core::complexity;
use din_core::export::export_interaction_graphs;
use din_core::io::{
    format_sig9, load_checkpoint, load_dataset, read_container_header, save_checkpoint,
    save_dataset, write_confusion_csv, write_eval_csv, write_graphs_csv, write_metrics_csv,
};
use din_core::model::{DinConfig, ModelParams, Variant};
use din_core::scalar::Scalar;
use din_core::synth::{generate, Dataset};
use din_core::train::{evaluate, train, EvalReport, TrainConfig};

use crate::config::{Effective, Precision, Resolved};

pub enum AnyDataset {
    F32(Dataset<f32>),
    F64(Dataset<f64>),
}

impl AnyDataset {
    pub fn load(path: &Path) -> Result<Self> {
        let header = read_container_header(path)?;
        match header.dtype.as_str() {
            "f32" => Ok(AnyDataset::F32(load_dataset::<f32>(path)?)),
            "f64" => Ok(AnyDataset::F64(load_dataset::<f64>(path)?)),
            other => bail!("bad_format: unknown dtype '{other}' in {}", path.display()),
        }
    }

    pub fn to_f32(&self) -> Dataset<f32> {
        match self {
            AnyDataset::F32(d) => d.clone(),
            AnyDataset::F64(d) => d.cast(),
        }
    }

    pub fn to_f64(&self) -> Dataset<f64> {
        match self {
            AnyDataset::F32(d) => d.cast(),
            AnyDataset::F64(d) => d.clone(),
        }
    }
}

pub enum AnyCheckpoint {
    F32(DinConfig, ModelParams<f32>),
    F64(DinConfig, ModelParams<f64>),
}

impl AnyCheckpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let header = read_container_header(path)?;
        match header.dtype.as_str() {
            "f32" => {
                let (cfg, params) = load_checkpoint::<f32>(path)?;
                Ok(AnyCheckpoint::F32(cfg, params))
            }
            "f64" => {
                let (cfg, params) = load_checkpoint::<f64>(path)?;
                Ok(AnyCheckpoint::F64(cfg, params))
            }
            other => bail!("bad_format: unknown dtype '{other}' in {}", path.display()),
        }
    }
}

fn ensure_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("io_error: cannot create {}", out.display()))
}

fn config_hash(effective_toml: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(effective_toml.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_manifest(out: &Path, command: &str, seed: u64, effective: &Effective) -> Result<()> {
    let config_text =
        toml::to_string_pretty(effective).context("invalid_config: manifest serialization")?;
    let manifest = format!(
        "[run]\ntool = \"din\"\nversion = \"{}\"\ncommand = \"{}\"\nseed = {}\nconfig_hash = \"{}\"\n\n{}",
        env!("CARGO_PKG_VERSION"),
        command,
        seed,
        config_hash(&config_text),
        config_text
    );
    let path = out.join("manifest.toml");
    std::fs::write(&path, manifest)
        .with_context(|| format!("io_error: cannot write {}", path.display()))
}

pub fn cmd_gen(resolved: &Resolved, count: usize, out: &Path) -> Result<()> {
    ensure_out(out)?;
    let path = out.join("dataset.din");
    match resolved.precision {
        Precision::F32 => {
            let ds = generate::<f32>(&resolved.task, count)?;
            save_dataset(&path, &ds)?;
        }
        Precision::F64 => {
            let ds = generate::<f64>(&resolved.task, count)?;
            save_dataset(&path, &ds)?;
        }
    }
    write_manifest(out, "gen", resolved.task.seed, &resolved.effective())?;
    println!(
        "wrote {} ({} samples, {} task, dtype {})",
        path.display(),
        count,
        resolved.task.law.name(),
        resolved.precision.name()
    );
    Ok(())
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("missing_file: {}", path.display());
    }
    Ok(())
}

fn train_run<S: Scalar>(
    mut din: DinConfig,
    tc: &TrainConfig,
    train_set: &Dataset<S>,
    eval_set: Option<&Dataset<S>>,
    out: &Path,
) -> Result<()> {
    din.input_dim = Some(train_set.spec.input_dim());
    din.classes = train_set.spec.classes;
    let (params, history) = train(&din, tc, train_set, eval_set)?;
    save_checkpoint(&out.join("checkpoint.din"), &din, &params)?;
    write_metrics_csv(&out.join("metrics.csv"), &history)?;
    let last = history.last().expect("at least one epoch");
    println!(
        "trained {} for {} epochs: final train loss {}",
        din.variant,
        history.len(),
        format_sig9(last.train_loss)
    );
    if let Some(eval) = &last.eval {
        println!(
            "final eval: MCA {} MPCA {}",
            format_sig9(eval.mca),
            format_sig9(eval.mpca)
        );
    }
    Ok(())
}

pub fn cmd_train(
    resolved: &Resolved,
    dataset: &Path,
    eval_dataset: Option<&Path>,
    out: &Path,
) -> Result<()> {
    require_file(dataset)?;
    if let Some(p) = eval_dataset {
        require_file(p)?;
    }
    ensure_out(out)?;
    let ds = AnyDataset::load(dataset)?;
    let eval = eval_dataset.map(AnyDataset::load).transpose()?;
    match resolved.precision {
        Precision::F32 => {
            let tr = ds.to_f32();
            let ev = eval.as_ref().map(AnyDataset::to_f32);
            train_run(resolved.din.clone(), &resolved.train, &tr, ev.as_ref(), out)?;
        }
        Precision::F64 => {
            let tr = ds.to_f64();
            let ev = eval.as_ref().map(AnyDataset::to_f64);
            train_run(resolved.din.clone(), &resolved.train, &tr, ev.as_ref(), out)?;
        }
    }
    write_manifest(out, "train", resolved.train.seed, &resolved.effective())
}

fn eval_run<S: Scalar>(
    cfg: &DinConfig,
    params: &ModelParams<S>,
    dataset: &Dataset<S>,
    out: &Path,
) -> Result<EvalReport> {
    let report = evaluate(cfg, params, dataset)?;
    write_eval_csv(&out.join("metrics.csv"), &report)?;
    write_confusion_csv(&out.join("confusion.csv"), &report)?;
    Ok(report)
}

pub fn cmd_eval(
    resolved: &Resolved,
    checkpoint: &Path,
    dataset: &Path,
    out: &Path,
) -> Result<()> {
    require_file(checkpoint)?;
    require_file(dataset)?;
    ensure_out(out)?;
    let ds = AnyDataset::load(dataset)?;
    let report = match AnyCheckpoint::load(checkpoint)? {
        AnyCheckpoint::F32(cfg, params) => eval_run(&cfg, &params, &ds.to_f32(), out)?,
        AnyCheckpoint::F64(cfg, params) => eval_run(&cfg, &params, &ds.to_f64(), out)?,
    };
    println!(
        "eval: MCA {} MPCA {}",
        format_sig9(report.mca),
        format_sig9(report.mpca)
    );
    write_manifest(out, "eval", resolved.train.seed, &resolved.effective())
}

fn analyze_variants(requested: Option<&str>) -> Result<Vec<Variant>> {
    match requested {
        None | Some("all") => Ok(complexity::reference_variants()),
        Some(v) => Ok(vec![Variant::parse(v)?]),
    }
}

pub fn cmd_analyze(
    resolved: &Resolved,
    requested: Option<&str>,
    frames: usize,
    persons: usize,
    out: Option<&Path>,
) -> Result<()> {
    let variants = analyze_variants(requested)?;
    let mut table = String::from(
        "variant      field   params_weights params_biases  flops          params(M)  FLOPs(G)   params ~ Theta            flops ~ Theta\n",
    );
    for variant in variants {
        let cfg = DinConfig::new(
            variant,
            resolved.din.embed_dim,
            resolved.din.lite_dim,
            resolved.din.field,
            resolved.din.classes,
        );
        let report = complexity::report(&cfg, frames, persons);
        table.push_str(&format!(
            "{:<12} {:<7} {:<14} {:<14} {:<14} {:<10.3} {:<10.3} {:<25} {}\n",
            report.variant,
            report.field,
            report.params_weights,
            report.params_biases,
            report.flops,
            report.params_millions(),
            report.flops_giga(),
            report.params_formula,
            report.flops_formula,
        ));
    }
    print!("{table}");
    if let Some(out) = out {
        ensure_out(out)?;
        let path = out.join("complexity.txt");
        std::fs::write(&path, &table)
            .with_context(|| format!("io_error: cannot write {}", path.display()))?;
        write_manifest(out, "analyze", resolved.train.seed, &resolved.effective())?;
    }
    Ok(())
}

pub fn cmd_export_graphs(
    resolved: &Resolved,
    checkpoint: &Path,
    dataset: &Path,
    sample: usize,
    out: &Path,
) -> Result<()> {
    require_file(checkpoint)?;
    require_file(dataset)?;
    ensure_out(out)?;
    let ds = AnyDataset::load(dataset)?;
    let export = match AnyCheckpoint::load(checkpoint)? {
        AnyCheckpoint::F32(cfg, params) => {
            let ds = ds.to_f32();
            let grid = ds
                .grids
                .get(sample)
                .with_context(|| format!("invalid_config: sample {sample} out of range"))?;
            export_interaction_graphs(&cfg, &params, grid)?
        }
        AnyCheckpoint::F64(cfg, params) => {
            let ds = ds.to_f64();
            let grid = ds
                .grids
                .get(sample)
                .with_context(|| format!("invalid_config: sample {sample} out of range"))?;
            export_interaction_graphs(&cfg, &params, grid)?
        }
    };
    write_graphs_csv(&out.join("graphs.csv"), &export)?;
    println!(
        "exported {} edges; group mass {}; key person {}",
        export.entries.len(),
        format_sig9(export.total_mass()),
        export.key_person
    );
    write_manifest(out, "export-graphs", resolved.train.seed, &resolved.effective())
}

