//! File formats: the shared container (structured text header + raw
//! little-endian IEEE-754 payload) used by checkpoints and datasets, and the
//! CSV writers for metrics, confusion matrices, and interaction graphs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DinError, Result};
use crate::export::InteractionGraphExport;
use crate::grid::FeatureGrid;
use crate::model::{DinConfig, ModelParams};
use crate::scalar::Scalar;
use crate::synth::{Dataset, SampleMeta, SyntheticTaskSpec};
use crate::tensor::Tensor;
use crate::train::{EpochStats, EvalReport};

const MAGIC: &str = "#din-container v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntryDesc {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub kind: String,
    pub dtype: String,
    pub entries: Vec<EntryDesc>,
    pub meta: serde_json::Value,
}

fn io_err(path: &Path, source: std::io::Error) -> DinError {
    DinError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> DinError {
    DinError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Write a container: magic line, one-line JSON header, raw LE payload in
/// header order.
pub fn write_container<S: Scalar>(
    path: &Path,
    header: &ContainerHeader,
    arrays: &[&[S]],
) -> Result<()> {
    if header.entries.len() != arrays.len() {
        return Err(format_err(path, "entry/array count mismatch"));
    }
    for (desc, arr) in header.entries.iter().zip(arrays) {
        let numel: usize = desc.shape.iter().product();
        if numel != arr.len() {
            return Err(format_err(
                path,
                format!("entry {} shape/payload mismatch", desc.name),
            ));
        }
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let header_json =
        serde_json::to_string(header).map_err(|e| format_err(path, e.to_string()))?;
    writeln!(w, "{MAGIC}").map_err(|e| io_err(path, e))?;
    writeln!(w, "{header_json}").map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::new();
    for arr in arrays {
        bytes.clear();
        bytes.reserve(arr.len() * S::BYTE_WIDTH);
        for &v in *arr {
            v.to_le_bytes(&mut bytes);
        }
        w.write_all(&bytes).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Read header + payload. The container's dtype must match `S`.
pub fn read_container<S: Scalar>(path: &Path) -> Result<(ContainerHeader, Vec<Vec<S>>)> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut contents = Vec::new();
    r.read_to_end(&mut contents).map_err(|e| io_err(path, e))?;

    let first_nl = contents
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err(path, "missing magic line"))?;
    if &contents[..first_nl] != MAGIC.as_bytes() {
        return Err(format_err(path, "bad magic"));
    }
    let rest = &contents[first_nl + 1..];
    let second_nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err(path, "missing header line"))?;
    let header: ContainerHeader = serde_json::from_slice(&rest[..second_nl])
        .map_err(|e| format_err(path, format!("bad header: {e}")))?;
    if header.dtype != S::DTYPE {
        return Err(format_err(
            path,
            format!("dtype {} does not match requested {}", header.dtype, S::DTYPE),
        ));
    }
    let mut payload = &rest[second_nl + 1..];
    let mut arrays = Vec::with_capacity(header.entries.len());
    for desc in &header.entries {
        let numel: usize = desc.shape.iter().product();
        let nbytes = numel * S::BYTE_WIDTH;
        if payload.len() < nbytes {
            return Err(format_err(
                path,
                format!("truncated payload at entry {}", desc.name),
            ));
        }
        let mut arr = Vec::with_capacity(numel);
        for chunk in payload[..nbytes].chunks_exact(S::BYTE_WIDTH) {
            arr.push(S::from_le_bytes(chunk));
        }
        arrays.push(arr);
        payload = &payload[nbytes..];
    }
    if !payload.is_empty() {
        return Err(format_err(path, "trailing bytes after payload"));
    }
    Ok((header, arrays))
}

/// Read only the header (for dtype/kind dispatch).
pub fn read_container_header(path: &Path) -> Result<ContainerHeader> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = String::new();
    std::io::BufRead::read_line(&mut r, &mut magic).map_err(|e| io_err(path, e))?;
    if magic.trim_end() != MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let mut header_line = String::new();
    std::io::BufRead::read_line(&mut r, &mut header_line).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&header_line).map_err(|e| format_err(path, format!("bad header: {e}")))
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: DinConfig,
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    cfg: &DinConfig,
    params: &ModelParams<S>,
) -> Result<()> {
    let visited = params.visit();
    let entries = visited
        .iter()
        .map(|(name, t)| EntryDesc {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let arrays: Vec<&[S]> = visited.iter().map(|(_, t)| t.values()).collect();
    let header = ContainerHeader {
        kind: "checkpoint".into(),
        dtype: S::DTYPE.into(),
        entries,
        meta: serde_json::to_value(CheckpointMeta {
            config: cfg.clone(),
        })
        .map_err(|e| format_err(path, e.to_string()))?,
    };
    write_container(path, &header, &arrays)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(DinConfig, ModelParams<S>)> {
    let (header, arrays) = read_container::<S>(path)?;
    if header.kind != "checkpoint" {
        return Err(format_err(path, format!("kind '{}', not a checkpoint", header.kind)));
    }
    let meta: CheckpointMeta = serde_json::from_value(header.meta.clone())
        .map_err(|e| format_err(path, format!("bad checkpoint meta: {e}")))?;
    let cfg = meta.config;
    let mut params = ModelParams::<S>::init(&cfg, 0)?;
    {
        let mut slots = params.visit_mut();
        if slots.len() != header.entries.len() {
            return Err(format_err(
                path,
                format!(
                    "checkpoint has {} tensors, config expects {}",
                    header.entries.len(),
                    slots.len()
                ),
            ));
        }
        for ((name, slot), (desc, values)) in
            slots.iter_mut().zip(header.entries.iter().zip(arrays))
        {
            if *name != desc.name || slot.shape() != desc.shape.as_slice() {
                return Err(format_err(
                    path,
                    format!("tensor {} does not match config layout", desc.name),
                ));
            }
            **slot = Tensor::new(desc.shape.clone(), values)
                .map_err(|e| format_err(path, e.to_string()))?;
        }
    }
    Ok((cfg, params))
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    spec: SyntheticTaskSpec,
    labels: Vec<usize>,
    samples: Vec<SampleMeta>,
}

pub fn save_dataset<S: Scalar>(path: &Path, dataset: &Dataset<S>) -> Result<()> {
    let count = dataset.len();
    let (t, n, d) = match dataset.grids.first() {
        Some(g) => (g.frames(), g.persons(), g.channels()),
        None => (dataset.spec.frames, dataset.spec.persons, dataset.spec.input_dim()),
    };
    let mut features = Vec::with_capacity(count * t * n * d);
    for grid in &dataset.grids {
        features.extend_from_slice(grid.tensor().values());
    }
    let header = ContainerHeader {
        kind: "dataset".into(),
        dtype: S::DTYPE.into(),
        entries: vec![EntryDesc {
            name: "features".into(),
            shape: vec![count, t, n, d],
        }],
        meta: serde_json::to_value(DatasetMeta {
            spec: dataset.spec.clone(),
            labels: dataset.labels.clone(),
            samples: dataset.meta.clone(),
        })
        .map_err(|e| format_err(path, e.to_string()))?,
    };
    write_container(path, &header, &[&features])
}

pub fn load_dataset<S: Scalar>(path: &Path) -> Result<Dataset<S>> {
    let (header, mut arrays) = read_container::<S>(path)?;
    if header.kind != "dataset" {
        return Err(format_err(path, format!("kind '{}', not a dataset", header.kind)));
    }
    let meta: DatasetMeta = serde_json::from_value(header.meta.clone())
        .map_err(|e| format_err(path, format!("bad dataset meta: {e}")))?;
    if header.entries.len() != 1 || header.entries[0].name != "features" {
        return Err(format_err(path, "expected a single 'features' entry"));
    }
    let shape = &header.entries[0].shape;
    if shape.len() != 4 {
        return Err(format_err(path, "features entry must be rank 4"));
    }
    let (count, t, n, d) = (shape[0], shape[1], shape[2], shape[3]);
    if meta.labels.len() != count || meta.samples.len() != count {
        return Err(format_err(path, "label/meta count mismatch"));
    }
    let features = arrays.pop().expect("features array");
    let stride = t * n * d;
    let mut grids = Vec::with_capacity(count);
    for i in 0..count {
        let values = features[i * stride..(i + 1) * stride].to_vec();
        grids.push(
            FeatureGrid::new(t, n, d, values).map_err(|e| format_err(path, e.to_string()))?,
        );
    }
    Ok(Dataset {
        spec: meta.spec,
        grids,
        labels: meta.labels,
        meta: meta.samples,
    })
}

/// 9 significant digits, scientific notation; the CSV contract for all
/// measured values.
pub fn format_sig9(v: f64) -> String {
    format!("{:.8e}", v)
}

pub fn write_metrics_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,lr,train_loss,eval_mca,eval_mpca\n");
    for h in history {
        let (mca, mpca) = match &h.eval {
            Some(e) => (format_sig9(e.mca), format_sig9(e.mpca)),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            h.epoch,
            format_sig9(h.lr),
            format_sig9(h.train_loss),
            mca,
            mpca
        ));
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = String::from("metric,value\n");
    out.push_str(&format!("mca,{}\n", format_sig9(report.mca)));
    out.push_str(&format!("mpca,{}\n", format_sig9(report.mpca)));
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn write_confusion_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let classes = report.confusion.len();
    let mut out = String::from("true_class");
    for j in 0..classes {
        out.push_str(&format!(",pred_{j}"));
    }
    out.push('\n');
    for (i, row) in report.confusion.iter().enumerate() {
        out.push_str(&i.to_string());
        for &c in row {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Column order contract: (t, n, k, walked_t, walked_n, weight).
pub fn write_graphs_csv(path: &Path, export: &InteractionGraphExport) -> Result<()> {
    let mut out = String::from("t,n,k,walked_t,walked_n,weight\n");
    for e in &export.entries {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.t,
            e.n,
            e.k,
            format_sig9(e.walked_t),
            format_sig9(e.walked_n),
            format_sig9(e.weight)
        ));
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::FieldSpec;
    use crate::model::Variant;
    use crate::synth::generate;

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("din-io-test-{}-{name}", std::process::id()));
        p
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = DinConfig::new(Variant::DrDw, 6, 6, FieldSpec::new(3, 3).unwrap(), 4)
            .with_input_dim(5);
        let params = ModelParams::<f64>::init(&cfg, 42).unwrap();
        let path = tmp("ckpt.din");
        save_checkpoint(&path, &cfg, &params).unwrap();
        let (cfg2, params2) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(cfg, cfg2);
        for ((n1, t1), (n2, t2)) in params.visit().iter().zip(params2.visit().iter()) {
            assert_eq!(n1, n2);
            let a: Vec<u64> = t1.values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = t2.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "tensor {n1} not bit-exact");
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn dataset_round_trip_preserves_everything() {
        let spec = crate::synth::SyntheticTaskSpec {
            frames: 4,
            persons: 5,
            seed: 3,
            ..Default::default()
        };
        let ds = generate::<f32>(&spec, 6).unwrap();
        let path = tmp("data.din");
        save_dataset(&path, &ds).unwrap();
        let ds2 = load_dataset::<f32>(&path).unwrap();
        assert_eq!(ds.labels, ds2.labels);
        assert_eq!(ds.meta, ds2.meta);
        for (a, b) in ds.grids.iter().zip(&ds2.grids) {
            let x: Vec<u32> = a.tensor().values().iter().map(|v| v.to_bits()).collect();
            let y: Vec<u32> = b.tensor().values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(x, y);
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let spec = crate::synth::SyntheticTaskSpec {
            frames: 3,
            persons: 4,
            ..Default::default()
        };
        let ds = generate::<f64>(&spec, 2).unwrap();
        let path = tmp("dtype.din");
        save_dataset(&path, &ds).unwrap();
        assert!(matches!(
            load_dataset::<f32>(&path),
            Err(DinError::Format { .. })
        ));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let err = load_checkpoint::<f64>(Path::new("/nonexistent/ckpt.din")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ckpt.din"));
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.3113779), "3.11377900e-1");
        assert_eq!(format_sig9(123456789.0), "1.23456789e8");
    }
}
