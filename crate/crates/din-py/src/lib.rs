//! Python bindings: dataset generation, model training/evaluation, cost
//! analysis, and interaction-graph export, all at f64 precision.

use std::collections::HashMap;
use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use din_core::complexity;
use din_core::export::export_interaction_graphs;
use din_core::grid::{FeatureGrid, FieldSpec};
use din_core::model::{forward_logits, DinConfig, ModelParams, Variant};
use din_core::synth::{generate, Dataset, DisplacementLaw, SyntheticTaskSpec};
use din_core::train::{evaluate, train, TrainConfig};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_field(s: &str) -> PyResult<FieldSpec> {
    let (kt, kn) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| PyValueError::new_err(format!("field '{s}' is not kTxkN")))?;
    FieldSpec::new(
        kt.parse().map_err(err)?,
        kn.parse().map_err(err)?,
    )
    .map_err(err)
}

/// Synthetic benchmark samples as (features, labels, (t, n, d)) where
/// `features` is a flat row-major [count, t, n, d] vector.
#[pyfunction]
#[pyo3(signature = (law="long", count=64, seed=0, frames=10, persons=12, noise=0.05))]
fn generate_dataset(
    law: &str,
    count: usize,
    seed: u64,
    frames: usize,
    persons: usize,
    noise: f64,
) -> PyResult<(Vec<f64>, Vec<usize>, (usize, usize, usize))> {
    let spec = SyntheticTaskSpec {
        frames,
        persons,
        noise,
        law: DisplacementLaw::parse(law).map_err(err)?,
        seed,
        ..Default::default()
    };
    let ds: Dataset<f64> = generate(&spec, count).map_err(err)?;
    let d = spec.input_dim();
    let mut features = Vec::with_capacity(count * frames * persons * d);
    for grid in &ds.grids {
        features.extend_from_slice(grid.tensor().values());
    }
    Ok((features, ds.labels, (frames, persons, d)))
}

/// Reasoning-module cost report.
#[pyfunction]
#[pyo3(signature = (variant="dr+dw", frames=10, persons=12, embed_dim=1024, lite_dim=128, field="3x3"))]
fn analyze(
    variant: &str,
    frames: usize,
    persons: usize,
    embed_dim: usize,
    lite_dim: usize,
    field: &str,
) -> PyResult<HashMap<String, f64>> {
    let cfg = DinConfig::new(
        Variant::parse(variant).map_err(err)?,
        embed_dim,
        lite_dim,
        parse_field(field)?,
        8,
    );
    let report = complexity::report(&cfg, frames, persons);
    let mut out = HashMap::new();
    out.insert("params_weights".into(), report.params_weights as f64);
    out.insert("params_biases".into(), report.params_biases as f64);
    out.insert("macs".into(), report.macs as f64);
    out.insert("flops".into(), report.flops as f64);
    Ok(out)
}

#[pyclass]
struct Model {
    cfg: DinConfig,
    params: ModelParams<f64>,
}

impl Model {
    fn dataset_from_arrays(
        &self,
        features: &[f64],
        labels: &[usize],
        frames: usize,
        persons: usize,
    ) -> PyResult<Dataset<f64>> {
        let d = self.cfg.input_dim.unwrap_or(self.cfg.embed_dim);
        let stride = frames * persons * d;
        if labels.is_empty() || features.len() != labels.len() * stride {
            return Err(PyValueError::new_err(format!(
                "features length {} does not match {} samples of {}x{}x{}",
                features.len(),
                labels.len(),
                frames,
                persons,
                d
            )));
        }
        let mut grids = Vec::with_capacity(labels.len());
        for chunk in features.chunks_exact(stride) {
            grids.push(FeatureGrid::new(frames, persons, d, chunk.to_vec()).map_err(err)?);
        }
        let meta = labels
            .iter()
            .map(|&label| din_core::synth::SampleMeta {
                trigger_n: 0,
                response_n: 0,
                trigger_t: 0,
                response_t: 0,
                label,
            })
            .collect();
        Ok(Dataset {
            spec: SyntheticTaskSpec {
                frames,
                persons,
                classes: self.cfg.classes,
                ..Default::default()
            },
            grids,
            labels: labels.to_vec(),
            meta,
        })
    }
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (variant="dr+dw", input_dim=12, embed_dim=64, lite_dim=16, field="3x3", classes=8, seed=0))]
    fn new(
        variant: &str,
        input_dim: usize,
        embed_dim: usize,
        lite_dim: usize,
        field: &str,
        classes: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = DinConfig::new(
            Variant::parse(variant).map_err(err)?,
            embed_dim,
            lite_dim,
            parse_field(field)?,
            classes,
        )
        .with_input_dim(input_dim);
        let params = ModelParams::init(&cfg, seed).map_err(err)?;
        Ok(Model { cfg, params })
    }

    /// Class logits of one flat [t, n, input_dim] grid.
    fn logits(&self, grid: Vec<f64>, frames: usize, persons: usize) -> PyResult<Vec<f64>> {
        let d = self.cfg.input_dim.unwrap_or(self.cfg.embed_dim);
        let fg = FeatureGrid::new(frames, persons, d, grid).map_err(err)?;
        Ok(forward_logits(&self.cfg, &self.params, &fg)
            .map_err(err)?
            .values()
            .to_vec())
    }

    /// Train in place; returns the per-epoch mean training loss.
    #[pyo3(signature = (features, labels, frames=10, persons=12, epochs=5, base_lr=1e-4, batch_size=8, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        features: Vec<f64>,
        labels: Vec<usize>,
        frames: usize,
        persons: usize,
        epochs: usize,
        base_lr: f64,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let ds = self.dataset_from_arrays(&features, &labels, frames, persons)?;
        let tc = TrainConfig {
            base_lr,
            epochs,
            batch_size,
            seed,
            ..Default::default()
        };
        let (params, history) =
            train(&self.cfg, &tc, &ds, None).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        self.params = params;
        Ok(history.iter().map(|h| h.train_loss).collect())
    }

    /// (MCA, MPCA, confusion) on the given samples.
    fn evaluate(
        &self,
        features: Vec<f64>,
        labels: Vec<usize>,
        frames: usize,
        persons: usize,
    ) -> PyResult<(f64, f64, Vec<Vec<u64>>)> {
        let ds = self.dataset_from_arrays(&features, &labels, frames, persons)?;
        let report = evaluate(&self.cfg, &self.params, &ds).map_err(err)?;
        Ok((report.mca, report.mpca, report.confusion))
    }

    /// Interaction-graph rows (t, n, k, walked_t, walked_n, weight) of one
    /// grid, plus the key person index.
    fn export_graphs(
        &self,
        grid: Vec<f64>,
        frames: usize,
        persons: usize,
    ) -> PyResult<(Vec<(usize, usize, usize, f64, f64, f64)>, usize)> {
        let d = self.cfg.input_dim.unwrap_or(self.cfg.embed_dim);
        let fg = FeatureGrid::new(frames, persons, d, grid).map_err(err)?;
        let export = export_interaction_graphs(&self.cfg, &self.params, &fg).map_err(err)?;
        let rows = export
            .entries
            .iter()
            .map(|e| (e.t, e.n, e.k, e.walked_t, e.walked_n, e.weight))
            .collect();
        Ok((rows, export.key_person))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        din_core::io::save_checkpoint(Path::new(path), &self.cfg, &self.params).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (cfg, params) = din_core::io::load_checkpoint(Path::new(path)).map_err(err)?;
        Ok(Model { cfg, params })
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(variant='{}', D={}, field={}, classes={})",
            self.cfg.variant, self.cfg.embed_dim, self.cfg.field, self.cfg.classes
        )
    }
}

#[pymodule]
fn din_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
