//! Analytic parameter / FLOP model per reasoning variant, plus the
//! instrumented multiply-accumulate tally cross-check.
//!
//! Conventions: 1 MAC = 2 FLOPs; only dense linear maps (weight matmuls and
//! grid convolutions) are counted; weights and biases are reported
//! separately. Softmax, sampling, the relation-weighted aggregation, and
//! residuals are excluded. The embedding stage and the classifier are not
//! part of the reasoning-module budget and carry their own tally scopes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::FeatureGrid;
use crate::model::{forward, DinConfig, LayerKind, ModelParams, Variant};
use crate::scalar::Scalar;
use crate::tensor::Tape;

/// One dense per-position linear map of the reasoning module.
#[derive(Clone, Debug)]
pub struct DenseMap {
    pub stage: &'static str,
    pub in_features: usize,
    pub out_features: usize,
    pub biased: bool,
}

impl DenseMap {
    pub fn weights(&self) -> u64 {
        (self.in_features * self.out_features) as u64
    }
}

/// Dense maps of the reasoning module (lite projection included; embedding
/// and classifier excluded).
pub fn dense_maps(cfg: &DinConfig) -> Vec<DenseMap> {
    let width = cfg.reasoning_dim();
    let mut maps = Vec::new();
    if matches!(cfg.variant, Variant::Lite(_)) {
        maps.push(DenseMap {
            stage: "project",
            in_features: cfg.embed_dim,
            out_features: cfg.lite_dim,
            biased: true,
        });
    }
    for (kind, field) in cfg.layer_plan() {
        let k = field.size();
        if kind.has_relation_conv() {
            maps.push(DenseMap {
                stage: "relation",
                in_features: k * width,
                out_features: k,
                biased: true,
            });
        }
        if kind.has_offset_conv() {
            maps.push(DenseMap {
                stage: "offset",
                in_features: k * width,
                out_features: 2 * k,
                biased: true,
            });
        }
        if kind.has_projections() {
            maps.push(DenseMap {
                stage: "query",
                in_features: width,
                out_features: width,
                biased: false,
            });
            maps.push(DenseMap {
                stage: "key",
                in_features: width,
                out_features: width,
                biased: false,
            });
        }
        maps.push(DenseMap {
            stage: "transform",
            in_features: width,
            out_features: width,
            biased: false,
        });
    }
    maps
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub variant: String,
    pub field: String,
    pub frames: usize,
    pub persons: usize,
    pub embed_dim: usize,
    pub lite_dim: usize,
    pub field_size: usize,
    /// Weight-only parameter count of the reasoning module.
    pub params_weights: u64,
    /// Bias parameters, reported separately.
    pub params_biases: u64,
    /// Dense-map MACs of one forward pass.
    pub macs: u64,
    /// 2 x MACs.
    pub flops: u64,
    pub params_formula: String,
    pub flops_formula: String,
}

impl ComplexityReport {
    pub fn params_millions(&self) -> f64 {
        self.params_weights as f64 / 1e6
    }

    pub fn flops_giga(&self) -> f64 {
        self.flops as f64 / 1e9
    }
}

/// Weight-only and bias parameter counts of the reasoning module.
pub fn count_params(cfg: &DinConfig) -> (u64, u64) {
    let maps = dense_maps(cfg);
    let weights = maps.iter().map(DenseMap::weights).sum();
    let biases = maps
        .iter()
        .filter(|m| m.biased)
        .map(|m| m.out_features as u64)
        .sum();
    (weights, biases)
}

/// Dense-map FLOPs (2 x MACs) of one forward pass on a T x N grid.
pub fn count_flops(cfg: &DinConfig, frames: usize, persons: usize) -> u64 {
    2 * count_macs(cfg, frames, persons)
}

pub fn count_macs(cfg: &DinConfig, frames: usize, persons: usize) -> u64 {
    let positions = (frames * persons) as u64;
    dense_maps(cfg).iter().map(|m| positions * m.weights()).sum()
}

fn formulas(cfg: &DinConfig) -> (String, String) {
    let per_position = match &cfg.variant {
        Variant::Base => "0".to_string(),
        Variant::Edp | Variant::Arg => "D*(2*Dr + D), Dr = D".to_string(),
        Variant::Dr => "D*(K^2 + D)".to_string(),
        Variant::Dw => "D*(2*K^2 + D)".to_string(),
        Variant::DrDw | Variant::DrDwStar => "D*(3*K^2 + D)".to_string(),
        Variant::StFactorised => "2*D*(3*K + D)".to_string(),
        Variant::Lite(_) => "Dl*(3*K^2 + Dl + D)".to_string(),
    };
    let flops = if per_position == "0" {
        "0".to_string()
    } else {
        format!("2*T*N * {per_position}")
    };
    (per_position, flops)
}

/// Full analytic report for one variant at the given grid dimensions.
pub fn report(cfg: &DinConfig, frames: usize, persons: usize) -> ComplexityReport {
    let (params_weights, params_biases) = count_params(cfg);
    let macs = count_macs(cfg, frames, persons);
    let (params_formula, flops_formula) = formulas(cfg);
    ComplexityReport {
        variant: cfg.variant.name(),
        field: cfg.field.to_string(),
        frames,
        persons,
        embed_dim: cfg.embed_dim,
        lite_dim: cfg.lite_dim,
        field_size: cfg.field.size(),
        params_weights,
        params_biases,
        macs,
        flops: 2 * macs,
        params_formula,
        flops_formula,
    }
}

/// Tally scopes that belong to the reasoning module.
pub const REASONING_SCOPES: &[&str] =
    &["project", "relation", "offset", "query", "key", "transform"];

pub fn reasoning_macs(tally: &BTreeMap<String, u64>) -> u64 {
    REASONING_SCOPES
        .iter()
        .map(|s| tally.get(*s).copied().unwrap_or(0))
        .sum()
}

/// Run one real forward pass and return the executed dense-map MACs per
/// stage.
pub fn instrumented_tally<S: Scalar>(
    cfg: &DinConfig,
    params: &ModelParams<S>,
    grid: &FeatureGrid<S>,
) -> Result<BTreeMap<String, u64>> {
    let mut tape = Tape::new();
    let grid_id = tape.constant(grid.tensor().clone());
    forward(&mut tape, cfg, params, grid_id, grid.presence(), false)?;
    Ok(tape.mac_tally().clone())
}

/// The five reasoning modules of the reference cost table, at the reference
/// dimensions (T=10, N=12, D=1024, D_l=128, 3x3 field).
pub fn reference_variants() -> Vec<Variant> {
    vec![
        Variant::Edp,
        Variant::Dr,
        Variant::Dw,
        Variant::DrDw,
        Variant::Lite(Box::new(Variant::DrDw)),
    ]
}

#[allow(unused)]
fn layer_kind_label(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::EdpField => "edp",
        LayerKind::ArgFull => "arg",
        LayerKind::Dr => "dr",
        LayerKind::Dw => "dw",
        LayerKind::DrDw { .. } => "dr+dw",
    }
}
