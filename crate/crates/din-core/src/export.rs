//! Interaction-graph export: per-person relation weights with their walked
//! coordinates, the group graph summed over all person-specific graphs, and
//! the key-person summary (temporal sum, highest incoming weight).

use crate::error::{DinError, Result};
use crate::grid::{clamp_coord, Coord, FeatureGrid};
use crate::model::{forward, DinConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tape;

/// One (position, member) edge of a person-specific interaction graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphEntry {
    pub t: usize,
    pub n: usize,
    pub k: usize,
    pub walked_t: f64,
    pub walked_n: f64,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct InteractionGraphExport {
    pub frames: usize,
    pub persons: usize,
    /// All person-graph edges, ordered by (t, n, k).
    pub entries: Vec<GraphEntry>,
    /// Group graph: weights accumulated onto integer cells, row-major T x N.
    pub group: Vec<f64>,
    /// Group graph summed along the temporal axis (one weight per person).
    pub per_person: Vec<f64>,
    /// Person with the highest temporally-summed weight (ties break low).
    pub key_person: usize,
}

impl InteractionGraphExport {
    pub fn total_mass(&self) -> f64 {
        self.group.iter().sum()
    }
}

/// Snap a fractional coordinate to its nearest integer cell, ties toward the
/// lower index.
fn snap(x: f64) -> usize {
    (x - 0.5).ceil().max(0.0) as usize
}

/// Run a forward pass and export the interaction graphs of the last
/// reasoning layer. Fails for the Base variant (nothing to export).
pub fn export_interaction_graphs<S: Scalar>(
    cfg: &DinConfig,
    params: &ModelParams<S>,
    grid: &FeatureGrid<S>,
) -> Result<InteractionGraphExport> {
    if !cfg.variant.has_relations() {
        return Err(DinError::NothingToExport);
    }
    let mut tape = Tape::new();
    let grid_id = tape.constant(grid.tensor().clone());
    let pass = forward(&mut tape, cfg, params, grid_id, grid.presence(), false)?;
    let layer_idx = pass.relations.len() - 1;
    let rel = tape.value(pass.relations[layer_idx]).clone();
    let offsets = pass.offsets[layer_idx].map(|id| tape.value(id).clone());
    let (t_total, n_total) = (grid.frames(), grid.persons());

    let mut entries = Vec::new();
    if rel.rank() == 3 {
        // field-shaped relations [T, N, K]
        let field = params.layers[layer_idx].field;
        let k_total = field.size();
        for t in 0..t_total {
            for n in 0..n_total {
                for k in 0..k_total {
                    let (dt, dn) = field.member_offset(k);
                    let mut ct = (t as isize + dt) as f64;
                    let mut cn = (n as isize + dn) as f64;
                    if let Some(off) = &offsets {
                        let base = ((t * n_total + n) * k_total + k) * 2;
                        ct += off.values()[base].to_f64();
                        cn += off.values()[base + 1].to_f64();
                    }
                    let c = clamp_coord(Coord::new(ct, cn), t_total, n_total);
                    entries.push(GraphEntry {
                        t,
                        n,
                        k,
                        walked_t: c.t,
                        walked_n: c.n,
                        weight: rel.values()[(t * n_total + n) * k_total + k].to_f64(),
                    });
                }
            }
        }
    } else {
        // fully-connected relations [TN, TN]: member k is grid cell k
        let p = t_total * n_total;
        for i in 0..p {
            for k in 0..p {
                entries.push(GraphEntry {
                    t: i / n_total,
                    n: i % n_total,
                    k,
                    walked_t: (k / n_total) as f64,
                    walked_n: (k % n_total) as f64,
                    weight: rel.values()[i * p + k].to_f64(),
                });
            }
        }
    }

    let mut group = vec![0.0f64; t_total * n_total];
    for e in &entries {
        let st = snap(e.walked_t).min(t_total - 1);
        let sn = snap(e.walked_n).min(n_total - 1);
        group[st * n_total + sn] += e.weight;
    }
    let mut per_person = vec![0.0f64; n_total];
    for t in 0..t_total {
        for n in 0..n_total {
            per_person[n] += group[t * n_total + n];
        }
    }
    let mut key_person = 0usize;
    for n in 1..n_total {
        if per_person[n] > per_person[key_person] {
            key_person = n;
        }
    }
    Ok(InteractionGraphExport {
        frames: t_total,
        persons: n_total,
        entries,
        group,
        per_person,
        key_person,
    })
}
