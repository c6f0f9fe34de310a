//! Reasoning-module variants over the ST graph: embedded-dot-product
//! relations, the fully-connected actor-graph update, dynamic relations,
//! dynamic walks, their combinations, the factorised and lite forms, and the
//! pooling/classifier head.

use serde::{Deserialize, Serialize};

use crate::error::{DinError, Result};
use crate::grid::{FeatureGrid, FieldSpec};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorId, Tape};

/// Reasoning-module selection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Pooling + classifier only.
    Base,
    /// Embedded dot-product relations within the interaction field.
    Edp,
    /// Fully-connected actor-relation-graph update over all T*N nodes.
    Arg,
    /// Dynamic relation prediction within the field.
    Dr,
    /// Dynamic walk with uniform member weighting.
    Dw,
    /// Dynamic relations over dynamically walked features.
    DrDw,
    /// Like DrDw, but relations are predicted from the walked features.
    DrDwStar,
    /// Two stacked DrDw layers with 1xkN then kTx1 fields.
    StFactorised,
    /// Pointwise projection to the lite width before the inner variant.
    Lite(Box<Variant>),
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        let v = match s.to_ascii_lowercase().as_str() {
            "base" => Variant::Base,
            "edp" => Variant::Edp,
            "arg" => Variant::Arg,
            "dr" => Variant::Dr,
            "dw" => Variant::Dw,
            "dr+dw" | "drdw" => Variant::DrDw,
            "dr+dw*" | "drdw*" => Variant::DrDwStar,
            "st" | "st-factorised" | "st-factorized" => Variant::StFactorised,
            "lite" => Variant::Lite(Box::new(Variant::DrDw)),
            other => {
                if let Some(inner) = other.strip_prefix("lite:") {
                    Variant::Lite(Box::new(Variant::parse(inner)?))
                } else {
                    return Err(DinError::InvalidConfig(format!("unknown variant '{s}'")));
                }
            }
        };
        Ok(v)
    }

    pub fn name(&self) -> String {
        match self {
            Variant::Base => "base".into(),
            Variant::Edp => "edp".into(),
            Variant::Arg => "arg".into(),
            Variant::Dr => "dr".into(),
            Variant::Dw => "dw".into(),
            Variant::DrDw => "dr+dw".into(),
            Variant::DrDwStar => "dr+dw*".into(),
            Variant::StFactorised => "st".into(),
            Variant::Lite(inner) => format!("lite:{}", inner.name()),
        }
    }

    /// Does any layer produce relation weights (needed for graph export)?
    pub fn has_relations(&self) -> bool {
        !matches!(self, Variant::Base)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

/// One reasoning layer's wiring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    EdpField,
    ArgFull,
    Dr,
    Dw,
    DrDw { relations_from_walked: bool },
}

impl LayerKind {
    pub fn has_relation_conv(&self) -> bool {
        matches!(self, LayerKind::Dr | LayerKind::DrDw { .. })
    }

    pub fn has_offset_conv(&self) -> bool {
        matches!(self, LayerKind::Dw | LayerKind::DrDw { .. })
    }

    pub fn has_projections(&self) -> bool {
        matches!(self, LayerKind::EdpField | LayerKind::ArgFull)
    }
}

/// Model configuration. `input_dim`, when set, prepends a trainable linear
/// embedding from the raw feature width onto the reasoning width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DinConfig {
    pub variant: Variant,
    /// Reasoning width D.
    pub embed_dim: usize,
    /// Lite width D_l (used by `Variant::Lite`).
    pub lite_dim: usize,
    pub field: FieldSpec,
    pub classes: usize,
    pub input_dim: Option<usize>,
}

impl DinConfig {
    pub fn new(variant: Variant, embed_dim: usize, lite_dim: usize, field: FieldSpec, classes: usize) -> Self {
        DinConfig {
            variant,
            embed_dim,
            lite_dim,
            field,
            classes,
            input_dim: None,
        }
    }

    pub fn with_input_dim(mut self, input_dim: usize) -> Self {
        self.input_dim = Some(input_dim);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.classes == 0 {
            return Err(DinError::InvalidConfig(
                "embed_dim and classes must be positive".into(),
            ));
        }
        if let Variant::Lite(inner) = &self.variant {
            if self.lite_dim == 0 || self.lite_dim > self.embed_dim {
                return Err(DinError::InvalidConfig(format!(
                    "lite width {} must be in 1..={}",
                    self.lite_dim, self.embed_dim
                )));
            }
            if matches!(**inner, Variant::Base | Variant::Lite(_)) {
                return Err(DinError::InvalidConfig(
                    "lite inner variant must be a reasoning variant".into(),
                ));
            }
        }
        Ok(())
    }

    /// Width the reasoning layers and classifier operate in.
    pub fn reasoning_dim(&self) -> usize {
        match self.variant {
            Variant::Lite(_) => self.lite_dim,
            _ => self.embed_dim,
        }
    }

    /// Layer plan: (kind, field) per reasoning layer, in execution order.
    pub fn layer_plan(&self) -> Vec<(LayerKind, FieldSpec)> {
        fn plan(variant: &Variant, field: FieldSpec) -> Vec<(LayerKind, FieldSpec)> {
            match variant {
                Variant::Base => vec![],
                Variant::Edp => vec![(LayerKind::EdpField, field)],
                Variant::Arg => vec![(LayerKind::ArgFull, field)],
                Variant::Dr => vec![(LayerKind::Dr, field)],
                Variant::Dw => vec![(LayerKind::Dw, field)],
                Variant::DrDw => vec![(
                    LayerKind::DrDw {
                        relations_from_walked: false,
                    },
                    field,
                )],
                Variant::DrDwStar => vec![(
                    LayerKind::DrDw {
                        relations_from_walked: true,
                    },
                    field,
                )],
                Variant::StFactorised => {
                    let spatial = FieldSpec::new(1, field.kn()).expect("odd extent");
                    let temporal = FieldSpec::new(field.kt(), 1).expect("odd extent");
                    vec![
                        (
                            LayerKind::DrDw {
                                relations_from_walked: false,
                            },
                            spatial,
                        ),
                        (
                            LayerKind::DrDw {
                                relations_from_walked: false,
                            },
                            temporal,
                        ),
                    ]
                }
                Variant::Lite(inner) => plan(inner, field),
            }
        }
        plan(&self.variant, self.field)
    }
}

#[derive(Clone, Debug)]
pub struct Affine<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct ConvParams<S: Scalar> {
    pub kernel: Tensor<S>,
    pub bias: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct LayerParams<S: Scalar> {
    pub kind: LayerKind,
    pub field: FieldSpec,
    pub relation: Option<ConvParams<S>>,
    pub offset: Option<ConvParams<S>>,
    pub query: Option<Tensor<S>>,
    pub key: Option<Tensor<S>>,
    /// The update transform w (no bias).
    pub transform: Tensor<S>,
}

/// All trainable tensors of one model, visited in a fixed, named order.
#[derive(Clone, Debug)]
pub struct ModelParams<S: Scalar> {
    pub embed: Option<Affine<S>>,
    pub project: Option<ConvParams<S>>,
    pub layers: Vec<LayerParams<S>>,
    pub classifier: Affine<S>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Uniform init in +-1/sqrt(fan_in), independently seeded per tensor name so
/// shared stages (embedding, classifier) get identical values across variants
/// for the same seed.
fn uniform_init<S: Scalar>(name: &str, seed: u64, shape: Vec<usize>, fan_in: usize) -> Tensor<S> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let values = (0..numel)
        .map(|_| S::from_f64(rng.random::<f64>() * 2.0 * bound - bound))
        .collect();
    Tensor::new(shape, values).expect("init shape")
}

impl<S: Scalar> ModelParams<S> {
    /// Fresh parameters: relation/offset convs start at exactly zero, other
    /// weights uniform in +-1/sqrt(fan_in), biases zero.
    pub fn init(cfg: &DinConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let width = cfg.reasoning_dim();
        let embed = cfg.input_dim.map(|din| Affine {
            weight: uniform_init("embed.weight", seed, vec![din, d], din),
            bias: Tensor::zeros(vec![d]),
        });
        let project = match cfg.variant {
            Variant::Lite(_) => Some(ConvParams {
                kernel: uniform_init("project.kernel", seed, vec![cfg.lite_dim, 1, 1, d], d),
                bias: Tensor::zeros(vec![cfg.lite_dim]),
            }),
            _ => None,
        };
        let mut layers = Vec::new();
        for (i, (kind, field)) in cfg.layer_plan().into_iter().enumerate() {
            let k = field.size();
            let relation = kind.has_relation_conv().then(|| ConvParams {
                kernel: Tensor::zeros(vec![k, field.kt(), field.kn(), width]),
                bias: Tensor::zeros(vec![k]),
            });
            let offset = kind.has_offset_conv().then(|| ConvParams {
                kernel: Tensor::zeros(vec![2 * k, field.kt(), field.kn(), width]),
                bias: Tensor::zeros(vec![2 * k]),
            });
            let query = kind.has_projections().then(|| {
                uniform_init(
                    &format!("layer{i}.query"),
                    seed,
                    vec![width, width],
                    width,
                )
            });
            let key = kind.has_projections().then(|| {
                uniform_init(&format!("layer{i}.key"), seed, vec![width, width], width)
            });
            let transform = uniform_init(
                &format!("layer{i}.transform"),
                seed,
                vec![width, width],
                width,
            );
            layers.push(LayerParams {
                kind,
                field,
                relation,
                offset,
                query,
                key,
                transform,
            });
        }
        let classifier = Affine {
            weight: uniform_init("classifier.weight", seed, vec![width, cfg.classes], width),
            bias: Tensor::zeros(vec![cfg.classes]),
        };
        Ok(ModelParams {
            embed,
            project,
            layers,
            classifier,
        })
    }

    /// Named tensors in the canonical visit order.
    pub fn visit(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        if let Some(e) = &self.embed {
            out.push(("embed.weight".to_string(), &e.weight));
            out.push(("embed.bias".to_string(), &e.bias));
        }
        if let Some(p) = &self.project {
            out.push(("project.kernel".to_string(), &p.kernel));
            out.push(("project.bias".to_string(), &p.bias));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(r) = &layer.relation {
                out.push((format!("layer{i}.relation.kernel"), &r.kernel));
                out.push((format!("layer{i}.relation.bias"), &r.bias));
            }
            if let Some(o) = &layer.offset {
                out.push((format!("layer{i}.offset.kernel"), &o.kernel));
                out.push((format!("layer{i}.offset.bias"), &o.bias));
            }
            if let Some(q) = &layer.query {
                out.push((format!("layer{i}.query"), q));
            }
            if let Some(k) = &layer.key {
                out.push((format!("layer{i}.key"), k));
            }
            out.push((format!("layer{i}.transform"), &layer.transform));
        }
        out.push(("classifier.weight".to_string(), &self.classifier.weight));
        out.push(("classifier.bias".to_string(), &self.classifier.bias));
        out
    }

    pub fn visit_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = Vec::new();
        if let Some(e) = &mut self.embed {
            out.push(("embed.weight".to_string(), &mut e.weight));
            out.push(("embed.bias".to_string(), &mut e.bias));
        }
        if let Some(p) = &mut self.project {
            out.push(("project.kernel".to_string(), &mut p.kernel));
            out.push(("project.bias".to_string(), &mut p.bias));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Some(r) = &mut layer.relation {
                out.push((format!("layer{i}.relation.kernel"), &mut r.kernel));
                out.push((format!("layer{i}.relation.bias"), &mut r.bias));
            }
            if let Some(o) = &mut layer.offset {
                out.push((format!("layer{i}.offset.kernel"), &mut o.kernel));
                out.push((format!("layer{i}.offset.bias"), &mut o.bias));
            }
            if let Some(q) = &mut layer.query {
                out.push((format!("layer{i}.query"), q));
            }
            if let Some(k) = &mut layer.key {
                out.push((format!("layer{i}.key"), k));
            }
            out.push((format!("layer{i}.transform"), &mut layer.transform));
        }
        out.push(("classifier.weight".to_string(), &mut self.classifier.weight));
        out.push(("classifier.bias".to_string(), &mut self.classifier.bias));
        out
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            embed: self.embed.as_ref().map(|e| Affine {
                weight: e.weight.cast(),
                bias: e.bias.cast(),
            }),
            project: self.project.as_ref().map(|p| ConvParams {
                kernel: p.kernel.cast(),
                bias: p.bias.cast(),
            }),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    kind: l.kind,
                    field: l.field,
                    relation: l.relation.as_ref().map(|c| ConvParams {
                        kernel: c.kernel.cast(),
                        bias: c.bias.cast(),
                    }),
                    offset: l.offset.as_ref().map(|c| ConvParams {
                        kernel: c.kernel.cast(),
                        bias: c.bias.cast(),
                    }),
                    query: l.query.as_ref().map(Tensor::cast),
                    key: l.key.as_ref().map(Tensor::cast),
                    transform: l.transform.cast(),
                })
                .collect(),
            classifier: Affine {
                weight: self.classifier.weight.cast(),
                bias: self.classifier.bias.cast(),
            },
        }
    }

    /// Structural check against a config (layer plan + tensor shapes).
    pub fn check_config(&self, cfg: &DinConfig) -> Result<()> {
        let plan = cfg.layer_plan();
        if plan.len() != self.layers.len() {
            return Err(DinError::ConfigMismatch(format!(
                "expected {} layers, found {}",
                plan.len(),
                self.layers.len()
            )));
        }
        for ((kind, field), layer) in plan.iter().zip(&self.layers) {
            if layer.kind != *kind || layer.field != *field {
                return Err(DinError::ConfigMismatch(format!(
                    "layer plan mismatch: expected {kind:?} {field}, found {:?} {}",
                    layer.kind, layer.field
                )));
            }
        }
        let width = cfg.reasoning_dim();
        if self.classifier.weight.shape() != [width, cfg.classes] {
            return Err(DinError::ConfigMismatch(format!(
                "classifier shape {:?} does not match width {width} x classes {}",
                self.classifier.weight.shape(),
                cfg.classes
            )));
        }
        match (cfg.input_dim, &self.embed) {
            (Some(din), Some(e)) if e.weight.shape() == [din, cfg.embed_dim] => {}
            (None, None) => {}
            _ => {
                return Err(DinError::ConfigMismatch(
                    "embedding present/shape does not match config".into(),
                ))
            }
        }
        Ok(())
    }
}

/// Everything a single forward pass leaves behind on the tape.
pub struct ForwardPass {
    pub logits: TensorId,
    /// (name, tape id) per parameter, in visit order.
    pub params: Vec<(String, TensorId)>,
    /// Normalized relation tensor per reasoning layer
    /// ([T,N,K], or [TN,TN] for the fully-connected update).
    pub relations: Vec<TensorId>,
    /// Walk offsets per reasoning layer ([T,N,K,2]; None when the layer has
    /// no dynamic walk).
    pub offsets: Vec<Option<TensorId>>,
}

/// Run the assembled model on a grid already registered on `tape`.
/// `train` controls whether parameters are recorded as differentiable leaves.
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &DinConfig,
    params: &ModelParams<S>,
    grid_id: TensorId,
    presence: Option<&[bool]>,
    train: bool,
) -> Result<ForwardPass> {
    cfg.validate()?;
    params.check_config(cfg)?;
    let gshape = tape.shape(grid_id).to_vec();
    if gshape.len() != 3 {
        return Err(DinError::BadShape {
            op: "forward",
            expected: "rank-3 grid".into(),
            found: format!("{gshape:?}"),
        });
    }
    let expected_in = cfg.input_dim.unwrap_or(cfg.embed_dim);
    if gshape[2] != expected_in {
        return Err(DinError::ConfigMismatch(format!(
            "grid width {} does not match configured input width {expected_in}",
            gshape[2]
        )));
    }
    let (t, n) = (gshape[0], gshape[1]);

    let mut bound: Vec<(String, TensorId)> = Vec::new();
    for (name, tensor) in params.visit() {
        bound.push((name, tape.leaf(tensor.clone(), train)));
    }
    let id_of = |name: &str, bound: &[(String, TensorId)]| -> TensorId {
        bound
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .expect("bound parameter")
    };

    // Embedding stage (stands in for the backbone feature pipeline).
    let mut x3 = grid_id;
    if cfg.input_dim.is_some() {
        tape.set_mac_scope("embed");
        let w = id_of("embed.weight", &bound);
        let b = id_of("embed.bias", &bound);
        let x2 = tape.reshape(x3, vec![t * n, gshape[2]])?;
        let h = tape.matmul(x2, w)?;
        let h = tape.bias_add(h, b)?;
        x3 = tape.reshape(h, vec![t, n, cfg.embed_dim])?;
    }

    // Lite pointwise projection.
    if matches!(cfg.variant, Variant::Lite(_)) {
        tape.set_mac_scope("project");
        let k = id_of("project.kernel", &bound);
        let b = id_of("project.bias", &bound);
        x3 = tape.grid_conv(x3, k, b)?;
    }
    let width = cfg.reasoning_dim();

    let mut relations = Vec::new();
    let mut offsets = Vec::new();
    for (i, layer) in params.layers.iter().enumerate() {
        let (next, rel, off) = apply_layer(tape, layer, i, &bound, x3, t, n, width)?;
        x3 = next;
        relations.push(rel);
        offsets.push(off);
    }

    let pooled = global_pool(tape, x3, presence)?;
    tape.set_mac_scope("classifier");
    let cw = id_of("classifier.weight", &bound);
    let cb = id_of("classifier.bias", &bound);
    let row = tape.reshape(pooled, vec![1, width])?;
    let out = tape.matmul(row, cw)?;
    let out = tape.bias_add(out, cb)?;
    let logits = tape.reshape(out, vec![cfg.classes])?;

    Ok(ForwardPass {
        logits,
        params: bound,
        relations,
        offsets,
    })
}

#[allow(clippy::too_many_arguments)]
fn apply_layer<S: Scalar>(
    tape: &mut Tape<S>,
    layer: &LayerParams<S>,
    index: usize,
    bound: &[(String, TensorId)],
    x3: TensorId,
    t: usize,
    n: usize,
    width: usize,
) -> Result<(TensorId, TensorId, Option<TensorId>)> {
    let field = layer.field;
    let k = field.size();
    let id_of = |name: String| -> TensorId {
        bound
            .iter()
            .find(|(nm, _)| *nm == name)
            .map(|(_, id)| *id)
            .expect("bound parameter")
    };
    let x2 = tape.reshape(x3, vec![t * n, width])?;

    let (rel, feats) = match layer.kind {
        LayerKind::EdpField => {
            tape.set_mac_scope("query");
            let q2 = tape.matmul(x2, id_of(format!("layer{index}.query")))?;
            tape.set_mac_scope("key");
            let k2 = tape.matmul(x2, id_of(format!("layer{index}.key")))?;
            let q3 = tape.reshape(q2, vec![t, n, width])?;
            let k3 = tape.reshape(k2, vec![t, n, width])?;
            let scale = 1.0 / (width as f64).sqrt();
            let logits = tape.edp_logits_field(q3, k3, field.kt(), field.kn(), scale)?;
            let rel = tape.softmax_axis(logits, 2)?;
            let feats = tape.field_gather(x3, field.kt(), field.kn())?;
            (rel, feats)
        }
        LayerKind::ArgFull => {
            tape.set_mac_scope("query");
            let q2 = tape.matmul(x2, id_of(format!("layer{index}.query")))?;
            tape.set_mac_scope("key");
            let k2 = tape.matmul(x2, id_of(format!("layer{index}.key")))?;
            let scale = 1.0 / (width as f64).sqrt();
            let logits = tape.pair_logits(q2, k2, scale)?;
            let rel = tape.softmax_axis(logits, 1)?;
            let agg = tape.relation_aggregate(rel, x2)?;
            // The dense update shares the transform/residual tail below.
            let next = transform_tail(tape, index, bound, agg, x2, t, n, width)?;
            return Ok((next, rel, None));
        }
        LayerKind::Dr => {
            tape.set_mac_scope("relation");
            let logits = tape.grid_conv(
                x3,
                id_of(format!("layer{index}.relation.kernel")),
                id_of(format!("layer{index}.relation.bias")),
            )?;
            let rel = tape.softmax_axis(logits, 2)?;
            let feats = tape.field_gather(x3, field.kt(), field.kn())?;
            (rel, feats)
        }
        LayerKind::Dw => {
            tape.set_mac_scope("offset");
            let off = dw_offsets(tape, index, bound, x3, t, n, k)?;
            let feats = tape.bilinear_gather(x3, off, field.kt(), field.kn())?;
            let rel = tape.constant(Tensor::filled(
                vec![t, n, k],
                S::from_f64(1.0 / k as f64),
            ));
            let next = update_tail(tape, index, bound, feats, rel, x2, t, n, width)?;
            return Ok((next, rel, Some(off)));
        }
        LayerKind::DrDw {
            relations_from_walked,
        } => {
            tape.set_mac_scope("offset");
            let off = dw_offsets(tape, index, bound, x3, t, n, k)?;
            let feats = tape.bilinear_gather(x3, off, field.kt(), field.kn())?;
            tape.set_mac_scope("relation");
            let logits = if relations_from_walked {
                // Same relation weights applied as a linear map over the
                // member-major flattening of the walked features.
                let y2 = tape.reshape(feats, vec![t * n, k * width])?;
                let ker2 = tape.reshape(
                    id_of(format!("layer{index}.relation.kernel")),
                    vec![k, k * width],
                )?;
                let l2 = tape.matmul_transpose_b(y2, ker2)?;
                let l2 = tape.bias_add(l2, id_of(format!("layer{index}.relation.bias")))?;
                tape.reshape(l2, vec![t, n, k])?
            } else {
                tape.grid_conv(
                    x3,
                    id_of(format!("layer{index}.relation.kernel")),
                    id_of(format!("layer{index}.relation.bias")),
                )?
            };
            let rel = tape.softmax_axis(logits, 2)?;
            let next = update_tail(tape, index, bound, feats, rel, x2, t, n, width)?;
            return Ok((next, rel, Some(off)));
        }
    };

    let next = update_tail(tape, index, bound, feats, rel, x2, t, n, width)?;
    Ok((next, rel, None))
}

fn dw_offsets<S: Scalar>(
    tape: &mut Tape<S>,
    index: usize,
    bound: &[(String, TensorId)],
    x3: TensorId,
    t: usize,
    n: usize,
    k: usize,
) -> Result<TensorId> {
    let id_of = |name: String| -> TensorId {
        bound
            .iter()
            .find(|(nm, _)| *nm == name)
            .map(|(_, id)| *id)
            .expect("bound parameter")
    };
    let raw = tape.grid_conv(
        x3,
        id_of(format!("layer{index}.offset.kernel")),
        id_of(format!("layer{index}.offset.bias")),
    )?;
    tape.reshape(raw, vec![t, n, k, 2])
}

/// `x <- relu((sum_k rel_k * feats_k) w) + x`.
#[allow(clippy::too_many_arguments)]
fn update_tail<S: Scalar>(
    tape: &mut Tape<S>,
    index: usize,
    bound: &[(String, TensorId)],
    feats: TensorId,
    rel: TensorId,
    x2: TensorId,
    t: usize,
    n: usize,
    width: usize,
) -> Result<TensorId> {
    let agg = tape.weighted_sum_k(feats, rel)?;
    let agg2 = tape.reshape(agg, vec![t * n, width])?;
    transform_tail(tape, index, bound, agg2, x2, t, n, width)
}

#[allow(clippy::too_many_arguments)]
fn transform_tail<S: Scalar>(
    tape: &mut Tape<S>,
    index: usize,
    bound: &[(String, TensorId)],
    agg2: TensorId,
    x2: TensorId,
    t: usize,
    n: usize,
    width: usize,
) -> Result<TensorId> {
    let id_of = |name: String| -> TensorId {
        bound
            .iter()
            .find(|(nm, _)| *nm == name)
            .map(|(_, id)| *id)
            .expect("bound parameter")
    };
    tape.set_mac_scope("transform");
    let h = tape.matmul(agg2, id_of(format!("layer{index}.transform")))?;
    let r = tape.relu(h);
    let res = tape.add(r, x2)?;
    tape.reshape(res, vec![t, n, width])
}

/// Spatial max-pool then temporal mean-pool onto one group vector.
pub fn global_pool<S: Scalar>(
    tape: &mut Tape<S>,
    x3: TensorId,
    presence: Option<&[bool]>,
) -> Result<TensorId> {
    let per_frame = tape.reduce_max_axis(x3, 1, presence)?;
    tape.reduce_mean_axis(per_frame, 0)
}

/// Convenience wrapper: run one forward pass on a private tape and return the
/// logits tensor.
pub fn forward_logits<S: Scalar>(
    cfg: &DinConfig,
    params: &ModelParams<S>,
    grid: &FeatureGrid<S>,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let grid_id = tape.constant(grid.tensor().clone());
    let pass = forward(&mut tape, cfg, params, grid_id, grid.presence(), false)?;
    Ok(tape.value(pass.logits).clone())
}
