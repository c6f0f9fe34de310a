//! Layered run configuration: defaults <- TOML config file <- command-line
//! flags. The effective configuration is always written to the run manifest.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use din_core::grid::FieldSpec;
use din_core::model::{DinConfig, Variant};
use din_core::synth::{DisplacementLaw, SyntheticTaskSpec};
use din_core::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(&self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => bail!("invalid_config: unknown precision '{other}'"),
        }
    }
}

/// "kTxkN" (e.g. 3x3, 1x9) or the factorised pair form "1x3,3x1".
pub fn parse_field(s: &str) -> Result<FieldSpec> {
    let parse_one = |part: &str| -> Result<(usize, usize)> {
        let (kt, kn) = part
            .split_once(['x', 'X'])
            .with_context(|| format!("invalid_config: field '{part}' is not kTxkN"))?;
        Ok((
            kt.trim().parse().context("invalid_config: bad field extent")?,
            kn.trim().parse().context("invalid_config: bad field extent")?,
        ))
    };
    if let Some((a, b)) = s.split_once(',') {
        let (akt, akn) = parse_one(a)?;
        let (bkt, bkn) = parse_one(b)?;
        if akt != 1 || bkn != 1 {
            bail!("invalid_config: factorised field must be 1xkN,kTx1, got '{s}'");
        }
        return Ok(FieldSpec::new(bkt, akn)?);
    }
    let (kt, kn) = parse_one(s)?;
    Ok(FieldSpec::new(kt, kn)?)
}

#[derive(Clone, Debug, Default, Deserialize)]
pub struct FileConfig {
    pub model: Option<ModelFile>,
    pub task: Option<TaskFile>,
    pub train: Option<TrainFile>,
}

#[derive(Clone, Debug, Default, Deserialize)]
pub struct ModelFile {
    pub variant: Option<String>,
    pub field: Option<String>,
    pub embed_dim: Option<usize>,
    pub lite_dim: Option<usize>,
    pub classes: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
pub struct TaskFile {
    pub law: Option<String>,
    pub frames: Option<usize>,
    pub persons: Option<usize>,
    pub vocab: Option<usize>,
    pub noise: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
pub struct TrainFile {
    pub base_lr: Option<f64>,
    pub decay_every: Option<usize>,
    pub decay: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub precision: Option<String>,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("missing_file: {}", p.display()))?;
            toml::from_str(&text)
                .with_context(|| format!("invalid_config: cannot parse {}", p.display()))
        }
    }
}

/// Flag-level overrides shared by the model-running subcommands.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct ModelFlags {
    /// Reasoning variant: base, edp, arg, dr, dw, dr+dw, dr+dw*, st, lite[:inner]
    #[arg(long)]
    pub variant: Option<String>,
    /// Interaction field as kTxkN (e.g. 3x3, 1x9); st also accepts 1x3,3x1
    #[arg(long)]
    pub field: Option<String>,
    /// Reasoning width D
    #[arg(long = "D")]
    pub embed_dim: Option<usize>,
    /// Lite width D_l
    #[arg(long = "Dl")]
    pub lite_dim: Option<usize>,
}

/// Fully resolved configuration (serialized into every manifest).
#[derive(Clone, Debug, Serialize)]
pub struct Effective {
    pub model: ModelSection,
    pub task: TaskSection,
    pub train: TrainSection,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelSection {
    pub variant: String,
    pub field: String,
    pub embed_dim: usize,
    pub lite_dim: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct TaskSection {
    pub law: String,
    pub frames: usize,
    pub persons: usize,
    pub vocab: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSection {
    pub base_lr: f64,
    pub decay_every: usize,
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: String,
}

pub struct Resolved {
    pub din: DinConfig,
    pub task: SyntheticTaskSpec,
    pub train: TrainConfig,
    pub precision: Precision,
}

impl Resolved {
    pub fn effective(&self) -> Effective {
        Effective {
            model: ModelSection {
                variant: self.din.variant.name(),
                field: self.din.field.to_string(),
                embed_dim: self.din.embed_dim,
                lite_dim: self.din.lite_dim,
                classes: self.din.classes,
            },
            task: TaskSection {
                law: self.task.law.name().to_string(),
                frames: self.task.frames,
                persons: self.task.persons,
                vocab: self.task.vocab,
                noise: self.task.noise,
                seed: self.task.seed,
            },
            train: TrainSection {
                base_lr: self.train.base_lr,
                decay_every: self.train.decay_every,
                decay: self.train.decay,
                epochs: self.train.epochs,
                batch_size: self.train.batch_size,
                seed: self.train.seed,
                precision: self.precision.name().to_string(),
            },
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn resolve(
    file: &FileConfig,
    model_flags: &ModelFlags,
    law_flag: Option<&str>,
    frames_flag: Option<usize>,
    persons_flag: Option<usize>,
    noise_flag: Option<f64>,
    epochs_flag: Option<usize>,
    seed_flag: Option<u64>,
    precision_flag: Option<Precision>,
    seed_goes_to_task: bool,
) -> Result<Resolved> {
    let mf = file.model.clone().unwrap_or_default();
    let tf = file.task.clone().unwrap_or_default();
    let rf = file.train.clone().unwrap_or_default();

    let variant = match model_flags.variant.as_deref().or(mf.variant.as_deref()) {
        Some(v) => Variant::parse(v)?,
        None => Variant::DrDw,
    };
    let field = match model_flags.field.as_deref().or(mf.field.as_deref()) {
        Some(f) => parse_field(f)?,
        None => FieldSpec::new(3, 3)?,
    };
    let embed_dim = model_flags.embed_dim.or(mf.embed_dim).unwrap_or(64);
    let lite_dim = model_flags.lite_dim.or(mf.lite_dim).unwrap_or(16);
    let classes = mf.classes.unwrap_or(8);

    let defaults = SyntheticTaskSpec::default();
    let law = match law_flag.or(tf.law.as_deref()) {
        Some(l) => DisplacementLaw::parse(l)?,
        None => defaults.law,
    };
    let mut task = SyntheticTaskSpec {
        frames: frames_flag.or(tf.frames).unwrap_or(defaults.frames),
        persons: persons_flag.or(tf.persons).unwrap_or(defaults.persons),
        vocab: tf.vocab.unwrap_or(defaults.vocab),
        classes,
        noise: noise_flag.or(tf.noise).unwrap_or(defaults.noise),
        law,
        seed: tf.seed.unwrap_or(0),
    };

    let tdef = TrainConfig::default();
    let mut train = TrainConfig {
        base_lr: rf.base_lr.unwrap_or(tdef.base_lr),
        decay_every: rf.decay_every.unwrap_or(tdef.decay_every),
        decay: rf.decay.unwrap_or(tdef.decay),
        epochs: epochs_flag.or(rf.epochs).unwrap_or(tdef.epochs),
        batch_size: rf.batch_size.unwrap_or(tdef.batch_size),
        seed: rf.seed.unwrap_or(tdef.seed),
        ..tdef
    };
    if let Some(seed) = seed_flag {
        if seed_goes_to_task {
            task.seed = seed;
        } else {
            train.seed = seed;
        }
    }
    let precision = match precision_flag {
        Some(p) => p,
        None => match rf.precision.as_deref() {
            Some(p) => Precision::parse(p)?,
            None => Precision::F64,
        },
    };

    let din = DinConfig::new(variant, embed_dim, lite_dim, field, classes)
        .with_input_dim(task.input_dim());
    din.validate()?;
    Ok(Resolved {
        din,
        task,
        train,
        precision,
    })
}
