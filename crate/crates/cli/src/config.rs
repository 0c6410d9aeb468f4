//! Run configuration: a JSON file, overridden field by field by flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wagf::data::SynthSpec;
use wagf::model::{GateTarget, ModelConfig, Variant};
use wagf::train::TrainConfig;

use crate::{Failure, TrainArgs};

pub const RESOLVED_CONFIG: &str = "config.json";

/// Where training and validation samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub image_dir: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Separate validation set; when absent, a stratified share of the
    /// training data is held out.
    pub val_image_dir: Option<PathBuf>,
    pub val_labels: Option<PathBuf>,
    pub val_fraction: f64,
    /// Generated data, used when no image directory is given.
    pub synth: Option<SynthSpec>,
    /// Size multiplier from flip/rotation augmentation of the training
    /// split; 1 disables it.
    pub augment: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_dir: None,
            labels: None,
            val_image_dir: None,
            val_labels: None,
            val_fraction: 0.3,
            synth: None,
            augment: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    /// Worker threads; 1 runs everything on the calling thread.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            output_dir: PathBuf::from("run"),
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    }

    /// Config file (or defaults) with every given flag applied on top.
    pub fn resolve(args: &TrainArgs) -> Result<Self, Failure> {
        let mut c = match &args.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        let d = &mut c.data;
        if let Some(v) = &args.images {
            d.image_dir = Some(v.clone());
        }
        if let Some(v) = &args.labels {
            d.labels = Some(v.clone());
        }
        if let Some(v) = &args.val_images {
            d.val_image_dir = Some(v.clone());
        }
        if let Some(v) = &args.val_labels {
            d.val_labels = Some(v.clone());
        }
        if let Some(v) = args.val_fraction {
            d.val_fraction = v;
        }
        if let Some(v) = args.augment {
            d.augment = v;
        }
        if let Some(n) = args.synth_per_class {
            let size = c.model.input_size[0];
            d.synth = Some(SynthSpec::desk(n, size, args.seed.unwrap_or(c.model.seed)));
        }
        if let Some(v) = &args.out {
            c.output_dir = v.clone();
        }
        if let Some(v) = args.threads {
            c.threads = Some(v);
        }
        let t = &mut c.train;
        if let Some(v) = args.epochs {
            t.epochs = v;
        }
        if let Some(v) = args.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = args.lr {
            t.learning_rate = v;
        }
        if let Some(v) = args.fusion_decay {
            t.fusion_decay = v;
        }
        if let Some(v) = args.seed {
            t.seed = v;
            c.model.seed = v;
        }
        let m = &mut c.model;
        if let Some(v) = args.variant {
            *m = m.clone().with_variant(v.into());
        }
        if args.no_soft_attention {
            m.soft_attention_enabled = false;
        }
        if args.no_fusion {
            m.fusion_enabled = false;
        }
        if args.no_safa {
            m.safa_enabled = false;
        }
        if args.backbone_norm {
            m.layer_norm = true;
        }
        if args.no_safa_norm {
            m.safa_layer_norm = false;
        }
        if let Some(g) = args.gate_target {
            m.gate_target = g.into();
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if d.image_dir.is_some() != d.labels.is_some() {
            return Err(Failure::usage("data: image_dir and labels must be given together"));
        }
        if d.val_image_dir.is_some() != d.val_labels.is_some() {
            return Err(Failure::usage(
                "data: val_image_dir and val_labels must be given together",
            ));
        }
        if d.image_dir.is_none() && d.synth.is_none() {
            return Err(Failure::usage("data: give image_dir and labels, or a synth spec"));
        }
        if d.val_image_dir.is_none() && !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
            return Err(Failure::usage(format!(
                "data: val_fraction {} must be in (0, 1)",
                d.val_fraction
            )));
        }
        if d.augment == 0 {
            return Err(Failure::usage("data: augment must be at least 1"));
        }
        if let Some(s) = &d.synth {
            s.validate()?;
            if s.image_size != self.model.input_size[0] {
                return Err(Failure::usage(format!(
                    "data: synth image size {} differs from model input {}",
                    s.image_size, self.model.input_size[0]
                )));
            }
        }
        if self.threads == Some(0) {
            return Err(Failure::usage("threads must be at least 1"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// `clap`-facing names of the ablation rows.
#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum VariantArg {
    BackboneOnly,
    SoftAttention,
    SoftAttentionFusion,
    Full,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::BackboneOnly => Variant::BackboneOnly,
            VariantArg::SoftAttention => Variant::SoftAttention,
            VariantArg::SoftAttentionFusion => Variant::SoftAttentionFusion,
            VariantArg::Full => Variant::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum GateArg {
    Fuse,
    Enc,
}

impl From<GateArg> for GateTarget {
    fn from(g: GateArg) -> Self {
        match g {
            GateArg::Fuse => GateTarget::Fuse,
            GateArg::Enc => GateTarget::Enc,
        }
    }
}
