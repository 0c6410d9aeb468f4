//! Full classifier: backbone, attention branches, fusion, gating, pooling
//! and a dense softmax head.
//!
//! ```text
//! image ─ backbone ─ F_enc ─┬─ soft attention ─ F_sa ──┐
//!                           ├─ boundary features ─ F_wav ┴─ fuse ─ F_fuse ─┐
//!                           └─ SaFA ─ F_attn ───────────────────── gate ───┴─ GAP ─ dense
//! ```

use serde::{Deserialize, Serialize};

use crate::attention::{self, SaFAParams, SafaOut, SoftAttentionParams};
use crate::fusion::{self, FusionState};
use crate::layers::{Bindings, ConvLayer, DenseLayer, NormLayer};
use crate::optim::ParamSet;
use crate::tape::{Gradients, Tape, Var};
use crate::wavelet;
use crate::{seeded_rng, Error, Real, Result, Tensor};

pub const HAM10000_CLASSES: [&str; 7] = ["akiec", "bcc", "bkl", "df", "mel", "nv", "vasc"];

/// Which tensor the SaFA map multiplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GateTarget {
    /// Gate the fused feature just before pooling.
    #[default]
    Fuse,
    /// Gate the encoding before it enters the soft-attention and wavelet
    /// branches.
    Enc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `[height, width, 3]`
    pub input_size: [usize; 3],
    /// Output channels of each backbone stage; every stage halves H and W.
    pub backbone: Vec<usize>,
    /// Normalize each backbone stage output before its ReLU.
    pub layer_norm: bool,
    /// Normalize the hidden conv outputs of both SaFA conv stacks before
    /// their ReLU.
    pub safa_layer_norm: bool,
    pub feature_channels: usize,
    pub num_classes: usize,
    pub soft_attention_enabled: bool,
    pub fusion_enabled: bool,
    pub safa_enabled: bool,
    pub gate_target: GateTarget,
    /// Widths of the first two SaFA conv stages.
    pub safa_filters: [usize; 2],
    pub kernel_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: [64, 64, 3],
            backbone: vec![16, 32, 64],
            layer_norm: false,
            safa_layer_norm: true,
            feature_channels: 64,
            num_classes: 7,
            soft_attention_enabled: true,
            fusion_enabled: true,
            safa_enabled: true,
            gate_target: GateTarget::Fuse,
            safa_filters: [256, 64],
            kernel_size: 3,
            seed: 0,
        }
    }
}

/// Ablation rows, from plain backbone to the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    BackboneOnly,
    SoftAttention,
    SoftAttentionFusion,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::BackboneOnly,
        Variant::SoftAttention,
        Variant::SoftAttentionFusion,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BackboneOnly => "backbone_only",
            Variant::SoftAttention => "soft_attention",
            Variant::SoftAttentionFusion => "soft_attention_fusion",
            Variant::Full => "full",
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, v: Variant) -> Self {
        let (sa, fu, safa) = match v {
            Variant::BackboneOnly => (false, false, false),
            Variant::SoftAttention => (true, false, false),
            Variant::SoftAttentionFusion => (true, true, false),
            Variant::Full => (true, true, true),
        };
        self.soft_attention_enabled = sa;
        self.fusion_enabled = fu;
        self.safa_enabled = safa;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [h, w, c] = self.input_size;
        if c != 3 {
            return bad(format!("input must have 3 channels, got {c}"));
        }
        if self.backbone.is_empty() {
            return bad("backbone needs at least one stage".into());
        }
        if self.backbone.contains(&0) {
            return bad("backbone stage with zero channels".into());
        }
        if self.feature_channels != *self.backbone.last().unwrap() {
            return bad(format!(
                "feature_channels {} must equal the last backbone stage {}",
                self.feature_channels,
                self.backbone.last().unwrap()
            ));
        }
        let div = 1usize << (self.backbone.len() + 1);
        if h != w || h % div != 0 {
            return bad(format!(
                "input {h}x{w} must be square and divisible by {div} for {} stages",
                self.backbone.len()
            ));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if self.safa_filters.contains(&0) {
            return bad("SaFA filter counts must be positive".into());
        }
        Ok(())
    }

    /// Spatial size of the encoding.
    pub fn feature_size(&self) -> usize {
        self.input_size[0] >> self.backbone.len()
    }

    /// Shape of `F_enc` and of the fusion weights.
    pub fn feature_shape(&self) -> [usize; 3] {
        let s = self.feature_size();
        [s, s, self.feature_channels]
    }
}

/// Fixed standardization applied to `[0, 1]` pixels before the first
/// convolution.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    backbone: Vec<(ConvLayer, Option<NormLayer>)>,
    soft_attention: Option<SoftAttentionParams>,
    safa: Option<SaFAParams>,
    head: DenseLayer,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut cin = 3;
        let backbone = cfg
            .backbone
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let l = ConvLayer {
                    prefix: format!("backbone.stage{i}"),
                    in_channels: cin,
                    out_channels: cout,
                    kernel: cfg.kernel_size,
                    stride: 2,
                };
                cin = cout;
                let norm = cfg.layer_norm.then(|| NormLayer {
                    prefix: format!("backbone.stage{i}.norm"),
                    channels: cout,
                });
                (l, norm)
            })
            .collect();
        let s = cfg.feature_size();
        let c = cfg.feature_channels;
        Self {
            backbone,
            soft_attention: cfg
                .soft_attention_enabled
                .then(|| SoftAttentionParams::new("soft_attention", c, cfg.kernel_size)),
            safa: cfg
                .safa_enabled
                .then(|| SaFAParams::new("safa", s, s, c, cfg.safa_filters, cfg.kernel_size, cfg.safa_layer_norm)),
            head: DenseLayer {
                prefix: "head".into(),
                inputs: c,
                outputs: cfg.num_classes,
            },
        }
    }
}

/// Nodes of one forward pass on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub image: Var,
    pub f_enc: Var,
    pub f_sa: Var,
    pub f_wav: Option<Var>,
    pub safa: Option<SafaOut>,
    pub f_fuse: Option<Var>,
    pub f_final: Var,
    /// `[1, K]`
    pub logits: Var,
}

/// Named intermediate feature maps of one pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T: Real = f32> {
    pub f_enc: Tensor<T>,
    pub f_h: Option<Tensor<T>>,
    pub f_w_spatial: Option<Tensor<T>>,
    pub f_hlstm: Option<Tensor<T>>,
    pub f_wlstm: Option<Tensor<T>>,
    pub f_lstm: Option<Tensor<T>>,
    pub f_symmetry: Option<Tensor<T>>,
    pub f_attn: Option<Tensor<T>>,
    pub f_sa: Tensor<T>,
    pub f_wav: Option<Tensor<T>>,
    pub f_fuse: Option<Tensor<T>>,
    pub f_final: Tensor<T>,
}

impl ForwardNodes {
    pub fn trace<T: Real>(&self, tape: &Tape<T>) -> ForwardTrace<T> {
        let get = |v: Var| tape.value(v).clone();
        let opt = |v: Option<Var>| v.map(get);
        ForwardTrace {
            f_enc: get(self.f_enc),
            f_h: opt(self.safa.map(|s| s.fdab.f_h)),
            f_w_spatial: opt(self.safa.map(|s| s.fdab.f_w_spatial)),
            f_hlstm: opt(self.safa.map(|s| s.fdab.f_hlstm)),
            f_wlstm: opt(self.safa.map(|s| s.fdab.f_wlstm)),
            f_lstm: opt(self.safa.map(|s| s.fdab.f_lstm)),
            f_symmetry: opt(self.safa.map(|s| s.f_symmetry)),
            f_attn: opt(self.safa.map(|s| s.f_attn)),
            f_sa: get(self.f_sa),
            f_wav: opt(self.f_wav),
            f_fuse: opt(self.f_fuse),
            f_final: get(self.f_final),
        }
    }
}

/// Gradients and outputs of one labelled sample.
#[derive(Clone, Debug)]
pub struct SampleGradients<T: Real> {
    pub loss: T,
    /// `[K]`
    pub logits: Tensor<T>,
    /// One per parameter, in [`ParamSet`] order.
    pub params: Vec<Tensor<T>>,
    pub f_wav: Option<Tensor<T>>,
    pub f_sa: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    layout: Layout,
    params: ParamSet<T>,
}

impl<T: Real> Model<T> {
    /// Initializes every parameter from `config.seed`. Each component draws
    /// from its own stream, so toggling a branch leaves the others' initial
    /// values unchanged. Head weights start at zero, so an untrained model
    /// predicts the uniform distribution.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = ParamSet::new();
        let seed = config.seed;
        for (i, (l, norm)) in layout.backbone.iter().enumerate() {
            l.register(&mut params, &mut seeded_rng(seed, &[1, i as u64]))?;
            if let Some(n) = norm {
                n.register(&mut params)?;
            }
        }
        if let Some(sa) = &layout.soft_attention {
            sa.register(&mut params, &mut seeded_rng(seed, &[2]))?;
        }
        if let Some(safa) = &layout.safa {
            safa.register(&mut params, &mut seeded_rng(seed, &[3]), false)?;
        }
        layout.head.register(&mut params, &mut seeded_rng(seed, &[4]))?;
        let head = params.get_mut("head.weight").expect("just registered");
        head.value = Tensor::zeros(head.value.shape());
        Ok(Self { config, layout, params })
    }

    /// Builds a model around existing parameters, checking names and shapes
    /// against a freshly laid out one.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let reference = Self::new(config.clone())?;
        if reference.params.len() != params.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected {} tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (want, got) in reference.params.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "expected {} {:?}, found {} {:?}",
                    want.name,
                    want.value.shape(),
                    got.name,
                    got.value.shape()
                )));
            }
        }
        Ok(Self {
            config,
            layout: reference.layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn fresh_fusion_state(&self, decay: f64) -> Result<FusionState<T>> {
        FusionState::new(&self.config.feature_shape(), decay)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut params = ParamSet::new();
        for p in self.params.iter() {
            params.insert(&p.name, p.value.cast()).expect("unique names");
        }
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params,
        }
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        if image.shape() != self.config.input_size {
            return Err(Error::shape(
                "backbone",
                format!("image {:?}, model expects {:?}", image.shape(), self.config.input_size),
            ));
        }
        Ok(())
    }

    /// `image: [Hin, Win, 3]` to `F_enc: [H, W, C]`.
    pub fn backbone_forward(&self, tape: &mut Tape<T>, b: &mut Bindings, image: Var) -> Result<Var> {
        self.check_image(tape.value(image))?;
        let offset = tape.constant(Tensor::full(tape.value(image).shape(), T::of(-INPUT_MEAN)));
        let centered = tape.add(image, offset)?;
        let mut x = tape.scale(centered, T::of(1.0 / INPUT_STD))?;
        for (layer, norm) in &self.layout.backbone {
            let v = layer.bind(tape, &self.params, b)?;
            let mut y = layer.apply(tape, &v, x)?;
            if let Some(n) = norm {
                let nv = n.bind(tape, &self.params, b)?;
                y = n.apply(tape, &nv, y)?;
            }
            x = tape.relu(y)?;
        }
        Ok(x)
    }

    /// Records the whole pass. `F_wav` and `F_sa` are captured whenever
    /// fusion is enabled so their gradients survive `backward`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        b: &mut Bindings,
        image: Var,
        fusion: &FusionState<T>,
    ) -> Result<ForwardNodes> {
        let cfg = &self.config;
        let f_enc = self.backbone_forward(tape, b, image)?;

        let safa = match &self.layout.safa {
            Some(p) => {
                let vars = p.bind(tape, &self.params, b)?;
                Some(attention::safa(tape, f_enc, &vars)?)
            }
            None => None,
        };
        let gate = safa.map(|s| s.f_attn);

        let base = match (gate, cfg.gate_target) {
            (Some(g), GateTarget::Enc) => tape.mul_channel(f_enc, g)?,
            _ => f_enc,
        };

        let f_sa = match &self.layout.soft_attention {
            Some(p) => {
                let vars = p.bind(tape, &self.params, b)?;
                attention::soft_attention(tape, base, &vars)?.f_sa
            }
            None => base,
        };

        let (f_wav, f_fuse) = if cfg.fusion_enabled {
            if fusion.shape() != tape.value(base).shape() {
                return Err(Error::shape(
                    "fuse",
                    format!(
                        "fusion state {:?} vs features {:?}",
                        fusion.shape(),
                        tape.value(base).shape()
                    ),
                ));
            }
            let f_wav = wavelet::boundary_features_on(tape, base)?;
            tape.capture(f_wav);
            tape.capture(f_sa);
            let fused = fusion::fuse_on(tape, f_wav, f_sa, &fusion.g_w_ema, &fusion.g_sa_ema)?;
            (Some(f_wav), Some(fused))
        } else {
            (None, None)
        };

        let pre = f_fuse.unwrap_or(f_sa);
        let f_final = match (gate, cfg.gate_target) {
            (Some(g), GateTarget::Fuse) => tape.mul_channel(pre, g)?,
            _ => pre,
        };

        let pooled = tape.global_average_pool(f_final)?;
        let head = self.layout.head.bind(tape, &self.params, b)?;
        let logits = self.layout.head.apply(tape, &head, pooled)?;
        Ok(ForwardNodes {
            image,
            f_enc,
            f_sa,
            f_wav,
            safa,
            f_fuse,
            f_final,
            logits,
        })
    }

    /// Inference pass: logits `[K]` and the named intermediates.
    pub fn predict(&self, image: &Tensor<T>, fusion: &FusionState<T>) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let nodes = self.forward(&mut tape, &mut Bindings::new(), x, fusion)?;
        let logits = tape.value(nodes.logits).clone().reshape(&[self.config.num_classes])?;
        Ok((logits, nodes.trace(&tape)))
    }

    pub fn logits(&self, image: &Tensor<T>, fusion: &FusionState<T>) -> Result<Tensor<T>> {
        self.predict(image, fusion).map(|(l, _)| l)
    }

    /// Loss, logits and all gradients for one sample. The loss is scaled by
    /// `loss_scale` before differentiation (use `1/B` for a batch mean).
    pub fn sample_gradients(
        &self,
        image: &Tensor<T>,
        label: usize,
        fusion: &FusionState<T>,
        loss_scale: T,
    ) -> Result<SampleGradients<T>> {
        let mut tape = Tape::checked();
        let x = tape.constant(image.clone());
        let mut b = Bindings::new();
        let nodes = self.forward(&mut tape, &mut b, x, fusion)?;
        let ce = tape.cross_entropy(nodes.logits, &[label])?;
        let loss = tape.scale(ce, loss_scale)?;
        let mut grads = tape.backward(loss)?;
        let params = self.collect_param_grads(&b, &mut grads);
        let logits = tape.value(nodes.logits).clone().reshape(&[self.config.num_classes])?;
        let mut captured = |v: Option<Var>| -> Option<Tensor<T>> {
            v.map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        };
        let f_wav = captured(nodes.f_wav);
        let f_sa = captured(nodes.f_fuse.map(|_| nodes.f_sa));
        Ok(SampleGradients {
            loss: tape.value(ce).item(),
            logits,
            params,
            f_wav,
            f_sa,
        })
    }

    /// Gradients per parameter in set order; parameters that do not reach
    /// the loss get zeros.
    pub fn collect_param_grads(&self, b: &Bindings, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        for (pos, v) in b.iter() {
            if let Some(g) = grads.take(v) {
                out[pos].add_assign(&g).expect("parameter gradient shape");
            }
        }
        out
    }
}
