//! Soft attention and the symmetry-aware feature attention (SaFA) block.
//!
//! SaFA has two halves. The feature-difference half reduces the encoding to a
//! single-channel map with three separable convolutions, then runs one LSTM
//! down the rows and one across the columns, treating each spatial index as
//! a timestep. The symmetry half multiplies that map with its transpose
//! (each position against its mirror across the main diagonal) and turns
//! the result into a sigmoid gate with a second convolution stack.

use rand::Rng;

use crate::layers::{Bindings, LstmLayer, LstmVars, NormLayer, NormVars, SeparableConvLayer, SeparableConvVars};
use crate::optim::ParamSet;
use crate::tape::{Tape, Var};
use crate::{Error, Real, Result, Tensor};

/// Filter counts of the SaFA convolution stacks; the last stage always has
/// one filter.
pub const SAFA_FILTERS: [usize; 3] = [256, 64, 1];

/// Parameter layout of soft attention: one separable conv reducing the
/// encoding to an attention logit map, plus a residual scale `gamma`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftAttentionParams {
    pub prefix: String,
    pub conv: SeparableConvLayer,
}

#[derive(Clone, Copy, Debug)]
pub struct SoftAttentionVars {
    pub conv: SeparableConvVars,
    pub gamma: Var,
}

impl SoftAttentionParams {
    pub fn new(prefix: &str, channels: usize, kernel: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            conv: SeparableConvLayer::new(format!("{prefix}.conv"), channels, 1, kernel),
        }
    }

    fn gamma_name(&self) -> String {
        format!("{}.gamma", self.prefix)
    }

    /// Gamma starts at zero so the block is the identity at initialization.
    pub fn register<T: Real>(&self, set: &mut ParamSet<T>, rng: &mut impl Rng) -> Result<()> {
        self.conv.register(set, rng, false)?;
        set.insert(&self.gamma_name(), Tensor::zeros(&[1]))
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, set: &ParamSet<T>, b: &mut Bindings) -> Result<SoftAttentionVars> {
        Ok(SoftAttentionVars {
            conv: self.conv.bind(tape, set, b)?,
            gamma: b.bind(tape, set, &self.gamma_name())?,
        })
    }
}

pub struct SoftAttentionOut {
    /// Attention distribution over positions, `[H, W, 1]`, sums to one.
    pub distribution: Var,
    pub f_sa: Var,
}

/// `F_sa = f_enc + gamma * (A ⊙ f_enc)` where `A` is the spatial softmax of
/// a C→1 convolution, rescaled by `H·W` so a uniform map weights every
/// position by one.
pub fn soft_attention<T: Real>(tape: &mut Tape<T>, f_enc: Var, vars: &SoftAttentionVars) -> Result<SoftAttentionOut> {
    let s = tape.value(f_enc).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("soft_attention", format!("{s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let logits = vars.conv.apply(tape, f_enc)?;
    let flat = tape.reshape(logits, &[h * w])?;
    let dist = tape.softmax(flat)?;
    let distribution = tape.reshape(dist, &[h, w, 1])?;
    let map = tape.scale(distribution, T::of_usize(h * w))?;
    let weighted = tape.mul_channel(f_enc, map)?;
    let scaled = tape.scale_by(weighted, vars.gamma)?;
    let f_sa = tape.add(f_enc, scaled)?;
    Ok(SoftAttentionOut { distribution, f_sa })
}

/// Parameter layout of the SaFA block for a `[H, W, C]` encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct SaFAParams {
    pub height: usize,
    pub width: usize,
    pub fdab_convs: [SeparableConvLayer; 3],
    /// Runs over rows: `H` steps of `W` features, hidden size `W`.
    pub lstm_h: LstmLayer,
    /// Runs over columns: `W` steps of `H` features, hidden size `H`.
    pub lstm_w: LstmLayer,
    pub out_convs: [SeparableConvLayer; 3],
    /// Normalization after the two hidden convs of each stack.
    pub fdab_norms: Option<[NormLayer; 2]>,
    pub out_norms: Option<[NormLayer; 2]>,
}

#[derive(Clone, Copy, Debug)]
pub struct SaFAVars {
    pub fdab_convs: [SeparableConvVars; 3],
    pub fdab_norms: Option<[NormVars; 2]>,
    pub lstm_h: LstmVars,
    pub lstm_w: LstmVars,
    pub out_convs: [SeparableConvVars; 3],
    pub out_norms: Option<[NormVars; 2]>,
}

impl SaFAParams {
    /// `filters` are the widths of the first two stages of both conv stacks.
    pub fn new(
        prefix: &str,
        height: usize,
        width: usize,
        channels: usize,
        filters: [usize; 2],
        kernel: usize,
        norm: bool,
    ) -> Self {
        let stack = |name: &str, cin: usize| {
            [
                SeparableConvLayer::new(format!("{prefix}.{name}0"), cin, filters[0], kernel),
                SeparableConvLayer::new(format!("{prefix}.{name}1"), filters[0], filters[1], kernel),
                SeparableConvLayer::new(format!("{prefix}.{name}2"), filters[1], 1, kernel),
            ]
        };
        let norms = |name: &str| {
            norm.then(|| {
                [0, 1].map(|i| NormLayer {
                    prefix: format!("{prefix}.{name}{i}.norm"),
                    channels: filters[i],
                })
            })
        };
        Self {
            height,
            width,
            fdab_convs: stack("fdab", channels),
            lstm_h: LstmLayer::new(format!("{prefix}.lstm_h"), width, width),
            lstm_w: LstmLayer::new(format!("{prefix}.lstm_w"), height, height),
            out_convs: stack("out", 1),
            fdab_norms: norms("fdab"),
            out_norms: norms("out"),
        }
    }

    pub fn filter_counts(&self) -> [usize; 3] {
        [
            self.fdab_convs[0].out_channels,
            self.fdab_convs[1].out_channels,
            self.fdab_convs[2].out_channels,
        ]
    }

    /// With `zero` set every parameter starts at zero. Otherwise only the
    /// pointwise weights of the last output conv are zeroed, so `F_attn`
    /// starts as the uniform 0.5 map and the gate opens gradually.
    pub fn register<T: Real>(&self, set: &mut ParamSet<T>, rng: &mut impl Rng, zero: bool) -> Result<()> {
        for c in &self.fdab_convs {
            c.register(set, rng, zero)?;
        }
        self.lstm_h.register(set, rng, zero)?;
        self.lstm_w.register(set, rng, zero)?;
        for c in &self.out_convs {
            c.register(set, rng, zero)?;
        }
        let last = &self.out_convs[2].names()[1];
        let p = set.get_mut(last).expect("just registered");
        p.value = Tensor::zeros(p.value.shape());
        for n in self.fdab_norms.iter().chain(&self.out_norms).flatten() {
            n.register(set)?;
        }
        Ok(())
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, set: &ParamSet<T>, b: &mut Bindings) -> Result<SaFAVars> {
        let stack = |layers: &[SeparableConvLayer; 3],
                     tape: &mut Tape<T>,
                     b: &mut Bindings|
         -> Result<[SeparableConvVars; 3]> {
            Ok([
                layers[0].bind(tape, set, b)?,
                layers[1].bind(tape, set, b)?,
                layers[2].bind(tape, set, b)?,
            ])
        };
        let norms =
            |layers: &Option<[NormLayer; 2]>, tape: &mut Tape<T>, b: &mut Bindings| -> Result<Option<[NormVars; 2]>> {
                match layers {
                    Some(l) => Ok(Some([l[0].bind(tape, set, b)?, l[1].bind(tape, set, b)?])),
                    None => Ok(None),
                }
            };
        let fdab_convs = stack(&self.fdab_convs, tape, b)?;
        let fdab_norms = norms(&self.fdab_norms, tape, b)?;
        let lstm_h = self.lstm_h.bind(tape, set, b)?;
        let lstm_w = self.lstm_w.bind(tape, set, b)?;
        let out_convs = stack(&self.out_convs, tape, b)?;
        let out_norms = norms(&self.out_norms, tape, b)?;
        Ok(SaFAVars {
            fdab_convs,
            fdab_norms,
            lstm_h,
            lstm_w,
            out_convs,
            out_norms,
        })
    }
}

/// Intermediates of the feature-difference half.
#[derive(Clone, Copy, Debug)]
pub struct FdabOut {
    /// `[H, W]`, rows as timesteps.
    pub f_h: Var,
    /// `[W, H]`, columns as timesteps.
    pub f_w_spatial: Var,
    pub f_hlstm: Var,
    pub f_wlstm: Var,
    /// `f_hlstm + f_wlstm`, `[H, W, 1]`.
    pub f_lstm: Var,
}

/// conv → [norm] → ReLU → conv → [norm] → ReLU → conv, no activation after
/// the last stage.
fn conv_stack<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    convs: &[SeparableConvVars; 3],
    norms: &Option<[NormVars; 2]>,
) -> Result<Var> {
    let mut h = x;
    for i in 0..2 {
        h = convs[i].apply(tape, h)?;
        if let Some(n) = norms {
            h = tape.layer_norm(h, n[i].gamma, n[i].beta)?;
        }
        h = tape.relu(h)?;
    }
    convs[2].apply(tape, h)
}

pub fn fdab<T: Real>(tape: &mut Tape<T>, f_enc: Var, vars: &SaFAVars) -> Result<FdabOut> {
    let s = tape.value(f_enc).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("fdab", format!("{s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let reduced = conv_stack(tape, f_enc, &vars.fdab_convs, &vars.fdab_norms)?;
    let f_h = tape.reshape(reduced, &[h, w])?;
    let f_w_spatial = tape.transpose2(f_h)?;

    let rows = vars.lstm_h.apply(tape, f_h)?;
    let f_hlstm = tape.reshape(rows, &[h, w, 1])?;

    let cols = vars.lstm_w.apply(tape, f_w_spatial)?;
    let cols = tape.transpose2(cols)?;
    let f_wlstm = tape.reshape(cols, &[h, w, 1])?;

    let f_lstm = tape.add(f_hlstm, f_wlstm)?;
    Ok(FdabOut {
        f_h,
        f_w_spatial,
        f_hlstm,
        f_wlstm,
        f_lstm,
    })
}

/// `F_symmetry[i, j] = F[i, j] · F[j, i]`. Requires a square map.
pub fn sab<T: Real>(tape: &mut Tape<T>, f_lstm: Var) -> Result<Var> {
    let s = tape.value(f_lstm).shape().to_vec();
    if s.len() != 3 || s[2] != 1 {
        return Err(Error::shape("sab", format!("expected [H, W, 1], got {s:?}")));
    }
    if s[0] != s[1] {
        return Err(Error::shape(
            "sab",
            format!("map must be square, got {}x{}", s[0], s[1]),
        ));
    }
    let mirrored = tape.transpose2(f_lstm)?;
    tape.mul(f_lstm, mirrored)
}

/// Convolution stack and sigmoid producing the attention map `F_attn`.
pub fn safa_map<T: Real>(tape: &mut Tape<T>, f_symmetry: Var, vars: &SaFAVars) -> Result<Var> {
    let logits = conv_stack(tape, f_symmetry, &vars.out_convs, &vars.out_norms)?;
    tape.sigmoid(logits)
}

/// Every SaFA intermediate.
#[derive(Clone, Copy, Debug)]
pub struct SafaOut {
    pub fdab: FdabOut,
    pub f_symmetry: Var,
    pub f_attn: Var,
}

pub fn safa<T: Real>(tape: &mut Tape<T>, f_enc: Var, vars: &SaFAVars) -> Result<SafaOut> {
    let fdab = fdab(tape, f_enc, vars)?;
    let f_symmetry = sab(tape, fdab.f_lstm)?;
    let f_attn = safa_map(tape, f_symmetry, vars)?;
    Ok(SafaOut {
        fdab,
        f_symmetry,
        f_attn,
    })
}
