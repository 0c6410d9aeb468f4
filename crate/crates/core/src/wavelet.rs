//! Single-level orthonormal 2D Haar transform and the boundary-feature
//! extractor built on it.
//!
//! For a 2×2 block `[a, b; c, d]` the four coefficients are
//!
//! ```text
//! ll = (a + b + c + d) / 2      lh = (a - b + c - d) / 2
//! hl = (a + b - c - d) / 2      hh = (a - b - c + d) / 2
//! ```
//!
//! The transform matrix is orthonormal and symmetric, so it is its own
//! inverse and preserves energy.
//!
//! Boundary features drop the `ll` band and invert. Per block this subtracts
//! the block mean, leaving only the high-frequency residual.

use crate::tape::{Tape, Var};
use crate::{Error, Real, Result, Tensor};

/// Subband index in packed `[4, H/2, W/2, C]` tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Ll = 0,
    Lh = 1,
    Hl = 2,
    Hh = 3,
}

/// Subbands of a single channel, each `[H/2, W/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HaarSubbands<T: Real = f32> {
    /// Approximation.
    pub ll: Tensor<T>,
    /// Horizontal detail.
    pub lh: Tensor<T>,
    /// Vertical detail.
    pub hl: Tensor<T>,
    /// Diagonal detail.
    pub hh: Tensor<T>,
}

impl<T: Real> HaarSubbands<T> {
    pub fn energy(&self) -> T {
        self.ll.sq_norm() + self.lh.sq_norm() + self.hl.sq_norm() + self.hh.sq_norm()
    }
}

#[inline]
fn butterfly<T: Real>(a: T, b: T, c: T, d: T) -> [T; 4] {
    let half = T::of(0.5);
    [
        (a + b + c + d) * half,
        (a - b + c - d) * half,
        (a + b - c - d) * half,
        (a - b - c + d) * half,
    ]
}

fn even_dims(op: &'static str, h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(Error::OddDimension {
            op,
            height: h,
            width: w,
        });
    }
    Ok(())
}

pub fn haar_dwt2<T: Real>(channel: &Tensor<T>) -> Result<HaarSubbands<T>> {
    channel.expect_rank(2, "haar_dwt2")?;
    let (h, w) = (channel.shape()[0], channel.shape()[1]);
    let packed = dwt_packed(&channel.clone().reshape(&[h, w, 1])?)?;
    let q = h * w / 4;
    let band = |b: usize| Tensor::new(&[h / 2, w / 2], packed.data()[b * q..(b + 1) * q].to_vec());
    Ok(HaarSubbands {
        ll: band(0)?,
        lh: band(1)?,
        hl: band(2)?,
        hh: band(3)?,
    })
}

pub fn haar_idwt2<T: Real>(bands: &HaarSubbands<T>) -> Result<Tensor<T>> {
    let s = bands.ll.shape();
    if s.len() != 2 || [&bands.lh, &bands.hl, &bands.hh].iter().any(|b| b.shape() != s) {
        return Err(Error::shape(
            "haar_idwt2",
            format!(
                "ll {:?}, lh {:?}, hl {:?}, hh {:?}",
                s,
                bands.lh.shape(),
                bands.hl.shape(),
                bands.hh.shape()
            ),
        ));
    }
    let (hh, wh) = (s[0], s[1]);
    let mut data = Vec::with_capacity(4 * hh * wh);
    for b in [&bands.ll, &bands.lh, &bands.hl, &bands.hh] {
        data.extend_from_slice(b.data());
    }
    let packed = Tensor::new(&[4, hh, wh, 1], data)?;
    idwt_packed(&packed)?.reshape(&[2 * hh, 2 * wh])
}

/// `[H, W, C]` to `[4, H/2, W/2, C]`, bands in [`Band`] order.
pub fn dwt_packed<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "haar_dwt2";
    x.expect_rank(3, OP)?;
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    even_dims(OP, h, w)?;
    let (h2, w2) = (h / 2, w / 2);
    let q = h2 * w2 * c;
    let xd = x.data();
    let mut out = vec![T::zero(); 4 * q];
    for i in 0..h2 {
        for j in 0..w2 {
            let top = (2 * i * w + 2 * j) * c;
            let bot = ((2 * i + 1) * w + 2 * j) * c;
            let dst = (i * w2 + j) * c;
            for ch in 0..c {
                let coeffs = butterfly(xd[top + ch], xd[top + c + ch], xd[bot + ch], xd[bot + c + ch]);
                for (b, v) in coeffs.into_iter().enumerate() {
                    out[b * q + dst + ch] = v;
                }
            }
        }
    }
    Tensor::new(&[4, h2, w2, c], out)
}

/// Inverse of [`dwt_packed`].
pub fn idwt_packed<T: Real>(bands: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "haar_idwt2";
    bands.expect_rank(4, OP)?;
    if bands.shape()[0] != 4 {
        return Err(Error::shape(OP, format!("expected 4 bands, got {:?}", bands.shape())));
    }
    let (h2, w2, c) = (bands.shape()[1], bands.shape()[2], bands.shape()[3]);
    let (h, w) = (2 * h2, 2 * w2);
    let q = h2 * w2 * c;
    let bd = bands.data();
    let mut out = vec![T::zero(); h * w * c];
    for i in 0..h2 {
        for j in 0..w2 {
            let src = (i * w2 + j) * c;
            let top = (2 * i * w + 2 * j) * c;
            let bot = ((2 * i + 1) * w + 2 * j) * c;
            for ch in 0..c {
                let [a, b, cc, d] = butterfly(
                    bd[src + ch],
                    bd[q + src + ch],
                    bd[2 * q + src + ch],
                    bd[3 * q + src + ch],
                );
                out[top + ch] = a;
                out[top + c + ch] = b;
                out[bot + ch] = cc;
                out[bot + c + ch] = d;
            }
        }
    }
    Tensor::new(&[h, w, c], out)
}

pub(crate) fn zero_band_in_place<T: Real>(packed: &mut Tensor<T>, band: Band) -> Result<()> {
    packed.expect_rank(4, "zero_band")?;
    if packed.shape()[0] != 4 {
        return Err(Error::shape("zero_band", format!("{:?}", packed.shape())));
    }
    let q = packed.len() / 4;
    let b = band as usize;
    packed.data_mut()[b * q..(b + 1) * q]
        .iter_mut()
        .for_each(|v| *v = T::zero());
    Ok(())
}

/// High-frequency residual of every channel of `[H, W, C]`: transform, zero
/// the approximation band, invert.
pub fn boundary_features<T: Real>(f_enc: &Tensor<T>) -> Result<Tensor<T>> {
    let mut packed = dwt_packed(f_enc)?;
    zero_band_in_place(&mut packed, Band::Ll)?;
    idwt_packed(&packed)
}

/// Differentiable [`boundary_features`] recorded on `tape`.
pub fn boundary_features_on<T: Real>(tape: &mut Tape<T>, f_enc: Var) -> Result<Var> {
    let packed = tape.haar_dwt2(f_enc)?;
    let detail = tape.zero_band(packed, Band::Ll)?;
    tape.haar_idwt2(detail)
}
