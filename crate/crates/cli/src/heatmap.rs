//! Grayscale rendering of single-channel feature maps.

use serde::Serialize;

/// Min-max scaling applied to one map.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scaling {
    pub file: String,
    pub min: f64,
    pub max: f64,
    /// A constant map renders as uniform gray 128.
    pub constant: bool,
    pub map_height: usize,
    pub map_width: usize,
    pub height: usize,
    pub width: usize,
}

/// Scales `map` (`h × w`, row-major) to 0..=255 and upsamples it by nearest
/// neighbour to `out_h × out_w`.
pub fn render(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> (Vec<u8>, f64, f64) {
    assert_eq!(map.len(), h * w);
    let min = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let level = |v: f64| -> u8 {
        if max > min {
            ((v - min) / (max - min) * 255.0).round() as u8
        } else {
            128
        }
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = y * h / out_h;
        for x in 0..out_w {
            out.push(level(map[sy * w + x * w / out_w]));
        }
    }
    (out, min, max)
}
