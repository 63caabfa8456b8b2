//! Frame preprocessing: luminance grayscale, area-average resize to
//! 84x84, and division by 255.

use crate::env::Frame;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const OBS_SIZE: usize = 84;

/// Overlap weights for area-average resampling from `src` to `dst`
/// samples along one axis. Weights of each output cell sum to 1.
fn resample_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * ratio;
            let hi = (i + 1) as f64 * ratio;
            let mut weights = Vec::new();
            let mut j = lo.floor() as usize;
            while (j as f64) < hi && j < src {
                let overlap = hi.min((j + 1) as f64) - lo.max(j as f64);
                if overlap > 0.0 {
                    weights.push((j, overlap / ratio));
                }
                j += 1;
            }
            weights
        })
        .collect()
}

/// RGB frame to an 84x84 grayscale plane with values in [0, 1].
pub fn preprocess<S: Scalar>(frame: &Frame) -> Result<Vec<S>> {
    if frame.width == 0 || frame.height == 0 || frame.rgb.len() != 3 * frame.width * frame.height {
        return Err(Error::Shape {
            op: "preprocess",
            lhs: vec![frame.height, frame.width],
            rhs: vec![frame.rgb.len()],
        });
    }
    // integer-weighted luminance keeps pure black/white exact
    let mut gray = vec![0.0f64; frame.width * frame.height];
    for (i, g) in gray.iter_mut().enumerate() {
        let r = frame.rgb[3 * i] as f64;
        let gch = frame.rgb[3 * i + 1] as f64;
        let b = frame.rgb[3 * i + 2] as f64;
        *g = (299.0 * r + 587.0 * gch + 114.0 * b) / 1000.0;
    }

    let rows = resample_weights(frame.height, OBS_SIZE);
    let cols = resample_weights(frame.width, OBS_SIZE);
    let mut out = vec![S::zero(); OBS_SIZE * OBS_SIZE];
    for (oy, row_w) in rows.iter().enumerate() {
        for (ox, col_w) in cols.iter().enumerate() {
            let mut acc = 0.0f64;
            for &(sy, wy) in row_w {
                for &(sx, wx) in col_w {
                    acc += wy * wx * gray[sy * frame.width + sx];
                }
            }
            out[oy * OBS_SIZE + ox] = S::from_f64(acc / 255.0);
        }
    }
    Ok(out)
}
