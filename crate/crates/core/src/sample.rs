//! Bilinear sampling with border clamping.
//!
//! Texel `(row i, col j)` has its center at `(x = j, y = i)`. Points outside
//! the map are clamped onto the border before interpolation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Four taps and weights for one sample point on an `h x w` plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearTaps {
    pub idx: [usize; 4],
    pub weight: [f64; 4],
}

impl BilinearTaps {
    #[inline]
    pub fn new(x: f64, y: f64, h: usize, w: usize) -> Self {
        let xc = x.clamp(0.0, (w - 1) as f64);
        let yc = y.clamp(0.0, (h - 1) as f64);
        let x0 = (xc.floor() as usize).min(w - 1);
        let y0 = (yc.floor() as usize).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        BilinearTaps {
            idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            weight: [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
        }
    }

    #[inline]
    pub fn apply(&self, plane: &[f64]) -> f64 {
        self.weight[0] * plane[self.idx[0]]
            + self.weight[1] * plane[self.idx[1]]
            + self.weight[2] * plane[self.idx[2]]
            + self.weight[3] * plane[self.idx[3]]
    }
}

fn plane_dims(map: &Tensor) -> Result<(usize, usize, usize)> {
    if map.ndim() != 3 {
        return Err(Error::Shape(format!(
            "sampling needs a (c, h, w) map, got {:?}",
            map.shape()
        )));
    }
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::EmptyTensor);
    }
    Ok((c, h, w))
}

/// Samples every channel of `map` at one point, writing `c` values to `out`.
pub fn sample_point(map: &Tensor, x: f64, y: f64, out: &mut [f64]) -> Result<()> {
    let (c, h, w) = plane_dims(map)?;
    if out.len() != c {
        return Err(Error::Shape(format!(
            "output buffer holds {} values, map has {c} channels",
            out.len()
        )));
    }
    let taps = BilinearTaps::new(x, y, h, w);
    let plane = h * w;
    for (ch, o) in out.iter_mut().enumerate() {
        *o = taps.apply(&map.data()[ch * plane..(ch + 1) * plane]);
    }
    Ok(())
}

pub fn bilinear_sample(map: &Tensor, points: &[(f64, f64)]) -> Result<Vec<Vec<f64>>> {
    let (c, _, _) = plane_dims(map)?;
    points
        .iter()
        .map(|&(x, y)| {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite sample point ({x}, {y})"
                )));
            }
            let mut out = vec![0.0; c];
            sample_point(map, x, y, &mut out)?;
            Ok(out)
        })
        .collect()
}
