use crate::data_io::RasterImage;
use crate::error::{Error, Result};

/// Square RGB image as `f64` samples in `[0, 1]`, row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    side: usize,
    data: Vec<f64>,
}

impl ToyImage {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != side * side * 3 {
            return Err(Error::Shape(format!(
                "{} samples for a {side}x{side} RGB image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pixel".into()));
        }
        Ok(ToyImage { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Area-average resize of a square raster to `side × side`. Each output
    /// pixel averages the exact (fractional) source footprint it covers.
    pub fn from_raster(img: &RasterImage, side: usize) -> Result<Self> {
        if img.width() != img.height() {
            return Err(Error::Shape(format!(
                "tile is {}x{}, expected square",
                img.width(),
                img.height()
            )));
        }
        if side == 0 || img.width() == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        let n = img.width();
        let weights = area_weights(n, side);
        let src = img.data();
        let mut data = vec![0.0; side * side * 3];
        let mut rows = vec![0.0; side * n * 3];
        // separable: resample columns within each source row, then rows
        for y in 0..n {
            for (ox, w) in weights.iter().enumerate() {
                for &(sx, wt) in w {
                    for c in 0..3 {
                        rows[(ox * n + y) * 3 + c] += wt * src[(y * n + sx) * 3 + c] as f64;
                    }
                }
            }
        }
        for (oy, w) in weights.iter().enumerate() {
            for ox in 0..side {
                for &(sy, wt) in w {
                    for c in 0..3 {
                        data[(oy * side + ox) * 3 + c] += wt * rows[(ox * n + sy) * 3 + c];
                    }
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= 255.0);
        Ok(ToyImage { side, data })
    }
}

/// For each output index, the source indices and their normalized overlap.
fn area_weights(n: usize, side: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / side as f64;
    (0..side)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < n {
                let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((s, overlap / scale));
                }
                s += 1;
            }
            w
        })
        .collect()
}
