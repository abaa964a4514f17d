use serde::{Deserialize, Serialize};

use crate::data_io::{GrayImage, RasterImage};
use crate::error::{Error, Result};

/// 8-bit RGB → HSV in the OpenCV convention: `V = max`, `S = 255·(V − min)/V`
/// (0 when `V = 0`), `H` in degrees halved to `[0, 180)`; all rounded half up.
pub fn rgb_to_hsv(rgb: [u8; 3]) -> [u8; 3] {
    let [r, g, b] = rgb.map(|c| c as f64);
    let v = r.max(g).max(b);
    let min = r.min(g).min(b);
    let diff = v - min;
    let s = if v == 0.0 { 0.0 } else { 255.0 * diff / v };
    let mut h = if diff == 0.0 {
        0.0
    } else if v == r {
        60.0 * (g - b) / diff
    } else if v == g {
        120.0 + 60.0 * (b - r) / diff
    } else {
        240.0 + 60.0 * (r - g) / diff
    };
    if h < 0.0 {
        h += 360.0;
    }
    let h = ((h / 2.0 + 0.5).floor() as u32 % 180) as u8;
    [h, (s + 0.5).floor() as u8, v as u8]
}

/// Block-average downsample; the output is `ceil(w/f) × ceil(h/f)` and
/// edge blocks average only the pixels they contain.
pub fn downsample(img: &RasterImage, factor: usize) -> Result<RasterImage> {
    if factor == 0 {
        return Err(Error::InvalidArgument(
            "downsample factor must be positive".into(),
        ));
    }
    let (w, h) = (img.width().div_ceil(factor), img.height().div_ceil(factor));
    let mut sums = vec![0u64; w * h * 3];
    let mut counts = vec![0u64; w * h];
    let src = img.data();
    for y in 0..img.height() {
        let row = (y / factor) * w;
        for x in 0..img.width() {
            let cell = row + x / factor;
            counts[cell] += 1;
            for c in 0..3 {
                sums[cell * 3 + c] += src[(y * img.width() + x) * 3 + c] as u64;
            }
        }
    }
    let data = sums
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let n = counts[i / 3];
            ((2 * s + n) / (2 * n)) as u8
        })
        .collect();
    RasterImage::from_raw(w, h, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueParams {
    /// Pixels with saturation strictly above this are tissue candidates.
    pub sat_threshold: u8,
    pub median_kernel: usize,
    pub close_kernel: usize,
    /// Components smaller than this many low-resolution pixels are dropped.
    pub min_area: usize,
    pub downsample: usize,
}

impl Default for TissueParams {
    fn default() -> Self {
        TissueParams {
            sat_threshold: 20,
            median_kernel: 7,
            close_kernel: 7,
            min_area: 64,
            downsample: 8,
        }
    }
}

impl TissueParams {
    pub fn validate(&self) -> Result<()> {
        for (name, k) in [
            ("median", self.median_kernel),
            ("closing", self.close_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} kernel must be odd, got {k}"
                )));
            }
        }
        if self.downsample == 0 {
            return Err(Error::InvalidArgument(
                "downsample factor must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Binary tissue grid at `downsample`× below slide resolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TissueMask {
    pub width: usize,
    pub height: usize,
    pub downsample: usize,
    pub slide_width: usize,
    pub slide_height: usize,
    data: Vec<bool>,
}

impl TissueMask {
    pub fn empty(slide_width: usize, slide_height: usize, downsample: usize) -> Result<Self> {
        TissueMask::from_fn(slide_width, slide_height, downsample, |_, _| false)
    }

    /// Mask whose cell `(x, y)` is `f(x, y)`.
    pub fn from_fn(
        slide_width: usize,
        slide_height: usize,
        downsample: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        if downsample == 0 {
            return Err(Error::InvalidArgument(
                "downsample factor must be positive".into(),
            ));
        }
        let (width, height) = (
            slide_width.div_ceil(downsample),
            slide_height.div_ceil(downsample),
        );
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Ok(TissueMask {
            width,
            height,
            downsample,
            slide_width,
            slide_height,
            data,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Tissue status of slide pixel `(px, py)`; outside the slide is never tissue.
    pub fn at_pixel(&self, px: i64, py: i64) -> bool {
        if px < 0 || py < 0 || px as usize >= self.slide_width || py as usize >= self.slide_height {
            return false;
        }
        self.get(px as usize / self.downsample, py as usize / self.downsample)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Tissue bounding box in slide pixels as `(x0, y0, x1, y1)`, exclusive
    /// ends, clipped to the slide.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        let d = self.downsample;
        b.map(|(x0, y0, x1, y1)| {
            (
                x0 * d,
                y0 * d,
                ((x1 + 1) * d).min(self.slide_width),
                ((y1 + 1) * d).min(self.slide_height),
            )
        })
    }

    /// Number of tissue slide pixels inside the square at `(x, y)`.
    pub fn tissue_pixels_in(&self, x: i64, y: i64, side: usize) -> usize {
        let d = self.downsample as i64;
        let (x1, y1) = (x + side as i64, y + side as i64);
        let (cx0, cy0) = (x.max(0) / d, y.max(0) / d);
        let cx1 = (x1.min(self.slide_width as i64) + d - 1) / d;
        let cy1 = (y1.min(self.slide_height as i64) + d - 1) / d;
        let mut total = 0i64;
        for cy in cy0..cy1.max(cy0) {
            for cx in cx0..cx1.max(cx0) {
                if !self.get(cx as usize, cy as usize) {
                    continue;
                }
                let ox = (x1.min((cx + 1) * d).min(self.slide_width as i64) - x.max(cx * d)).max(0);
                let oy =
                    (y1.min((cy + 1) * d).min(self.slide_height as i64) - y.max(cy * d)).max(0);
                total += ox * oy;
            }
        }
        total as usize
    }

    /// 255 for tissue, 0 otherwise.
    pub fn to_gray(&self) -> GrayImage {
        let data = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        GrayImage::new(self.width, self.height, data).expect("dims match")
    }

    /// Tissue drawn as `color` on white, at mask resolution.
    pub fn render(&self, color: [u8; 3]) -> RasterImage {
        let mut img = RasterImage::filled(self.width, self.height, [255, 255, 255]);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    img.set_pixel(x, y, color);
                }
            }
        }
        img
    }
}

/// Tissue detection on a low-resolution raster: saturation threshold,
/// median filter, morphological closing and an area filter on
/// 8-connected components. `low_res` must be `ceil(slide / downsample)`.
pub fn segment_tissue(
    low_res: &RasterImage,
    slide_width: usize,
    slide_height: usize,
    params: &TissueParams,
) -> Result<TissueMask> {
    params.validate()?;
    let d = params.downsample;
    let (w, h) = (low_res.width(), low_res.height());
    if w != slide_width.div_ceil(d) || h != slide_height.div_ceil(d) {
        return Err(Error::Shape(format!(
            "low-resolution raster is {w}x{h}, expected ceil({slide_width}x{slide_height} / {d})"
        )));
    }
    let mut grid: Vec<bool> = (0..w * h)
        .map(|i| rgb_to_hsv(low_res.pixel(i % w, i / w))[1] > params.sat_threshold)
        .collect();
    grid = median_binary(&grid, w, h, params.median_kernel);
    grid = erode(
        &dilate(&grid, w, h, params.close_kernel),
        w,
        h,
        params.close_kernel,
    );
    remove_small_components(&mut grid, w, h, params.min_area);
    let mut it = grid.into_iter();
    TissueMask::from_fn(slide_width, slide_height, d, |_, _| it.next().unwrap())
}

/// Downsamples `slide` and runs [`segment_tissue`].
pub fn segment_slide(slide: &RasterImage, params: &TissueParams) -> Result<TissueMask> {
    params.validate()?;
    let low = downsample(slide, params.downsample)?;
    segment_tissue(&low, slide.width(), slide.height(), params)
}

/// Median of a binary image with replicated borders: a pixel is set when
/// more than half of its `k × k` window is set.
fn median_binary(src: &[bool], w: usize, h: usize, k: usize) -> Vec<bool> {
    if k <= 1 {
        return src.to_vec();
    }
    let r = (k / 2) as i64;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut rows = vec![0u32; w * h];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (-r..=r)
                .map(|dx| src[y * w + clamp(x as i64 + dx, w)] as u32)
                .sum();
        }
    }
    let half = (k * k / 2) as u32;
    (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            (-r..=r)
                .map(|dy| rows[clamp(y as i64 + dy, h) * w + x])
                .sum::<u32>()
                > half
        })
        .collect()
}

/// Separable square max (`set = true`) or min filter; pixels outside the
/// image never affect the result.
fn square_filter(src: &[bool], w: usize, h: usize, k: usize, dilation: bool) -> Vec<bool> {
    let r = (k / 2) as i64;
    let pass = |src: &[bool], horizontal: bool| -> Vec<bool> {
        (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as i64, (i / w) as i64);
                let mut hits = (-r..=r).filter_map(|t| {
                    let (xx, yy) = if horizontal { (x + t, y) } else { (x, y + t) };
                    (xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h)
                        .then(|| src[yy as usize * w + xx as usize])
                });
                if dilation {
                    hits.any(|b| b)
                } else {
                    hits.all(|b| b)
                }
            })
            .collect()
    };
    pass(&pass(src, true), false)
}

fn dilate(src: &[bool], w: usize, h: usize, k: usize) -> Vec<bool> {
    square_filter(src, w, h, k, true)
}

fn erode(src: &[bool], w: usize, h: usize, k: usize) -> Vec<bool> {
    square_filter(src, w, h, k, false)
}

/// Connected components (8-connectivity) in raster-scan discovery order.
pub fn connected_components(grid: &[bool], w: usize, h: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; grid.len()];
    let mut comps = Vec::new();
    for start in 0..grid.len() {
        if !grid[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if grid[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

fn remove_small_components(grid: &mut [bool], w: usize, h: usize, min_area: usize) {
    for comp in connected_components(grid, w, h) {
        if comp.len() < min_area {
            for i in comp {
                grid[i] = false;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(side: usize, cx: f64, cy: f64, r: f64, color: [u8; 3]) -> RasterImage {
        let mut img = RasterImage::filled(side, side, [255, 255, 255]);
        for y in 0..side {
            for x in 0..side {
                if (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2) <= r * r {
                    img.set_pixel(x, y, color);
                }
            }
        }
        img
    }

    #[test]
    fn hsv_reference_values() {
        assert_eq!(rgb_to_hsv([255, 255, 255]), [0, 0, 255]);
        assert_eq!(rgb_to_hsv([0, 0, 0]), [0, 0, 0]);
        assert_eq!(rgb_to_hsv([255, 0, 0]), [0, 255, 255]);
        assert_eq!(rgb_to_hsv([0, 255, 0]), [60, 255, 255]);
        assert_eq!(rgb_to_hsv([0, 0, 255]), [120, 255, 255]);
        // 255·(200 − 100)/200 = 127.5 → 128
        assert_eq!(rgb_to_hsv([200, 100, 150])[1], 128);
    }

    #[test]
    fn downsample_averages_partial_blocks() {
        let mut img = RasterImage::filled(3, 1, [0, 0, 0]);
        img.set_pixel(2, 0, [9, 9, 9]);
        let d = downsample(&img, 2).unwrap();
        assert_eq!((d.width(), d.height()), (2, 1));
        assert_eq!(d.pixel(0, 0), [0, 0, 0]);
        assert_eq!(d.pixel(1, 0), [9, 9, 9]);
    }

    #[test]
    fn white_slide_is_empty() {
        let img = RasterImage::filled(100, 60, [255, 255, 255]);
        let m = segment_slide(&img, &TissueParams::default()).unwrap();
        assert_eq!((m.width, m.height), (13, 8));
        assert!(m.is_empty());
        assert_eq!(m.bbox(), None);
    }

    #[test]
    fn disk_iou() {
        let (side, r) = (512, 150.0);
        let img = disk(side, 256.0, 256.0, r, [220, 120, 170]);
        let m = segment_slide(&img, &TissueParams::default()).unwrap();
        let (mut inter, mut union) = (0usize, 0usize);
        for y in 0..side {
            for x in 0..side {
                let truth = img.pixel(x, y) != [255, 255, 255];
                let pred = m.at_pixel(x as i64, y as i64);
                inter += (truth && pred) as usize;
                union += (truth || pred) as usize;
            }
        }
        assert!(inter as f64 / union as f64 >= 0.95);
    }

    #[test]
    fn small_disk_removed() {
        // ~28 low-resolution pixels, below the default area of 64
        let img = disk(256, 128.0, 128.0, 24.0, [220, 120, 170]);
        assert!(segment_slide(&img, &TissueParams::default())
            .unwrap()
            .is_empty());
        let keep = TissueParams {
            min_area: 10,
            ..TissueParams::default()
        };
        assert!(!segment_slide(&img, &keep).unwrap().is_empty());
    }

    #[test]
    fn idempotent_on_rendered_output() {
        let img = disk(640, 300.0, 340.0, 200.0, [200, 110, 160]);
        let p = TissueParams::default();
        let m = segment_slide(&img, &p).unwrap();
        let low = m.render([200, 110, 160]);
        let again = segment_tissue(&low, 640, 640, &p).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn bad_kernels_and_dims() {
        let img = RasterImage::filled(16, 16, [255, 255, 255]);
        let even = TissueParams {
            median_kernel: 4,
            ..TissueParams::default()
        };
        assert!(segment_slide(&img, &even).is_err());
        assert!(segment_tissue(&img, 16, 16, &TissueParams::default()).is_err());
    }

    #[test]
    fn tissue_area_counting() {
        let m = TissueMask::from_fn(20, 20, 4, |x, _| x < 2).unwrap();
        assert_eq!(m.tissue_pixels_in(0, 0, 8), 64);
        assert_eq!(m.tissue_pixels_in(4, 0, 8), 32);
        assert_eq!(m.tissue_pixels_in(-4, -4, 8), 16);
        assert_eq!(m.bbox(), Some((0, 0, 8, 20)));
    }

    #[test]
    fn components_eight_connected() {
        let g = [true, false, false, true, false, false, false, false, true];
        let c = connected_components(&g, 3, 3);
        assert_eq!(c, vec![vec![0, 3], vec![8]]);
        let diag = [true, false, false, true];
        assert_eq!(connected_components(&diag, 2, 2).len(), 1);
    }
}
