//! Zero-shot coarse segmentation: overlapping tiles are scored against class
//! prompts, scores are averaged where tiles overlap, and each tissue pixel
//! takes the class with the highest mean score.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{GrayImage, RasterImage, TileCoord};
use crate::error::{Error, Result};
use crate::prompting::ClassEmbeddingBank;
use crate::wsi::{embed_tiles, ImageEncoder, TissueMask};
use crate::zeroshot::{argmax, class_scores};

/// Mask value for non-tissue pixels.
pub const IGNORE: u8 = 255;

/// Fixed colors for class indices 0..8 in exported masks; later classes cycle.
pub const CLASS_COLORS: [[u8; 3]; 8] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [188, 189, 34],
];

/// Overlapping grid over the tissue bounding box with stride
/// `round(side·(1 − overlap))`, anchored at the box origin. A last tile is
/// clamped to the box end when the stride does not land on it; a box narrower
/// than a tile gets one tile centered on it (kept inside the slide when the
/// slide is large enough). Tiles without tissue are dropped.
pub fn overlap_tile_grid(mask: &TissueMask, side: usize, overlap: f64) -> Result<Vec<TileCoord>> {
    if side == 0 {
        return Err(Error::InvalidArgument("tile side must be positive".into()));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!(
            "overlap {overlap} outside [0, 1)"
        )));
    }
    let stride = ((side as f64 * (1.0 - overlap)).round() as usize).max(1);
    let Some((x0, y0, x1, y1)) = mask.bbox() else {
        return Ok(Vec::new());
    };
    let xs = axis_starts(x0, x1, mask.slide_width, side, stride);
    let ys = axis_starts(y0, y1, mask.slide_height, side, stride);
    let mut tiles = Vec::new();
    for &y in &ys {
        for &x in &xs {
            if mask.tissue_pixels_in(x, y, side) > 0 {
                tiles.push(TileCoord::new(x, y, side as u32));
            }
        }
    }
    Ok(tiles)
}

fn axis_starts(lo: usize, hi: usize, extent: usize, side: usize, stride: usize) -> Vec<i64> {
    let len = hi - lo;
    if len <= side {
        let centered = lo as i64 - (side as i64 - len as i64) / 2;
        let start = if extent >= side {
            centered.clamp(0, (extent - side) as i64)
        } else {
            -((side - extent) as i64 / 2)
        };
        return vec![start];
    }
    let n = (len - side) / stride + 1;
    let mut starts: Vec<i64> = (0..n).map(|i| (lo + i * stride) as i64).collect();
    let last = (hi - side) as i64;
    if *starts.last().unwrap() < last {
        starts.push(last);
    }
    starts
}

/// Per-class score sums and coverage counts on a grid `downsample`× below
/// slide resolution. A tile covers every cell its footprint touches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreAccumulator {
    pub width: usize,
    pub height: usize,
    pub n_classes: usize,
    pub downsample: usize,
    pub slide_width: usize,
    pub slide_height: usize,
    /// `height × width × n_classes`, row-major.
    sums: Vec<f64>,
    coverage: Vec<u32>,
}

impl ScoreAccumulator {
    pub fn new(
        slide_width: usize,
        slide_height: usize,
        n_classes: usize,
        downsample: usize,
    ) -> Result<Self> {
        if n_classes == 0 || downsample == 0 {
            return Err(Error::InvalidArgument(
                "need at least one class and a positive downsample".into(),
            ));
        }
        let (width, height) = (
            slide_width.div_ceil(downsample),
            slide_height.div_ceil(downsample),
        );
        Ok(ScoreAccumulator {
            width,
            height,
            n_classes,
            downsample,
            slide_width,
            slide_height,
            sums: vec![0.0; width * height * n_classes],
            coverage: vec![0; width * height],
        })
    }

    /// Grid cells covered by a tile, clipped to the grid: `(x0, y0, x1, y1)`.
    fn footprint(&self, tile: &TileCoord) -> Result<(usize, usize, usize, usize)> {
        if !tile.intersects(self.slide_width as u64, self.slide_height as u64) {
            return Err(Error::InvalidArgument(format!(
                "tile at ({}, {}) is outside the slide",
                tile.x, tile.y
            )));
        }
        let d = self.downsample as i64;
        let (x1, y1) = (tile.x + tile.side as i64, tile.y + tile.side as i64);
        Ok((
            (tile.x.max(0) / d) as usize,
            (tile.y.max(0) / d) as usize,
            ((x1.min(self.slide_width as i64) + d - 1) / d) as usize,
            ((y1.min(self.slide_height as i64) + d - 1) / d) as usize,
        ))
    }

    pub fn accumulate(&mut self, tile: &TileCoord, scores: &[f64]) -> Result<()> {
        if scores.len() != self.n_classes {
            return Err(Error::Shape(format!(
                "{} scores for {} classes",
                scores.len(),
                self.n_classes
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("non-finite tile score".into()));
        }
        let (x0, y0, x1, y1) = self.footprint(tile)?;
        let c = self.n_classes;
        for y in y0..y1 {
            for x in x0..x1 {
                let cell = y * self.width + x;
                self.coverage[cell] += 1;
                for (s, v) in self.sums[cell * c..(cell + 1) * c].iter_mut().zip(scores) {
                    *s += v;
                }
            }
        }
        Ok(())
    }

    /// Adds another accumulator over the same grid.
    pub fn merge(&mut self, other: &ScoreAccumulator) -> Result<()> {
        if (self.width, self.height, self.n_classes, self.downsample)
            != (other.width, other.height, other.n_classes, other.downsample)
        {
            return Err(Error::Shape("accumulators cover different grids".into()));
        }
        self.sums
            .iter_mut()
            .zip(&other.sums)
            .for_each(|(a, b)| *a += b);
        self.coverage
            .iter_mut()
            .zip(&other.coverage)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn coverage(&self, x: usize, y: usize) -> u32 {
        self.coverage[y * self.width + x]
    }

    /// Mean class scores at cell `(x, y)`, or `None` when uncovered.
    pub fn mean(&self, x: usize, y: usize) -> Option<Vec<f64>> {
        let cell = y * self.width + x;
        let n = self.coverage[cell];
        (n > 0).then(|| {
            self.sums[cell * self.n_classes..(cell + 1) * self.n_classes]
                .iter()
                .map(|s| s / n as f64)
                .collect()
        })
    }
}

/// Per-pixel class indices; [`IGNORE`] marks non-tissue.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationMask {
    pub width: usize,
    pub height: usize,
    pub n_classes: usize,
    pub data: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(width: usize, height: usize, n_classes: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} labels for a {width}x{height} mask",
                data.len()
            )));
        }
        if n_classes == 0 || n_classes >= IGNORE as usize {
            return Err(Error::InvalidArgument(format!(
                "{n_classes} classes cannot be encoded"
            )));
        }
        if let Some(v) = data
            .iter()
            .find(|&&v| v != IGNORE && v as usize >= n_classes)
        {
            return Err(Error::InvalidArgument(format!(
                "label {v} >= {n_classes} classes"
            )));
        }
        Ok(SegmentationMask {
            width,
            height,
            n_classes,
            data,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Raw class indices, with [`IGNORE`] as 255.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::new(self.width, self.height, self.data.clone()).expect("dims match")
    }

    /// Classes drawn with [`CLASS_COLORS`]; ignored pixels are white.
    pub fn to_color(&self) -> RasterImage {
        let mut img = RasterImage::filled(self.width, self.height, [255, 255, 255]);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.get(x, y);
                if v != IGNORE {
                    img.set_pixel(x, y, CLASS_COLORS[v as usize % CLASS_COLORS.len()]);
                }
            }
        }
        img
    }
}

/// Argmax of the averaged scores (lowest index on ties) at each tissue cell.
/// A cell is tissue when the slide pixel at its center is tissue.
pub fn finalize_mask(acc: &ScoreAccumulator, tissue: &TissueMask) -> Result<SegmentationMask> {
    if (tissue.slide_width, tissue.slide_height) != (acc.slide_width, acc.slide_height) {
        return Err(Error::Shape(
            "tissue mask and accumulator describe different slides".into(),
        ));
    }
    let d = acc.downsample;
    let mut data = Vec::with_capacity(acc.width * acc.height);
    for y in 0..acc.height {
        for x in 0..acc.width {
            let cx = ((x * d + (x * d + d).min(acc.slide_width)) / 2) as i64;
            let cy = ((y * d + (y * d + d).min(acc.slide_height)) / 2) as i64;
            if !tissue.at_pixel(cx, cy) {
                data.push(IGNORE);
                continue;
            }
            let mean = acc.mean(x, y).ok_or_else(|| {
                Error::Consistency(format!("tissue cell ({x}, {y}) is not covered by any tile"))
            })?;
            data.push(argmax(&mean) as u8);
        }
    }
    SegmentationMask::new(acc.width, acc.height, acc.n_classes, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Dice, precision and recall of `positive` over all pixels. When neither
/// mask contains the positive class all three are 1.
pub fn dice_precision_recall(
    pred: &SegmentationMask,
    truth: &SegmentationMask,
    positive: u8,
) -> Result<DiceScores> {
    if (pred.width, pred.height) != (truth.width, truth.height) {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, truth is {}x{}",
            pred.width, pred.height, truth.width, truth.height
        )));
    }
    let (mut tp, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        let (p, t) = (p == positive, t == positive);
        tp += (p && t) as usize;
        np += p as usize;
        nt += t as usize;
    }
    if np + nt == 0 {
        return Ok(DiceScores {
            dice: 1.0,
            precision: 1.0,
            recall: 1.0,
        });
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(DiceScores {
        dice: 2.0 * tp as f64 / (np + nt) as f64,
        precision: ratio(tp, np),
        recall: ratio(tp, nt),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub tile_side: usize,
    pub overlap: f64,
    pub downsample: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            tile_side: 224,
            overlap: 0.75,
            downsample: 1,
        }
    }
}

/// Tiles, embeds and scores a slide, then stitches the zero-shot mask.
pub fn segment_slide_zero_shot(
    slide: &RasterImage,
    tissue: &TissueMask,
    bank: &ClassEmbeddingBank,
    encoder: &dyn ImageEncoder,
    config: &SegmentConfig,
) -> Result<SegmentationMask> {
    let grid = overlap_tile_grid(tissue, config.tile_side, config.overlap)?;
    let embeddings = embed_tiles(slide, &grid, encoder)?;
    let scores: Vec<Vec<f64>> = embeddings
        .par_iter()
        .map(|e| class_scores(e.as_slice(), bank))
        .collect::<Result<_>>()?;
    let mut acc = ScoreAccumulator::new(
        slide.width(),
        slide.height(),
        bank.n_classes(),
        config.downsample,
    )?;
    for (tile, s) in grid.iter().zip(&scores) {
        acc.accumulate(tile, s)?;
    }
    finalize_mask(&acc, tissue)
}
