//! Procedural tissue textures, ROI image-caption pairs and synthetic slides
//! with pixel-level ground truth.
//!
//! Textures are defined on a lattice of "units": every unit cell renders as
//! one flat color, drawn as a `px_per_unit`-pixel block. Tiles whose side
//! spans 32 units therefore area-resize to the toy encoder's 32-pixel input
//! without blurring when they are unit-aligned.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tissue::downsample;
use crate::data_io::{built_in_prompt_set, fill_template, PromptSet, RasterImage};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TissueClass {
    Adi,
    Deb,
    Lym,
    Muc,
    Mus,
    Norm,
    Str,
    Tum,
}

impl TissueClass {
    pub const ALL: [TissueClass; 8] = [
        TissueClass::Adi,
        TissueClass::Deb,
        TissueClass::Lym,
        TissueClass::Muc,
        TissueClass::Mus,
        TissueClass::Norm,
        TissueClass::Str,
        TissueClass::Tum,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TissueClass::Adi => "ADI",
            TissueClass::Deb => "DEB",
            TissueClass::Lym => "LYM",
            TissueClass::Muc => "MUC",
            TissueClass::Mus => "MUS",
            TissueClass::Norm => "NORM",
            TissueClass::Str => "STR",
            TissueClass::Tum => "TUM",
        }
    }

    pub fn from_label(label: &str) -> Result<Self> {
        TissueClass::ALL
            .into_iter()
            .find(|c| c.label() == label)
            .ok_or_else(|| Error::Lookup(format!("unknown tissue class {label:?}")))
    }

    /// Stroma-like color and structure color, before intensity.
    fn palette(self) -> ([f64; 3], [f64; 3]) {
        match self {
            TissueClass::Adi => ([250.0, 235.0, 160.0], [230.0, 200.0, 90.0]),
            TissueClass::Deb => ([230.0, 160.0, 110.0], [150.0, 80.0, 40.0]),
            TissueClass::Lym => ([160.0, 170.0, 235.0], [40.0, 50.0, 160.0]),
            TissueClass::Muc => ([165.0, 215.0, 235.0], [90.0, 165.0, 205.0]),
            TissueClass::Mus => ([235.0, 110.0, 110.0], [160.0, 30.0, 30.0]),
            TissueClass::Norm => ([150.0, 215.0, 190.0], [40.0, 140.0, 110.0]),
            TissueClass::Str => ([245.0, 175.0, 215.0], [215.0, 100.0, 170.0]),
            TissueClass::Tum => ([180.0, 110.0, 210.0], [95.0, 30.0, 130.0]),
        }
    }

    /// Weight of the structure color at texture coordinates `(x, y)`.
    fn pattern(self, x: f64, y: f64, seed: u64) -> f64 {
        let (xi, yi) = (x.floor() as i64, y.floor() as i64);
        match self {
            TissueClass::Adi => {
                let jitter = (hash(seed, xi.div_euclid(5), yi.div_euclid(5), 1) * 2.0) as i64;
                f64::from((xi + jitter).rem_euclid(5) == 0 || (yi + jitter).rem_euclid(5) == 0)
            }
            TissueClass::Deb => {
                if hash(seed, xi, yi, 2) < 0.2 {
                    1.0
                } else {
                    0.3 * hash(seed, xi, yi, 3)
                }
            }
            TissueClass::Lym => f64::from(hash(seed, xi, yi, 4) < 0.55),
            TissueClass::Muc => 0.5 + 0.5 * (0.9 * y + 2.0 * value_noise(seed, x, y, 8.0)).sin(),
            TissueClass::Mus => 0.5 + 0.5 * (1.3 * x + value_noise(seed, x, y, 6.0)).sin(),
            TissueClass::Norm => {
                let (gx, gy) = (x.div_euclid(8.0), y.div_euclid(8.0));
                let (dx, dy) = (x - gx * 8.0 - 4.0, y - gy * 8.0 - 4.0);
                let r = (dx * dx + dy * dy).sqrt();
                f64::from((1.8..3.2).contains(&r))
            }
            TissueClass::Str => 0.5 + 0.5 * (0.8 * (x + y)).sin(),
            TissueClass::Tum => {
                if value_noise(seed, x, y, 6.0) > 0.45 {
                    1.0
                } else {
                    0.2
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    Pale,
    Moderate,
    Dark,
}

impl Intensity {
    pub const ALL: [Intensity; 3] = [Intensity::Pale, Intensity::Moderate, Intensity::Dark];

    pub fn word(self) -> &'static str {
        match self {
            Intensity::Pale => "pale",
            Intensity::Moderate => "moderate",
            Intensity::Dark => "dark",
        }
    }

    fn apply(self, c: f64) -> f64 {
        match self {
            Intensity::Pale => 255.0 - (255.0 - c) * 0.65,
            Intensity::Moderate => c,
            Intensity::Dark => c * 0.75,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Fine,
    Coarse,
}

impl Scale {
    pub const ALL: [Scale; 2] = [Scale::Fine, Scale::Coarse];

    pub fn word(self) -> &'static str {
        match self {
            Scale::Fine => "fine",
            Scale::Coarse => "coarse",
        }
    }

    fn factor(self) -> f64 {
        match self {
            Scale::Fine => 1.0,
            Scale::Coarse => 2.0,
        }
    }
}

/// How a patch of one class looks: stain intensity, texture scale and a
/// small per-channel color shift.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub intensity: Intensity,
    pub scale: Scale,
    pub shift: [f64; 3],
}

impl Appearance {
    pub fn plain() -> Self {
        Appearance {
            intensity: Intensity::Moderate,
            scale: Scale::Fine,
            shift: [0.0; 3],
        }
    }

    pub fn random(rng: &mut SeededRng) -> Self {
        Appearance {
            intensity: Intensity::ALL[rng.below(3)],
            scale: Scale::ALL[rng.below(2)],
            shift: [0; 3].map(|_| rng.uniform(-8.0, 8.0)),
        }
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform `[0, 1)` value keyed by `(seed, i, j, salt)`.
fn hash(seed: u64, i: i64, j: i64, salt: u64) -> f64 {
    let h = mix64(
        seed ^ mix64(
            (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
                ^ mix64((j as u64) ^ salt.rotate_left(48)),
        ),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinear value noise with lattice spacing `period`.
fn value_noise(seed: u64, x: f64, y: f64, period: f64) -> f64 {
    let (u, v) = (x / period, y / period);
    let (i, j) = (u.floor(), v.floor());
    let (fu, fv) = (u - i, v - j);
    let (su, sv) = (fu * fu * (3.0 - 2.0 * fu), fv * fv * (3.0 - 2.0 * fv));
    let (i, j) = (i as i64, j as i64);
    let c = |a, b| hash(seed, i + a, j + b, 7);
    let top = c(0, 0) * (1.0 - su) + c(1, 0) * su;
    let bottom = c(0, 1) * (1.0 - su) + c(1, 1) * su;
    top * (1.0 - sv) + bottom * sv
}

/// Color of unit cell `(i, j)` of `class` under `appearance`.
pub fn cell_color(
    class: TissueClass,
    appearance: &Appearance,
    i: i64,
    j: i64,
    seed: u64,
) -> [u8; 3] {
    let f = appearance.scale.factor();
    let (x, y) = ((i as f64 + 0.5) / f, (j as f64 + 0.5) / f);
    let m = class.pattern(x, y, seed);
    let (a, b) = class.palette();
    let jitter = (hash(seed, i, j, 11) - 0.5) * 16.0;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let base = a[c] * (1.0 - m) + b[c] * m + jitter + appearance.shift[c];
        out[c] = appearance
            .intensity
            .apply(base.clamp(0.0, 255.0))
            .round()
            .clamp(0.0, 255.0) as u8;
    }
    out
}

/// Colors of the unit cells `i0..i0+w`, `j0..j0+h`, row-major.
fn cell_block(
    w: usize,
    h: usize,
    i0: i64,
    j0: i64,
    mut color: impl FnMut(i64, i64) -> [u8; 3],
) -> Vec<[u8; 3]> {
    let mut out = Vec::with_capacity(w * h);
    for j in 0..h as i64 {
        for i in 0..w as i64 {
            out.push(color(i0 + i, j0 + j));
        }
    }
    out
}

/// A `side_px` square ROI of one class. Pixel `(x, y)` shows the unit cell
/// containing `origin + (x, y)`, with `origin` in pixels at `px_per_unit`.
pub fn render_roi(
    class: TissueClass,
    appearance: &Appearance,
    side_px: usize,
    px_per_unit: usize,
    origin: (i64, i64),
    seed: u64,
) -> Result<RasterImage> {
    if px_per_unit == 0 || side_px == 0 {
        return Err(Error::InvalidArgument(
            "ROI side and px_per_unit must be positive".into(),
        ));
    }
    let p = px_per_unit as i64;
    let (i0, j0) = (origin.0.div_euclid(p), origin.1.div_euclid(p));
    let span = |o: i64| ((o + side_px as i64 - 1).div_euclid(p) - o.div_euclid(p) + 1) as usize;
    let (w, h) = (span(origin.0), span(origin.1));
    let cells = cell_block(w, h, i0, j0, |i, j| {
        cell_color(class, appearance, i, j, seed)
    });
    let mut img = RasterImage::new(side_px, side_px);
    for py in 0..side_px {
        let j = ((origin.1 + py as i64).div_euclid(p) - j0) as usize;
        for px in 0..side_px {
            let i = ((origin.0 + px as i64).div_euclid(p) - i0) as usize;
            img.set_pixel(px, py, cells[j * w + i]);
        }
    }
    Ok(img)
}

/// Slide background: near-white, unsaturated.
fn background_color(seed: u64, i: i64, j: i64) -> [u8; 3] {
    let v = 242 + (hash(seed, i, j, 13) * 14.0) as u8;
    [v, v, v]
}

/// Replaces the part of `img` on one side of a random line with slide
/// background, leaving a tissue fraction in `[0.4, 0.9]`.
fn cut_tissue_edge(img: &mut RasterImage, px_per_unit: usize, rng: &mut SeededRng) {
    let side = img.width() as f64;
    let angle = rng.uniform(0.0, std::f64::consts::TAU);
    let (nx, ny) = (angle.cos(), angle.sin());
    let keep = rng.uniform(0.4, 0.9);
    // offset of the line from the center, measured along the normal
    let half = 0.5 * side * (nx.abs() + ny.abs());
    let offset = half * (1.0 - 2.0 * keep);
    let seed = rng.next_u64();
    let c = side / 2.0;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let d = (x as f64 + 0.5 - c) * nx + (y as f64 + 0.5 - c) * ny;
            if d < offset {
                let p = px_per_unit as i64;
                img.set_pixel(x, y, background_color(seed, x as i64 / p, y as i64 / p));
            }
        }
    }
}

/// The crc100k prompt vocabulary, which names every synthetic class.
pub fn class_vocabulary() -> PromptSet {
    built_in_prompt_set("crc100k").expect("built-in prompt set")
}

/// One caption: a random template and class name, with the appearance words
/// in front of the name with probability `attribute_prob`.
pub fn caption_for(
    class: TissueClass,
    appearance: &Appearance,
    vocabulary: &PromptSet,
    attribute_prob: f64,
    rng: &mut SeededRng,
) -> Result<String> {
    let ci = vocabulary.class_index(class.label())?;
    let names = &vocabulary.classes[ci].names;
    let template = &vocabulary.templates[rng.below(vocabulary.templates.len())];
    let name = &names[rng.below(names.len())];
    let phrase = if rng.bernoulli(attribute_prob) {
        format!(
            "{} {} {}",
            appearance.intensity.word(),
            appearance.scale.word(),
            name
        )
    } else {
        name.clone()
    };
    Ok(fill_template(template, &phrase))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub classes: Vec<TissueClass>,
    pub n_per_class: usize,
    /// ROI side in texture units.
    pub side_units: usize,
    /// Render resolution.
    pub render_px_per_unit: usize,
    /// Stored resolution; rendered ROIs are block-averaged down to it.
    pub px_per_unit: usize,
    /// Shift each ROI by a random sub-unit pixel offset.
    pub phase_jitter: bool,
    /// Probability that part of the ROI is replaced by slide background.
    pub edge_prob: f64,
    pub attribute_prob: f64,
    pub seed: u64,
}

impl RoiSpec {
    pub fn new(classes: Vec<TissueClass>, n_per_class: usize, seed: u64) -> Self {
        RoiSpec {
            classes,
            n_per_class,
            side_units: 32,
            render_px_per_unit: 1,
            px_per_unit: 1,
            phase_jitter: false,
            edge_prob: 0.0,
            attribute_prob: 0.9,
            seed,
        }
    }

    /// Training pairs as seen through a tiler: rendered at 8 px/unit with
    /// random phase and tissue edges, stored at 1 px/unit.
    pub fn training(classes: Vec<TissueClass>, n_per_class: usize, seed: u64) -> Self {
        RoiSpec {
            render_px_per_unit: 8,
            phase_jitter: true,
            edge_prob: 0.25,
            ..RoiSpec::new(classes, n_per_class, seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidArgument("no classes to render".into()));
        }
        let (r, p) = (self.render_px_per_unit, self.px_per_unit);
        if self.side_units == 0 || p == 0 || r == 0 || r % p != 0 {
            return Err(Error::InvalidArgument(format!(
                "render resolution {r} must be a positive multiple of stored resolution {p}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiSample {
    pub class: TissueClass,
    pub appearance: Appearance,
    pub image: RasterImage,
    pub caption: String,
}

/// ROI pairs with classes interleaved (`i % n_classes`); sample `i` draws
/// from its own derived stream, so any prefix is reproducible on its own.
pub fn generate_rois(spec: &RoiSpec) -> Result<Vec<RoiSample>> {
    spec.validate()?;
    let vocabulary = class_vocabulary();
    let n = spec.classes.len() * spec.n_per_class;
    let r = spec.render_px_per_unit;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = SeededRng::derive(spec.seed, i as u64);
            let class = spec.classes[i % spec.classes.len()];
            let appearance = Appearance::random(&mut rng);
            let phase = if spec.phase_jitter {
                (rng.below(r) as i64, rng.below(r) as i64)
            } else {
                (0, 0)
            };
            let origin = (
                (rng.below(4096) * r) as i64 + phase.0,
                (rng.below(4096) * r) as i64 + phase.1,
            );
            let texture_seed = rng.next_u64();
            let mut image = render_roi(
                class,
                &appearance,
                spec.side_units * r,
                r,
                origin,
                texture_seed,
            )?;
            if rng.bernoulli(spec.edge_prob) {
                cut_tissue_edge(&mut image, r, &mut rng);
            }
            if r != spec.px_per_unit {
                image = downsample(&image, r / spec.px_per_unit)?;
            }
            let caption = caption_for(
                class,
                &appearance,
                &vocabulary,
                spec.attribute_prob,
                &mut rng,
            )?;
            Ok(RoiSample {
                class,
                appearance,
                image,
                caption,
            })
        })
        .collect()
}

/// Region outline in slide pixels: a star-shaped blob with radius
/// `r(θ) = 1 + Σ amp·cos(k·θ + phase)` scaled by `(rx, ry)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Blob {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        harmonics: Vec<(f64, f64)>,
    },
    Polygon {
        points: Vec<(f64, f64)>,
    },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Blob {
                cx,
                cy,
                rx,
                ry,
                harmonics,
            } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                let theta = dy.atan2(dx);
                let r = 1.0
                    + harmonics
                        .iter()
                        .enumerate()
                        .map(|(k, (amp, phase))| amp * ((k + 2) as f64 * theta + phase).cos())
                        .sum::<f64>();
                dx * dx + dy * dy <= r * r
            }
            Shape::Polygon { points } => {
                let mut inside = false;
                let n = points.len();
                for a in 0..n {
                    let (x1, y1) = points[a];
                    let (x2, y2) = points[(a + 1) % n];
                    if (y1 > y) != (y2 > y) && x < x1 + (y - y1) * (x2 - x1) / (y2 - y1) {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }

    /// Axis-aligned bounds `(x0, y0, x1, y1)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match self {
            Shape::Blob {
                cx,
                cy,
                rx,
                ry,
                harmonics,
            } => {
                let grow = 1.0 + harmonics.iter().map(|h| h.0.abs()).sum::<f64>();
                (
                    cx - rx * grow,
                    cy - ry * grow,
                    cx + rx * grow,
                    cy + ry * grow,
                )
            }
            Shape::Polygon { points } => points.iter().fold(
                (
                    f64::INFINITY,
                    f64::INFINITY,
                    f64::NEG_INFINITY,
                    f64::NEG_INFINITY,
                ),
                |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
            ),
        }
    }

    fn random_blob(cx: f64, cy: f64, r: f64, rng: &mut SeededRng) -> Shape {
        let aspect = rng.uniform(0.8, 1.25);
        Shape::Blob {
            cx,
            cy,
            rx: r * aspect.sqrt(),
            ry: r / aspect.sqrt(),
            harmonics: (0..3)
                .map(|_| {
                    (
                        rng.uniform(0.0, 0.08),
                        rng.uniform(0.0, std::f64::consts::TAU),
                    )
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub shape: Shape,
    pub class: TissueClass,
    pub appearance: Appearance,
}

/// A desk-scale slide: regions painted in order over a white background,
/// later regions on top.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSlideSpec {
    pub slide_id: String,
    pub width: usize,
    pub height: usize,
    pub px_per_unit: usize,
    pub magnification: f64,
    pub texture_seed: u64,
    /// Slide-level class, if the slide has one.
    pub label: Option<TissueClass>,
    pub regions: Vec<Region>,
}

impl SyntheticSlideSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.px_per_unit == 0 {
            return Err(Error::Config(format!(
                "slide {}: zero dimension",
                self.slide_id
            )));
        }
        for (k, r) in self.regions.iter().enumerate() {
            let (x0, y0, x1, y1) = r.shape.bounds();
            if !(x0 >= 0.0 && y0 >= 0.0 && x1 <= self.width as f64 && y1 <= self.height as f64) {
                return Err(Error::Config(format!(
                    "slide {}: region {k} leaves the slide",
                    self.slide_id
                )));
            }
        }
        Ok(())
    }

    fn units(&self) -> (usize, usize) {
        (
            self.width.div_ceil(self.px_per_unit),
            self.height.div_ceil(self.px_per_unit),
        )
    }

    /// Topmost region index at each unit cell center, row-major over cells.
    fn cell_regions(&self) -> Vec<Option<usize>> {
        let (uw, uh) = self.units();
        let p = self.px_per_unit as f64;
        let mut out = Vec::with_capacity(uw * uh);
        for j in 0..uh {
            for i in 0..uw {
                let (x, y) = ((i as f64 + 0.5) * p, (j as f64 + 0.5) * p);
                out.push(self.regions.iter().rposition(|r| r.shape.contains(x, y)));
            }
        }
        out
    }

    pub fn render(&self) -> Result<RasterImage> {
        self.validate()?;
        let (uw, uh) = self.units();
        let cells = self.cell_regions();
        let colors = cell_block(uw, uh, 0, 0, |i, j| {
            match cells[j as usize * uw + i as usize] {
                Some(k) => {
                    let r = &self.regions[k];
                    cell_color(
                        r.class,
                        &r.appearance,
                        i,
                        j,
                        self.texture_seed ^ mix64(k as u64 + 1),
                    )
                }
                None => background_color(self.texture_seed, i, j),
            }
        });
        let p = self.px_per_unit;
        let mut img = RasterImage::new(self.width, self.height);
        for py in 0..self.height {
            for px in 0..self.width {
                img.set_pixel(px, py, colors[(py / p) * uw + px / p]);
            }
        }
        Ok(img)
    }

    /// Ground-truth class per slide pixel, row-major; `None` is background.
    pub fn class_map(&self) -> Result<Vec<Option<TissueClass>>> {
        self.validate()?;
        let (uw, _) = self.units();
        let cells = self.cell_regions();
        let p = self.px_per_unit;
        let mut out = Vec::with_capacity(self.width * self.height);
        for py in 0..self.height {
            for px in 0..self.width {
                out.push(cells[(py / p) * uw + px / p].map(|k| self.regions[k].class));
            }
        }
        Ok(out)
    }
}

/// A slide of `label` tissue islands inside a `filler` tissue blob. The
/// islands cover roughly a quarter to a half of the tissue.
pub fn classification_slide(
    slide_id: &str,
    label: TissueClass,
    filler: TissueClass,
    side: usize,
    px_per_unit: usize,
    seed: u64,
) -> SyntheticSlideSpec {
    let mut rng = SeededRng::new(seed);
    let c = side as f64 / 2.0;
    let r_tissue = side as f64 * 0.36;
    let mut regions = vec![Region {
        shape: Shape::random_blob(c, c, r_tissue, &mut rng),
        class: filler,
        appearance: Appearance::random(&mut rng),
    }];
    let n_islands = 1 + rng.below(3);
    let target = rng.uniform(0.25, 0.5) * r_tissue * r_tissue;
    let r_island = (target / n_islands as f64).sqrt();
    for _ in 0..n_islands {
        let angle = rng.uniform(0.0, std::f64::consts::TAU);
        let dist = rng.uniform(0.0, (r_tissue * 0.75 - r_island).max(0.0));
        regions.push(Region {
            shape: Shape::random_blob(
                c + dist * angle.cos(),
                c + dist * angle.sin(),
                r_island,
                &mut rng,
            ),
            class: label,
            appearance: Appearance::random(&mut rng),
        });
    }
    SyntheticSlideSpec {
        slide_id: slide_id.to_string(),
        width: side,
        height: side,
        px_per_unit,
        magnification: 10.0,
        texture_seed: rng.next_u64(),
        label: Some(label),
        regions,
    }
}

/// A `background`-class tissue blob with `foreground` regions covering
/// roughly 35-65% of it, for segmentation.
pub fn segmentation_slide(
    slide_id: &str,
    background: TissueClass,
    foreground: TissueClass,
    side: usize,
    px_per_unit: usize,
    seed: u64,
) -> SyntheticSlideSpec {
    let mut rng = SeededRng::new(seed);
    let c = side as f64 / 2.0;
    let r_tissue = side as f64 * 0.4;
    let mut regions = vec![Region {
        shape: Shape::random_blob(c, c, r_tissue, &mut rng),
        class: background,
        appearance: Appearance::random(&mut rng),
    }];
    let n = 1 + rng.below(2);
    let r_fg = (rng.uniform(0.35, 0.65) / n as f64).sqrt() * r_tissue;
    for _ in 0..n {
        let angle = rng.uniform(0.0, std::f64::consts::TAU);
        let dist = rng.uniform(0.0, (r_tissue * 0.8 - r_fg).max(0.0));
        regions.push(Region {
            shape: Shape::random_blob(
                c + dist * angle.cos(),
                c + dist * angle.sin(),
                r_fg,
                &mut rng,
            ),
            class: foreground,
            appearance: Appearance::random(&mut rng),
        });
    }
    SyntheticSlideSpec {
        slide_id: slide_id.to_string(),
        width: side,
        height: side,
        px_per_unit,
        magnification: 10.0,
        texture_seed: rng.next_u64(),
        label: None,
        regions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wsi::tissue::rgb_to_hsv;

    #[test]
    fn labels_round_trip_and_are_named() {
        let vocab = class_vocabulary();
        for c in TissueClass::ALL {
            assert_eq!(TissueClass::from_label(c.label()).unwrap(), c);
            assert!(vocab.class_index(c.label()).is_ok());
        }
        assert!(TissueClass::from_label("BACK").is_err());
    }

    #[test]
    fn rois_are_reproducible() {
        let spec = RoiSpec::new(TissueClass::ALL.to_vec(), 3, 42);
        let a = generate_rois(&spec).unwrap();
        let b = generate_rois(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 24);
        assert!(a
            .iter()
            .enumerate()
            .all(|(i, s)| s.class == TissueClass::ALL[i % 8]));
        let c = generate_rois(&RoiSpec::new(TissueClass::ALL.to_vec(), 3, 43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unit_aligned_render_matches_unit_scale() {
        let app = Appearance::plain();
        let big = render_roi(TissueClass::Tum, &app, 224, 7, (35, 63), 1).unwrap();
        let small = render_roi(TissueClass::Tum, &app, 32, 1, (5, 9), 1).unwrap();
        for y in 0..224 {
            for x in 0..224 {
                assert_eq!(big.pixel(x, y), small.pixel(x / 7, y / 7));
            }
        }
    }

    #[test]
    fn tissue_colors_are_saturated() {
        for class in TissueClass::ALL {
            for intensity in Intensity::ALL {
                let app = Appearance {
                    intensity,
                    scale: Scale::Fine,
                    shift: [0.0; 3],
                };
                let img = render_roi(class, &app, 32, 1, (0, 0), 3).unwrap();
                let mean: Vec<u8> = (0..3)
                    .map(|c| {
                        (img.data()
                            .iter()
                            .skip(c)
                            .step_by(3)
                            .map(|&v| v as f64)
                            .sum::<f64>()
                            / 1024.0)
                            .round() as u8
                    })
                    .collect();
                assert!(
                    rgb_to_hsv([mean[0], mean[1], mean[2]])[1] > 20,
                    "{class:?} {intensity:?}"
                );
            }
        }
    }

    #[test]
    fn captions_name_the_class() {
        let vocab = class_vocabulary();
        let mut rng = SeededRng::new(2);
        for _ in 0..50 {
            let app = Appearance::random(&mut rng);
            let cap = caption_for(TissueClass::Muc, &app, &vocab, 1.0, &mut rng).unwrap();
            assert!(vocab.classes[vocab.class_index("MUC").unwrap()]
                .names
                .iter()
                .any(|n| cap.contains(n.as_str())));
            assert!(cap.contains(app.intensity.word()) && cap.contains(app.scale.word()));
        }
    }

    #[test]
    fn single_class_slide() {
        let spec = classification_slide("s", TissueClass::Lym, TissueClass::Lym, 256, 8, 4);
        let map = spec.class_map().unwrap();
        assert!(map.iter().flatten().all(|&c| c == TissueClass::Lym));
        assert!(map.iter().any(|c| c.is_some()));
        assert_eq!(spec.render().unwrap(), spec.render().unwrap());
    }

    #[test]
    fn shapes() {
        let sq = Shape::Polygon {
            points: vec![(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)],
        };
        assert!(sq.contains(2.0, 2.0) && !sq.contains(5.0, 2.0));
        let disk = Shape::Blob {
            cx: 10.0,
            cy: 10.0,
            rx: 3.0,
            ry: 3.0,
            harmonics: vec![],
        };
        assert!(disk.contains(12.0, 10.0) && !disk.contains(13.5, 10.0));
        assert_eq!(disk.bounds(), (7.0, 7.0, 13.0, 13.0));
    }

    #[test]
    fn regions_outside_rejected() {
        let mut spec = segmentation_slide("s", TissueClass::Norm, TissueClass::Tum, 512, 7, 1);
        assert!(spec.validate().is_ok());
        spec.width = 100;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }
}
