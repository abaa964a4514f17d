//! Zero-shot tile classification, MI-Zero top-K slide pooling, similarity
//! heatmaps and exact cross-modal retrieval.

use serde::{Deserialize, Serialize};

use crate::data_io::{EmbeddingStore, RasterImage, SlideManifest, TileCoord};
use crate::error::{Error, Result};
use crate::eval::{balanced_accuracy, LabeledPredictions};
use crate::numerics::dot;
use crate::prompting::ClassEmbeddingBank;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Cosine similarity of `u` against every class vector.
pub fn class_scores(u: &[f64], bank: &ClassEmbeddingBank) -> Result<Vec<f64>> {
    if u.len() != bank.dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs class dim {}",
            u.len(),
            bank.dim()
        )));
    }
    Ok(bank
        .embeddings
        .iter()
        .map(|v| dot(u, v.as_slice()))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilePrediction {
    pub predicted: usize,
    pub scores: Vec<f64>,
}

pub fn classify_tile(u: &[f64], bank: &ClassEmbeddingBank) -> Result<TilePrediction> {
    let scores = class_scores(u, bank)?;
    Ok(TilePrediction {
        predicted: argmax(&scores),
        scores,
    })
}

/// `N × C` tile-by-class similarity scores, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub n_tiles: usize,
    pub n_classes: usize,
    pub scores: Vec<f64>,
    pub tile_coords: Vec<TileCoord>,
}

impl ScoreMatrix {
    pub fn new(n_classes: usize, scores: Vec<f64>, tile_coords: Vec<TileCoord>) -> Result<Self> {
        if n_classes == 0 || scores.len() != tile_coords.len() * n_classes {
            return Err(Error::Shape(format!(
                "{} scores for {} tiles x {n_classes} classes",
                scores.len(),
                tile_coords.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("non-finite tile score".into()));
        }
        Ok(ScoreMatrix {
            n_tiles: tile_coords.len(),
            n_classes,
            scores,
            tile_coords,
        })
    }

    pub fn from_store(
        store: &EmbeddingStore,
        tile_coords: Vec<TileCoord>,
        bank: &ClassEmbeddingBank,
    ) -> Result<Self> {
        if store.len() != tile_coords.len() {
            return Err(Error::Consistency(format!(
                "{} embeddings for {} tiles",
                store.len(),
                tile_coords.len()
            )));
        }
        let mut scores = Vec::with_capacity(store.len() * bank.n_classes());
        for i in 0..store.len() {
            scores.extend(class_scores(&store.get_f64(i), bank)?);
        }
        ScoreMatrix::new(bank.n_classes(), scores, tile_coords)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.n_tiles)
            .map(|i| self.scores[i * self.n_classes + c])
            .collect()
    }
}

/// Per class, the mean of the `k` largest tile scores (`k` clamps to N).
pub fn topk_pool(m: &ScoreMatrix, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if m.n_tiles == 0 {
        return Err(Error::EmptySlide("no tiles to pool".into()));
    }
    let k = k.min(m.n_tiles);
    Ok((0..m.n_classes)
        .map(|c| {
            let mut col = m.column(c);
            col.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
            let mut top = col[..k].to_vec();
            // fixed summation order, independent of tile order
            top.sort_by(|a, b| b.total_cmp(a));
            top.iter().sum::<f64>() / k as f64
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKConfig {
    pub ks: Vec<usize>,
}

impl Default for TopKConfig {
    fn default() -> Self {
        TopKConfig {
            ks: vec![1, 5, 10, 50, 100],
        }
    }
}

impl TopKConfig {
    pub fn new(mut ks: Vec<usize>) -> Result<Self> {
        if ks.is_empty() || ks.contains(&0) {
            return Err(Error::InvalidArgument(
                "candidate Ks must be positive and nonempty".into(),
            ));
        }
        ks.sort_unstable();
        ks.dedup();
        Ok(TopKConfig { ks })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KPrediction {
    pub k: usize,
    pub scores: Vec<f64>,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub label: Option<usize>,
    pub per_k: Vec<KPrediction>,
}

impl SlidePrediction {
    pub fn at_k(&self, k: usize) -> Option<&KPrediction> {
        self.per_k.iter().find(|p| p.k == k)
    }
}

pub fn pool_all_k(m: &ScoreMatrix, config: &TopKConfig) -> Result<Vec<KPrediction>> {
    config
        .ks
        .iter()
        .map(|&k| {
            let scores = topk_pool(m, k)?;
            Ok(KPrediction {
                k,
                predicted: argmax(&scores),
                scores,
            })
        })
        .collect()
}

/// Top-K predictions for every candidate K. Choosing which K to report is a
/// labeled-set decision, see [`select_best_k`].
pub fn classify_slide(
    manifest: &SlideManifest,
    store: &EmbeddingStore,
    bank: &ClassEmbeddingBank,
    config: &TopKConfig,
) -> Result<SlidePrediction> {
    manifest.check_store(store)?;
    let m = ScoreMatrix::from_store(store, manifest.tile_coords.clone(), bank)?;
    Ok(SlidePrediction {
        slide_id: manifest.slide_id.clone(),
        label: manifest.label,
        per_k: pool_all_k(&m, config)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestK {
    pub k: usize,
    pub balanced_accuracy: f64,
    pub per_k: Vec<(usize, f64)>,
}

/// The candidate K with the highest balanced accuracy over a labeled set of
/// slides (smallest K on ties).
pub fn select_best_k(preds: &[SlidePrediction], n_classes: usize) -> Result<BestK> {
    let first = preds
        .first()
        .ok_or_else(|| Error::InvalidArgument("no slide predictions".into()))?;
    let truth = preds
        .iter()
        .map(|p| {
            p.label
                .ok_or_else(|| Error::InvalidArgument(format!("slide {} has no label", p.slide_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_k = Vec::new();
    for kp in &first.per_k {
        let pred = preds
            .iter()
            .map(|p| {
                p.at_k(kp.k).map(|x| x.predicted).ok_or_else(|| {
                    Error::Consistency(format!("slide {} lacks K={}", p.slide_id, kp.k))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let lp = LabeledPredictions::new(truth.clone(), pred, n_classes)?;
        per_k.push((kp.k, balanced_accuracy(&lp)?));
    }
    let mut best = per_k[0];
    for &(k, b) in &per_k[1..] {
        if b > best.1 {
            best = (k, b);
        }
    }
    Ok(BestK {
        k: best.0,
        balanced_accuracy: best.1,
        per_k,
    })
}

const COLORMAP_ANCHORS: [(usize, [u8; 3]); 4] = [
    (0, [255, 255, 255]),
    (85, [253, 174, 97]),
    (170, [215, 48, 39]),
    (255, [103, 0, 13]),
];

/// Sequential white → orange → red → dark-red map, piecewise linear between
/// the anchors at 0, 85, 170 and 255 with round-half-away-from-zero.
pub fn colormap(index: u8) -> [u8; 3] {
    let i = index as usize;
    let seg = COLORMAP_ANCHORS
        .windows(2)
        .find(|w| i <= w[1].0)
        .expect("anchors span 0..=255");
    let ((i0, a), (i1, b)) = (seg[0], seg[1]);
    let t = (i - i0) as f64 / (i1 - i0) as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (a[c] as f64 + t * (b[c] as f64 - a[c] as f64)).round() as u8;
    }
    out
}

/// Colormap index for each tile: per-slide min-max normalization to
/// `round(255·(s − min)/(max − min))`; all-equal scores map to 128.
pub fn heatmap_indices(m: &ScoreMatrix, class: usize) -> Result<Vec<u8>> {
    if class >= m.n_classes {
        return Err(Error::InvalidArgument(format!(
            "class {class} >= {}",
            m.n_classes
        )));
    }
    let col = m.column(class);
    let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(col
        .iter()
        .map(|&s| {
            if hi > lo {
                (255.0 * (s - lo) / (hi - lo)).round() as u8
            } else {
                128
            }
        })
        .collect())
}

/// Paints each tile footprint with its colormap color. Where tiles overlap
/// the normalized values are averaged first; uncovered pixels stay white.
pub fn heatmap(m: &ScoreMatrix, class: usize, width: usize, height: usize) -> Result<RasterImage> {
    let idx = heatmap_indices(m, class)?;
    let mut sum = vec![0.0; width * height];
    let mut count = vec![0u32; width * height];
    for (t, coord) in m.tile_coords.iter().enumerate() {
        let (x0, y0) = (coord.x.max(0) as usize, coord.y.max(0) as usize);
        let x1 = ((coord.x + coord.side as i64).max(0) as usize).min(width);
        let y1 = ((coord.y + coord.side as i64).max(0) as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                sum[y * width + x] += idx[t] as f64;
                count[y * width + x] += 1;
            }
        }
    }
    let mut img = RasterImage::filled(width, height, [255, 255, 255]);
    for y in 0..height {
        for x in 0..width {
            let c = count[y * width + x];
            if c > 0 {
                let v = (sum[y * width + x] / c as f64).round() as u8;
                img.set_pixel(x, y, colormap(v));
            }
        }
    }
    Ok(img)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    /// `(database index, cosine)` in descending score order.
    pub ranked: Vec<(usize, f64)>,
    /// 1-based rank of the ground-truth item over the whole database.
    pub ground_truth_rank: Option<usize>,
}

/// Exact cosine ranking of `database` against `query`; ties keep database
/// order. Returns the best `top_k` and the rank of `ground_truth` if given.
pub fn retrieve(
    query_id: &str,
    query: &[f64],
    database: &EmbeddingStore,
    top_k: usize,
    ground_truth: Option<usize>,
) -> Result<RetrievalResult> {
    if database.is_empty() {
        return Err(Error::InvalidArgument("empty retrieval database".into()));
    }
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be at least 1".into()));
    }
    if query.len() != database.dim() {
        return Err(Error::Shape(format!(
            "query dim {} vs database dim {}",
            query.len(),
            database.dim()
        )));
    }
    if let Some(g) = ground_truth {
        if g >= database.len() {
            return Err(Error::InvalidArgument(format!(
                "ground truth {g} outside database"
            )));
        }
    }
    let scores: Vec<f64> = database
        .iter()
        .map(|v| v.iter().zip(query).map(|(&a, b)| a as f64 * b).sum())
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let ground_truth_rank = ground_truth.map(|g| order.iter().position(|&i| i == g).unwrap() + 1);
    order.truncate(top_k);
    Ok(RetrievalResult {
        query_id: query_id.to_string(),
        ranked: order.into_iter().map(|i| (i, scores[i])).collect(),
        ground_truth_rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Embedding;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn unit(v: Vec<f64>) -> Embedding {
        Embedding::normalize(v).unwrap()
    }

    fn coords(n: usize) -> Vec<TileCoord> {
        (0..n).map(|i| TileCoord::new(i as i64 * 4, 0, 4)).collect()
    }

    #[test]
    fn tile_cases() {
        let bank = ClassEmbeddingBank::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                unit(vec![1.0, 0.0, 0.0]),
                unit(vec![0.0, 1.0, 0.0]),
                unit(vec![0.0, 0.0, 1.0]),
            ],
        )
        .unwrap();
        let p = classify_tile(&[0.0, 0.0, 1.0], &bank).unwrap();
        assert_eq!((p.predicted, p.scores[2]), (2, 1.0));
        let tie = ClassEmbeddingBank::new(
            vec!["a".into(), "b".into()],
            vec![unit(vec![1.0, 1.0]), unit(vec![1.0, 1.0])],
        )
        .unwrap();
        assert_eq!(classify_tile(&[0.6, 0.8], &tie).unwrap().predicted, 0);
        assert!(classify_tile(&[1.0], &bank).is_err());
    }

    #[test]
    fn topk_cases() {
        let m = ScoreMatrix::new(2, vec![0.1, 0.9, 0.5, 0.2, 0.3, 0.4], coords(3)).unwrap();
        assert_eq!(topk_pool(&m, 1).unwrap(), vec![0.5, 0.9]);
        let mean = topk_pool(&m, 3).unwrap();
        assert!((mean[0] - 0.3).abs() < 1e-15 && (mean[1] - 0.5).abs() < 1e-15);
        assert_eq!(topk_pool(&m, 100).unwrap(), mean);
        let empty = ScoreMatrix::new(2, vec![], vec![]).unwrap();
        assert!(matches!(topk_pool(&empty, 1), Err(Error::EmptySlide(_))));
    }

    #[test]
    fn slide_cases() {
        let one = ScoreMatrix::new(3, vec![0.1, 0.7, 0.2], coords(1)).unwrap();
        let preds = pool_all_k(&one, &TopKConfig::default()).unwrap();
        assert!(preds.iter().all(|p| p.predicted == 1));
        let flat = ScoreMatrix::new(3, vec![0.4; 30], coords(10)).unwrap();
        assert!(pool_all_k(&flat, &TopKConfig::default())
            .unwrap()
            .iter()
            .all(|p| p.predicted == 0));
        // 10 strongly class-1 tiles among 90 class-0-leaning tiles
        let mut rng = SeededRng::new(1);
        let mut s = Vec::new();
        for i in 0..100 {
            if i % 10 == 3 {
                s.extend([0.2, 0.9]);
            } else {
                s.extend([0.5 + 0.05 * rng.next_f64(), 0.3 + 0.05 * rng.next_f64()]);
            }
        }
        let m = ScoreMatrix::new(2, s, coords(100)).unwrap();
        for p in pool_all_k(&m, &TopKConfig::default()).unwrap() {
            let oracle = {
                let mut col0 = m.column(0);
                let mut col1 = m.column(1);
                col0.sort_by(|a, b| b.total_cmp(a));
                col1.sort_by(|a, b| b.total_cmp(a));
                let k = p.k.min(100);
                let a: f64 = col0[..k].iter().sum::<f64>() / k as f64;
                let b: f64 = col1[..k].iter().sum::<f64>() / k as f64;
                usize::from(b > a)
            };
            assert_eq!(p.predicted, oracle, "k = {}", p.k);
            if p.k <= 10 {
                assert_eq!(p.predicted, 1);
            }
        }
    }

    #[test]
    fn best_k_prefers_smallest_on_tie() {
        let mk = |label: usize, preds: [usize; 2]| SlidePrediction {
            slide_id: "s".into(),
            label: Some(label),
            per_k: vec![
                KPrediction {
                    k: 1,
                    scores: vec![],
                    predicted: preds[0],
                },
                KPrediction {
                    k: 5,
                    scores: vec![],
                    predicted: preds[1],
                },
            ],
        };
        let best = select_best_k(&[mk(0, [0, 0]), mk(1, [0, 1])], 2).unwrap();
        assert_eq!(best.k, 5);
        assert_eq!(best.balanced_accuracy, 1.0);
        let tie = select_best_k(&[mk(0, [0, 0]), mk(1, [1, 1])], 2).unwrap();
        assert_eq!(tie.k, 1);
    }

    #[test]
    fn heatmap_cases() {
        let flat = ScoreMatrix::new(
            1,
            vec![0.3; 4],
            (0..4)
                .map(|i| TileCoord::new((i % 2) * 2, (i / 2) * 2, 2))
                .collect(),
        )
        .unwrap();
        let img = heatmap(&flat, 0, 4, 4).unwrap();
        assert!(img.data().chunks(3).all(|p| p == colormap(128)));
        let hot = ScoreMatrix::new(1, vec![0.0, 0.0, 1.0, 0.0], flat.tile_coords.clone()).unwrap();
        let img = heatmap(&hot, 0, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let inside = (0..2).contains(&x) && (2..4).contains(&y);
                assert_eq!(
                    img.pixel(x, y),
                    if inside {
                        colormap(255)
                    } else {
                        [255, 255, 255]
                    }
                );
            }
        }
        let grad = ScoreMatrix::new(1, vec![0.1, 0.2, 0.3, 0.4], flat.tile_coords.clone()).unwrap();
        let img = heatmap(&grad, 0, 4, 4).unwrap();
        let expect = [0u8, 85, 170, 255];
        for (t, c) in grad.tile_coords.iter().enumerate() {
            assert_eq!(img.pixel(c.x as usize, c.y as usize), colormap(expect[t]));
        }
        assert_eq!(colormap(0), [255, 255, 255]);
        assert_eq!(colormap(255), [103, 0, 13]);
    }

    fn store_of(vs: &[Vec<f64>]) -> EmbeddingStore {
        EmbeddingStore::from_vectors(vs[0].len(), vs, None, false).unwrap()
    }

    #[test]
    fn retrieve_cases() {
        let one = store_of(&[vec![0.6, 0.8]]);
        assert_eq!(
            retrieve("q", &[1.0, 0.0], &one, 5, Some(0))
                .unwrap()
                .ground_truth_rank,
            Some(1)
        );
        let mut rng = SeededRng::new(3);
        let vs: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                crate::numerics::normalized(&[rng.normal(), rng.normal(), rng.normal()]).unwrap()
            })
            .collect();
        let db = store_of(&vs);
        let q = db.get_f64(7);
        let r = retrieve("q", &q, &db, 3, Some(7)).unwrap();
        assert_eq!(r.ranked[0].0, 7);
        assert!((r.ranked[0].1 - 1.0).abs() < 1e-6);
        assert!(retrieve("q", &q, &EmbeddingStore::new(3, false), 1, None).is_err());
    }

    proptest! {
        #[test]
        fn topk_monotone_and_permutation_invariant(seed in any::<u64>(), n in 1usize..30) {
            let mut rng = SeededRng::new(seed);
            let s: Vec<f64> = (0..n * 3).map(|_| rng.normal()).collect();
            let m = ScoreMatrix::new(3, s.clone(), coords(n)).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let ps: Vec<f64> = perm.iter().flat_map(|&i| s[i * 3..i * 3 + 3].to_vec()).collect();
            let pm = ScoreMatrix::new(3, ps, coords(n)).unwrap();
            let mut prev = topk_pool(&m, 1).unwrap();
            for k in 1..=n {
                let cur = topk_pool(&m, k).unwrap();
                prop_assert_eq!(&cur, &topk_pool(&pm, k).unwrap());
                for c in 0..3 {
                    prop_assert!(cur[c] <= prev[c] + 1e-12);
                }
                prev = cur;
            }
        }
    }
}
