//! The synthetic end-to-end benchmark: generate ROI pairs and slides, train
//! the toy model, then evaluate zero-shot ROI and slide classification,
//! retrieval, segmentation and prompt ensembling, and few-shot ABMIL.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coca::{train_toy, EpochLog, Pair, ToyConfig, ToyImage, ToyModel, TrainConfig, Vocab};
use crate::data_io::{EmbeddingStore, PromptSet};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::eval::{accuracy, balanced_accuracy, recall_at_k, LabeledPredictions};
use crate::numerics::{SeededRng, Tensor2D};
use crate::prompting::{sample_prompt_sets, ClassEmbeddingBank, TextEncoder, ToyTextEncoder};
use crate::segmentation::{
    dice_precision_recall, segment_slide_zero_shot, SegmentConfig, SegmentationMask, IGNORE,
};
use crate::supervised::{
    median_by_shots, run_fewshot, AbmilConfig, FewShotPlan, FewShotRecord, LabeledBag,
    TrainingSchedule,
};
use crate::wsi::{
    class_vocabulary, classification_slide, classification_tile_grid, embed_slide, generate_rois,
    render_roi, segment_slide, segmentation_slide, Appearance, ImageEncoder, RoiSample, RoiSpec,
    SyntheticSlideSpec, TileInclusion, TissueClass, TissueParams, ToyImageEncoder,
};
use crate::zeroshot::{
    argmax, class_scores, classify_slide, select_best_k, SlidePrediction, TopKConfig,
};

/// Classes that label synthetic slides.
pub const SLIDE_CLASSES: [TissueClass; 5] = [
    TissueClass::Deb,
    TissueClass::Lym,
    TissueClass::Muc,
    TissueClass::Norm,
    TissueClass::Tum,
];
/// Background tissue the slide-level classes are embedded in.
pub const FILLER_CLASSES: [TissueClass; 2] = [TissueClass::Str, TissueClass::Mus];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub retrieval_pairs: usize,
    /// Held-out ROI tiles are rendered at this side and resized by the encoder.
    pub test_tile_px: usize,
    pub slides_per_class: usize,
    pub slide_side: usize,
    pub slide_tile: usize,
    pub segmentation_slides: usize,
    pub segmentation_side: usize,
    pub prompt_samples: usize,
    pub fewshot_pool_per_class: usize,
    pub fewshot_test_per_class: usize,
    pub fewshot_bag_size: usize,
    pub fewshot: FewShotPlan,
    pub mil: TrainingSchedule,
    pub model: ToyConfig,
    pub train: TrainConfig,
}

impl PipelineConfig {
    /// The full benchmark: 2,000 training pairs, 40 slides.
    pub fn standard(seed: u64) -> Self {
        PipelineConfig {
            seed,
            train_per_class: 250,
            test_per_class: 50,
            retrieval_pairs: 200,
            test_tile_px: 224,
            slides_per_class: 8,
            slide_side: 2048,
            slide_tile: 256,
            segmentation_slides: 4,
            segmentation_side: 2048,
            prompt_samples: 50,
            fewshot_pool_per_class: 16,
            fewshot_test_per_class: 8,
            fewshot_bag_size: 12,
            fewshot: FewShotPlan::new(seed),
            mil: TrainingSchedule::default(),
            model: ToyConfig::new(0),
            train: TrainConfig {
                seed,
                epochs: 20,
                ..TrainConfig::default()
            },
        }
    }

    /// A small configuration that runs in seconds.
    pub fn quick(seed: u64) -> Self {
        let mut c = PipelineConfig::standard(seed);
        c.train_per_class = 24;
        c.test_per_class = 4;
        c.retrieval_pairs = 16;
        c.slides_per_class = 1;
        c.slide_side = 512;
        c.segmentation_slides = 1;
        c.segmentation_side = 448;
        c.prompt_samples = 5;
        c.fewshot_pool_per_class = 2;
        c.fewshot_test_per_class = 1;
        c.fewshot_bag_size = 4;
        c.fewshot.shots = vec![1, 2];
        c.fewshot.replicates = 2;
        c.mil.epochs = 2;
        c.model.d_model = 16;
        c.model.n_heads = 2;
        c.model.n_caption_queries = 4;
        c.model.embed_dim = 16;
        c.train.epochs = 1;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub n_train_pairs: usize,
    pub vocab_size: usize,
    pub train_log: Vec<EpochLog>,
    pub roi_balanced_accuracy: f64,
    /// Rows are true classes, columns predictions, in [`TissueClass::ALL`] order.
    pub roi_confusion: Vec<Vec<usize>>,
    pub slide_best_k: usize,
    pub slide_accuracy: f64,
    pub slide_per_k: Vec<(usize, f64)>,
    pub retrieval_recall: Vec<(usize, f64)>,
    pub dice_per_slide: Vec<f64>,
    pub mean_dice: f64,
    pub ensemble_balanced_accuracy: f64,
    pub sampled_balanced_accuracies: Vec<f64>,
    pub sampled_median: f64,
    pub fewshot_records: Vec<FewShotRecord>,
    /// Median balanced accuracy per labels-per-class count.
    pub fewshot_medians: Vec<(usize, f64)>,
    pub seconds: Vec<(String, f64)>,
}

/// Everything produced by a run, for callers that want more than the report.
pub struct PipelineRun {
    pub report: PipelineReport,
    pub model: ToyModel,
    pub vocab: Vocab,
}

fn to_pair(sample: &RoiSample, side: usize, vocab: &Vocab) -> Result<Pair> {
    Ok(Pair {
        image: ToyImage::from_raster(&sample.image, side)?,
        caption: vocab.encode(&sample.caption),
    })
}

/// Median with the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("median of nothing".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Zero-shot predictions of `images` against `bank`.
pub fn zero_shot_predict(images: &[Embedding], bank: &ClassEmbeddingBank) -> Result<Vec<usize>> {
    images
        .iter()
        .map(|e| Ok(argmax(&class_scores(e.as_slice(), bank)?)))
        .collect()
}

/// Vocabulary over the captions of `samples` and the encoded training pairs.
pub fn training_pairs(
    config: &PipelineConfig,
    samples: &[RoiSample],
) -> Result<(Vocab, Vec<Pair>)> {
    let captions: Vec<&str> = samples.iter().map(|s| s.caption.as_str()).collect();
    let vocab = Vocab::build(&captions);
    let pairs = samples
        .iter()
        .map(|s| to_pair(s, config.model.image_side, &vocab))
        .collect::<Result<Vec<_>>>()?;
    Ok((vocab, pairs))
}

/// Generates the training ROIs of `config` and trains the toy model on them.
pub fn train_model(config: &PipelineConfig) -> Result<(ToyModel, Vocab, Vec<EpochLog>)> {
    let (vocab, pairs) = training_pairs(config, &training_rois(config)?)?;
    let model_cfg = ToyConfig {
        vocab_size: vocab.len(),
        ..config.model.clone()
    };
    let (model, log) = train_toy(model_cfg, &pairs, &config.train)?;
    Ok((model, vocab, log))
}

pub fn run(config: &PipelineConfig) -> Result<PipelineRun> {
    let mut seconds = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, seconds: &mut Vec<(String, f64)>| {
        seconds.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };
    let all = TissueClass::ALL.to_vec();

    let train = training_rois(config)?;
    let test = held_out_rois(config)?;
    let (vocab, pairs) = training_pairs(config, &train)?;
    lap("generate", &mut seconds);

    let model_cfg = ToyConfig {
        vocab_size: vocab.len(),
        ..config.model.clone()
    };
    let (model, train_log) = train_toy(model_cfg, &pairs, &config.train)?;
    lap("train", &mut seconds);

    let image_enc = ToyImageEncoder { model: &model };
    let text_enc = ToyTextEncoder {
        model: &model,
        vocab: &vocab,
    };
    let prompts = class_vocabulary();
    let labels: Vec<&str> = all.iter().map(|c| c.label()).collect();
    let roi_set = prompts.subset(&labels)?;
    let roi_bank = ClassEmbeddingBank::ensembled(&roi_set, &text_enc)?;

    // zero-shot ROI classification on held-out tiles
    let n_test = config.test_per_class * all.len();
    let test_emb: Vec<Embedding> = test
        .par_iter()
        .map(|s| image_enc.embed_image(&s.image))
        .collect::<Result<_>>()?;
    let truth: Vec<usize> = test[..n_test]
        .iter()
        .map(|s| all.iter().position(|c| *c == s.class).unwrap())
        .collect();
    let pred = zero_shot_predict(&test_emb[..n_test], &roi_bank)?;
    let roi_preds = LabeledPredictions::new(truth.clone(), pred, all.len())?;
    let roi_balanced_accuracy = balanced_accuracy(&roi_preds)?;
    let roi_confusion = roi_preds.confusion();

    // prompt ensembling against sampled single prompts
    let ensemble_balanced_accuracy = roi_balanced_accuracy;
    let sampled_balanced_accuracies = sampled_prompt_accuracies(
        &roi_set,
        &text_enc,
        &test_emb[..n_test],
        &truth,
        config.prompt_samples,
        config.seed,
    )?;
    let sampled_median = median(&sampled_balanced_accuracies)?;
    lap("roi", &mut seconds);

    // text-to-image retrieval on held-out pairs
    let n_ret = config.retrieval_pairs;
    let db =
        EmbeddingStore::from_vectors(model.config().embed_dim, &test_emb[..n_ret], None, true)?;
    let ranks: Vec<Option<usize>> = test[..n_ret]
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let q = text_enc.embed_text(&s.caption)?;
            Ok(
                crate::zeroshot::retrieve(&i.to_string(), q.as_slice(), &db, 10, Some(i))?
                    .ground_truth_rank,
            )
        })
        .collect::<Result<_>>()?;
    let retrieval_recall = [1, 5, 10]
        .iter()
        .map(|&k| Ok((k, recall_at_k(&ranks, k)?)))
        .collect::<Result<Vec<_>>>()?;
    lap("retrieval", &mut seconds);

    // slide classification with top-K pooling
    let slide_labels: Vec<&str> = SLIDE_CLASSES.iter().map(|c| c.label()).collect();
    let slide_bank = ClassEmbeddingBank::ensembled(&prompts.subset(&slide_labels)?, &text_enc)?;
    let topk = TopKConfig::default();
    let tissue_params = TissueParams::default();
    let mut slide_preds: Vec<SlidePrediction> = Vec::new();
    for spec in classification_specs(config) {
        let class_idx = spec
            .label
            .and_then(|l| SLIDE_CLASSES.iter().position(|c| *c == l))
            .ok_or_else(|| {
                Error::Consistency(format!("slide {} has no slide-level class", spec.slide_id))
            })?;
        let raster = spec.render()?;
        let mask = segment_slide(&raster, &tissue_params)?;
        let grid = classification_tile_grid(&mask, config.slide_tile, TileInclusion::Center)?;
        let (store, manifest) = embed_slide(
            &spec.slide_id,
            Some(class_idx),
            &raster,
            &grid,
            &image_enc,
            "",
        )?;
        slide_preds.push(classify_slide(&manifest, &store, &slide_bank, &topk)?);
    }
    let best = select_best_k(&slide_preds, SLIDE_CLASSES.len())?;
    let slide_truth: Vec<usize> = slide_preds.iter().map(|p| p.label.unwrap()).collect();
    let slide_pred: Vec<usize> = slide_preds
        .iter()
        .map(|p| p.at_k(best.k).unwrap().predicted)
        .collect();
    let slide_accuracy = accuracy(&LabeledPredictions::new(
        slide_truth,
        slide_pred,
        SLIDE_CLASSES.len(),
    )?)?;
    lap("slides", &mut seconds);

    // zero-shot segmentation of tumor against normal mucosa
    let seg_set = prompts.subset(&["NORM", "TUM"])?;
    let seg_bank = ClassEmbeddingBank::ensembled(&seg_set, &text_enc)?;
    let seg_cfg = SegmentConfig::default();
    let mut dice_per_slide = Vec::new();
    for spec in segmentation_specs(config) {
        let raster = spec.render()?;
        let mask = segment_slide(&raster, &tissue_params)?;
        let pred = segment_slide_zero_shot(&raster, &mask, &seg_bank, &image_enc, &seg_cfg)?;
        let truth = truth_mask(
            &spec.class_map()?,
            spec.width,
            spec.height,
            &[TissueClass::Norm, TissueClass::Tum],
        )?;
        dice_per_slide.push(dice_precision_recall(&pred, &truth, 1)?.dice);
    }
    let mean_dice = dice_per_slide.iter().sum::<f64>() / dice_per_slide.len().max(1) as f64;
    lap("segmentation", &mut seconds);

    // few-shot ABMIL on bags of frozen tile embeddings
    let pool = synthetic_bags(
        &image_enc,
        config.fewshot_pool_per_class,
        config.fewshot_bag_size,
        config.test_tile_px,
        config.seed ^ 0xF5,
    )?;
    let held_out = synthetic_bags(
        &image_enc,
        config.fewshot_test_per_class,
        config.fewshot_bag_size,
        config.test_tile_px,
        config.seed ^ 0xF7,
    )?;
    let mil_cfg = AbmilConfig::new(image_enc.embed_dim(), SLIDE_CLASSES.len());
    let fewshot_records = run_fewshot(&pool, &held_out, &mil_cfg, &config.mil, &config.fewshot)?;
    let fewshot_medians = median_by_shots(&fewshot_records, &config.fewshot);
    lap("fewshot", &mut seconds);

    Ok(PipelineRun {
        report: PipelineReport {
            n_train_pairs: pairs.len(),
            vocab_size: vocab.len(),
            train_log,
            roi_balanced_accuracy,
            roi_confusion,
            slide_best_k: best.k,
            slide_accuracy,
            slide_per_k: best.per_k,
            retrieval_recall,
            dice_per_slide,
            mean_dice,
            ensemble_balanced_accuracy,
            sampled_balanced_accuracies,
            sampled_median,
            fewshot_records,
            fewshot_medians,
            seconds,
        },
        model,
        vocab,
    })
}

/// Image-caption training pairs, rendered at 8 px per unit and reduced to
/// the encoder input side.
pub fn training_rois(config: &PipelineConfig) -> Result<Vec<RoiSample>> {
    let side = config.model.image_side;
    generate_rois(&RoiSpec {
        side_units: side,
        ..RoiSpec::training(
            TissueClass::ALL.to_vec(),
            config.train_per_class,
            config.seed,
        )
    })
}

/// Held-out pairs at `test_tile_px`. The first `test_per_class · 8` serve
/// ROI classification and the first `retrieval_pairs` serve retrieval.
pub fn held_out_rois(config: &PipelineConfig) -> Result<Vec<RoiSample>> {
    let side = config.model.image_side;
    let all = TissueClass::ALL.to_vec();
    let test_ppu = config.test_tile_px / side;
    let per_class = config
        .test_per_class
        .max(config.retrieval_pairs.div_ceil(all.len()));
    generate_rois(&RoiSpec {
        side_units: side,
        render_px_per_unit: test_ppu,
        px_per_unit: test_ppu,
        phase_jitter: true,
        ..RoiSpec::new(all, per_class, config.seed ^ 0x7E57)
    })
}

/// Labelled slides cycling through [`SLIDE_CLASSES`] and [`FILLER_CLASSES`];
/// labels index [`SLIDE_CLASSES`].
pub fn classification_specs(config: &PipelineConfig) -> Vec<SyntheticSlideSpec> {
    (0..config.slides_per_class * SLIDE_CLASSES.len())
        .map(|s| {
            let filler = FILLER_CLASSES[(s / SLIDE_CLASSES.len()) % FILLER_CLASSES.len()];
            classification_slide(
                &format!("slide_{s:03}"),
                SLIDE_CLASSES[s % SLIDE_CLASSES.len()],
                filler,
                config.slide_side,
                config.slide_tile / config.model.image_side,
                config.seed.wrapping_mul(1000).wrapping_add(s as u64),
            )
        })
        .collect()
}

/// Tumor-in-normal slides for segmentation.
pub fn segmentation_specs(config: &PipelineConfig) -> Vec<SyntheticSlideSpec> {
    let tile = SegmentConfig::default().tile_side;
    (0..config.segmentation_slides)
        .map(|s| {
            segmentation_slide(
                &format!("seg_{s:03}"),
                TissueClass::Norm,
                TissueClass::Tum,
                config.segmentation_side,
                tile / config.model.image_side,
                config.seed.wrapping_mul(7919).wrapping_add(s as u64),
            )
        })
        .collect()
}

/// Ground-truth mask from a generator class map; classes outside `classes`
/// and background are ignored.
pub fn truth_mask(
    class_map: &[Option<TissueClass>],
    width: usize,
    height: usize,
    classes: &[TissueClass],
) -> Result<SegmentationMask> {
    let data = class_map
        .iter()
        .map(|c| {
            c.and_then(|c| classes.iter().position(|k| *k == c))
                .map_or(IGNORE, |i| i as u8)
        })
        .collect();
    SegmentationMask::new(width, height, classes.len(), data)
}

/// Balanced accuracy of each of `n_sets` sampled single-prompt class banks.
pub fn sampled_prompt_accuracies(
    set: &PromptSet,
    encoder: &dyn TextEncoder,
    images: &[Embedding],
    truth: &[usize],
    n_sets: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let labels: Vec<String> = set.labels().iter().map(|s| s.to_string()).collect();
    sample_prompt_sets(set, n_sets, seed)?
        .into_iter()
        .map(|prompts| {
            let bank = ClassEmbeddingBank::from_prompts(labels.clone(), prompts, encoder)?;
            let pred = zero_shot_predict(images, &bank)?;
            balanced_accuracy(&LabeledPredictions::new(
                truth.to_vec(),
                pred,
                labels.len(),
            )?)
        })
        .collect()
}

/// Slide-like bags for supervised experiments: `bag_size` tiles per bag,
/// a third to a half of them showing the label class and the rest one
/// filler class, each rendered at `tile_px` with its own appearance.
pub fn synthetic_bags(
    encoder: &dyn ImageEncoder,
    per_class: usize,
    bag_size: usize,
    tile_px: usize,
    seed: u64,
) -> Result<Vec<LabeledBag>> {
    if bag_size < 2 {
        return Err(Error::InvalidArgument(
            "bags need at least two tiles".into(),
        ));
    }
    let side = encoder.input_side();
    let ppu = (tile_px / side).max(1);
    (0..per_class * SLIDE_CLASSES.len())
        .into_par_iter()
        .map(|b| {
            let label = b % SLIDE_CLASSES.len();
            let mut rng = SeededRng::derive(seed, b as u64);
            let filler = FILLER_CLASSES[rng.below(FILLER_CLASSES.len())];
            let n_label = bag_size / 3 + rng.below(bag_size / 2 - bag_size / 3 + 1);
            let mut rows = Vec::with_capacity(bag_size * encoder.embed_dim());
            for t in 0..bag_size {
                let class = if t < n_label {
                    SLIDE_CLASSES[label]
                } else {
                    filler
                };
                let app = Appearance::random(&mut rng);
                let origin = (rng.below(ppu * 64) as i64, rng.below(ppu * 64) as i64);
                let image = render_roi(class, &app, side * ppu, ppu, origin, rng.next_u64())?;
                rows.extend(encoder.embed_image(&image)?.as_slice());
            }
            Ok(LabeledBag {
                bag: Tensor2D::from_vec(bag_size, encoder.embed_dim(), rows)?,
                label,
            })
        })
        .collect()
}
