use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::io::{ensure_dir, meta_path, read_jsonl, resolve, write_json, write_jsonl, Clock, Meta};
use super::*;
use crate::coca::{
    finetune_captioner, generate_captions, mean_rouge1, train_toy, DecodeConfig, Pair, ToyConfig,
    ToyImage, ToyModel, TrainConfig, Vocab,
};
use crate::data_io::{
    built_in_names, built_in_prompt_set, read_checkpoint, read_ppm, read_prompt_set, read_store,
    write_checkpoint, write_manifest, write_pgm, write_ppm, write_store, EmbeddingStore, PromptSet,
    RasterImage, SlideManifest,
};
use crate::embedding::Embedding;
use crate::eval::{
    accuracy, auc_roc, balanced_accuracy, bootstrap_ci, cohens_kappa, mean_recall,
    paired_permutation_test, recall_at_k, weighted_f1, ConfidenceInterval, KappaWeighting,
    LabeledPredictions, PermutationConfig,
};
use crate::numerics::Tensor2D;
use crate::pipeline::{
    classification_specs, held_out_rois, median, segmentation_specs, training_rois, truth_mask,
};
use crate::prompting::{ClassEmbeddingBank, TextEncoder, ToyTextEncoder};
use crate::segmentation::{
    dice_precision_recall, overlap_tile_grid, segment_slide_zero_shot, SegmentConfig,
};
use crate::supervised::{
    bag_from_store, linear_probe_fit, run_fewshot, train_abmil, AbmilConfig, FewShotPlan,
    FewShotRecord, LabeledBag, LinearProbeConfig, TrainingSchedule,
};
use crate::wsi::{
    classification_tile_grid, embed_slide, segment_slide, ImageEncoder, SyntheticSlideSpec,
    TissueClass, TissueParams, ToyImageEncoder,
};
use crate::zeroshot::{
    argmax, class_scores, classify_slide, heatmap, retrieve, select_best_k, ScoreMatrix, TopKConfig,
};

pub(super) fn dispatch(cli: &Cli) -> Result<()> {
    let clock = Clock::start();
    let ctx = Ctx { cli, clock: &clock };
    match &cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::TrainCoca(a) => train_coca(&ctx, a),
        Command::Embed(a) => embed(&ctx, a),
        Command::ClassifyRoi(a) => classify_roi(&ctx, a),
        Command::ClassifySlide(a) => classify_slide_cmd(&ctx, a),
        Command::Segment(a) => segment(&ctx, a),
        Command::Retrieve(a) => retrieve_cmd(&ctx, a),
        Command::Caption(a) => caption(&ctx, a),
        Command::TrainMil(a) => train_mil(&ctx, a),
        Command::Probe(a) => probe(&ctx, a),
        Command::Fewshot(a) => fewshot(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Stats(a) => stats(&ctx, a),
        Command::SegmentTissue(a) => segment_tissue(&ctx, a),
        Command::Tile(a) => tile(&ctx, a),
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    clock: &'a Clock,
}

impl Ctx<'_> {
    fn seed(&self) -> u64 {
        self.cli.seed
    }

    fn meta(&self, output: &Path, summary: serde_json::Value) -> Result<()> {
        write_json(
            &meta_path(output),
            &Meta {
                tool: "pathvl",
                version: env!("CARGO_PKG_VERSION"),
                command: self.cli.command.name(),
                seed: self.cli.seed,
                workers: self.cli.workers,
                args: &self.cli.command,
                summary,
                started_unix: self.clock.started_unix(),
                elapsed_seconds: self.clock.elapsed(),
            },
        )
    }
}

/// One image-caption pair written by `synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    /// PPM path relative to the pairs file.
    pub image: String,
    pub caption: String,
    pub class: String,
}

/// One embedded ROI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    #[serde(default)]
    pub class: Option<String>,
    #[serde(default)]
    pub caption: Option<String>,
    pub embedding: Vec<f64>,
}

/// One prediction, as read by `eval` and `stats`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    #[serde(default)]
    pub truth: Option<usize>,
    pub predicted: usize,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub scores: Option<Vec<f64>>,
}

fn load_model(path: &Path) -> Result<(ToyModel, Vocab)> {
    ToyModel::from_checkpoint(&read_checkpoint(path)?)
}

fn load_prompts(spec: &str) -> Result<PromptSet> {
    if built_in_names().contains(&spec) {
        built_in_prompt_set(spec)
    } else if Path::new(spec).exists() {
        read_prompt_set(spec)
    } else {
        Err(Error::Usage(format!(
            "--prompts {spec:?} is neither a file nor one of {:?}",
            built_in_names()
        )))
    }
}

fn class_bank(
    prompts: &str,
    classes: Option<&[String]>,
    encoder: &dyn TextEncoder,
) -> Result<(Vec<String>, ClassEmbeddingBank)> {
    let set = load_prompts(prompts)?;
    let set = match classes {
        Some(c) => set.subset(&c.iter().map(String::as_str).collect::<Vec<_>>())?,
        None => set,
    };
    let labels = set.labels().iter().map(|s| s.to_string()).collect();
    Ok((labels, ClassEmbeddingBank::ensembled(&set, encoder)?))
}

fn position(labels: &[String], label: &str) -> Option<usize> {
    labels.iter().position(|l| l == label)
}

fn nonempty<T>(items: Vec<T>, what: &Path) -> Result<Vec<T>> {
    if items.is_empty() {
        Err(Error::Usage(format!("{} has no records", what.display())))
    } else {
        Ok(items)
    }
}

enum SlideSource {
    Image {
        id: String,
        label: Option<TissueClass>,
        path: PathBuf,
    },
    Spec(Box<SyntheticSlideSpec>),
}

impl SlideSource {
    fn id(&self) -> &str {
        match self {
            SlideSource::Image { id, .. } => id,
            SlideSource::Spec(s) => &s.slide_id,
        }
    }

    fn label(&self) -> Option<TissueClass> {
        match self {
            SlideSource::Image { label, .. } => *label,
            SlideSource::Spec(s) => s.label,
        }
    }

    fn raster(&self) -> Result<RasterImage> {
        match self {
            SlideSource::Image { path, .. } => read_ppm(path),
            SlideSource::Spec(s) => s.render(),
        }
    }

    fn spec(&self) -> Option<&SyntheticSlideSpec> {
        match self {
            SlideSource::Spec(s) => Some(s),
            SlideSource::Image { .. } => None,
        }
    }
}

fn slide_sources(input: &SlideInput) -> Result<Vec<SlideSource>> {
    match (&input.image, &input.slides) {
        (Some(path), None) => {
            let id = input.slide_id.clone().unwrap_or_else(|| {
                path.file_stem()
                    .map_or("slide".into(), |s| s.to_string_lossy().into_owned())
            });
            let label = input
                .label
                .as_deref()
                .map(TissueClass::from_label)
                .transpose()?;
            Ok(vec![SlideSource::Image {
                id,
                label,
                path: path.clone(),
            }])
        }
        (None, Some(path)) => {
            let specs: Vec<SyntheticSlideSpec> = read_jsonl(path)?;
            let specs: Vec<_> = specs
                .into_iter()
                .filter(|s| input.slide_id.as_ref().is_none_or(|id| *id == s.slide_id))
                .map(|s| SlideSource::Spec(Box::new(s)))
                .collect();
            nonempty(specs, path)
        }
        _ => Err(Error::Usage(
            "give exactly one of --image or --slides".into(),
        )),
    }
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let cfg = a.preset.config(ctx.seed());
    ensure_dir(&a.out)?;
    let mut counts = Vec::new();
    for (split, samples) in [
        ("train", training_rois(&cfg)?),
        ("test", held_out_rois(&cfg)?),
    ] {
        ensure_dir(&a.out.join(split))?;
        let mut records = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let id = format!("{split}_{i:05}");
            let image = format!("{split}/{id}.ppm");
            write_ppm(&s.image, a.out.join(&image))?;
            records.push(PairRecord {
                id,
                image,
                caption: s.caption.clone(),
                class: s.class.label().to_string(),
            });
        }
        write_jsonl(&a.out.join(format!("{split}.jsonl")), &records)?;
        counts.push((split, records.len()));
    }
    let slides = classification_specs(&cfg);
    let seg = segmentation_specs(&cfg);
    write_jsonl(&a.out.join("slides.jsonl"), &slides)?;
    write_jsonl(&a.out.join("seg_slides.jsonl"), &seg)?;
    if a.render_slides {
        ensure_dir(&a.out.join("slides"))?;
        for s in slides.iter().chain(&seg) {
            write_ppm(
                &s.render()?,
                a.out.join("slides").join(format!("{}.ppm", s.slide_id)),
            )?;
        }
    }
    println!(
        "wrote {} training pairs, {} held-out pairs, {} slides, {} segmentation slides to {}",
        counts[0].1,
        counts[1].1,
        slides.len(),
        seg.len(),
        a.out.display()
    );
    ctx.meta(
        &a.out.join("synth"),
        json!({ "train_pairs": counts[0].1, "test_pairs": counts[1].1, "slides": slides.len(),
                "segmentation_slides": seg.len(), "pipeline": cfg }),
    )
}

fn read_pairs(path: &Path) -> Result<Vec<(PairRecord, RasterImage)>> {
    let records: Vec<PairRecord> = nonempty(read_jsonl(path)?, path)?;
    records
        .into_iter()
        .map(|r| {
            let img = read_ppm(resolve(path, &r.image))?;
            Ok((r, img))
        })
        .collect()
}

fn train_coca(ctx: &Ctx, a: &TrainCocaArgs) -> Result<()> {
    let preset = a.preset.config(ctx.seed());
    let pairs = read_pairs(&a.pairs)?;
    let captions: Vec<&str> = pairs.iter().map(|(r, _)| r.caption.as_str()).collect();
    let vocab = Vocab::build(&captions);
    let side = preset.model.image_side;
    let corpus = pairs
        .iter()
        .map(|(r, img)| {
            Ok(Pair {
                image: ToyImage::from_raster(img, side)?,
                caption: vocab.encode(&r.caption),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model_cfg = ToyConfig {
        vocab_size: vocab.len(),
        ..preset.model.clone()
    };
    let train = TrainConfig {
        epochs: a.epochs.unwrap_or(preset.train.epochs),
        lr: a.lr.unwrap_or(preset.train.lr),
        batch_size: a.batch_size.unwrap_or(preset.train.batch_size),
        ..preset.train.clone()
    };
    let (model, log) = train_toy(model_cfg, &corpus, &train)?;
    write_checkpoint(&model.to_checkpoint(&vocab), &a.out)?;
    let log_path = PathBuf::from(format!("{}.log.jsonl", a.out.display()));
    write_jsonl(&log_path, &log)?;
    if let Some(last) = log.last() {
        println!(
            "trained {} epochs on {} pairs: loss {:.4} (contrastive {:.4}, captioning {:.4})",
            log.len(),
            corpus.len(),
            last.loss,
            last.contrastive,
            last.captioning
        );
    }
    ctx.meta(
        &a.out,
        json!({ "pairs": corpus.len(), "vocab_size": vocab.len(), "model": model.config(), "train": train }),
    )
}

fn embed(ctx: &Ctx, a: &EmbedArgs) -> Result<()> {
    let (model, _) = load_model(&a.model)?;
    let enc = ToyImageEncoder { model: &model };
    if let Some(pairs_path) = &a.pairs {
        let pairs = read_pairs(pairs_path)?;
        let records = pairs
            .iter()
            .map(|(r, img)| {
                Ok(FeatureRecord {
                    id: r.id.clone(),
                    class: Some(r.class.clone()),
                    caption: Some(r.caption.clone()),
                    embedding: enc.embed_image(img)?.into_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_jsonl(&a.out, &records)?;
        println!("embedded {} images into {}", records.len(), a.out.display());
        return ctx.meta(
            &a.out,
            json!({ "images": records.len(), "dim": enc.embed_dim() }),
        );
    }
    ensure_dir(&a.out)?;
    let params = TissueParams::default();
    let mut manifests = Vec::new();
    for src in slide_sources(&a.input)? {
        let label = match src.label() {
            Some(c) => Some(position(&a.classes, c.label()).ok_or_else(|| {
                Error::Lookup(format!("slide class {} not in --classes", c.label()))
            })?),
            None => None,
        };
        let raster = src.raster()?;
        let mask = segment_slide(&raster, &params)?;
        let grid = classification_tile_grid(&mask, a.tile, a.inclusion.into())?;
        let store_name = format!("{}.emb", src.id());
        let (store, manifest) = embed_slide(src.id(), label, &raster, &grid, &enc, &store_name)?;
        write_store(&store, a.out.join(&store_name))?;
        write_manifest(&manifest, a.out.join(format!("{}.json", src.id())))?;
        println!("{}: {} tiles", src.id(), grid.len());
        manifests.push(manifest);
    }
    let index = a.out.join("manifests.jsonl");
    write_jsonl(&index, &manifests)?;
    ctx.meta(
        &index,
        json!({ "slides": manifests.len(), "classes": a.classes }),
    )
}

fn read_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    nonempty(read_jsonl(path)?, path)
}

fn classify_roi(ctx: &Ctx, a: &ClassifyRoiArgs) -> Result<()> {
    let (model, vocab) = load_model(&a.model)?;
    let text = ToyTextEncoder {
        model: &model,
        vocab: &vocab,
    };
    let features = read_features(&a.features)?;
    let classes = match &a.classes {
        Some(c) => Some(c.clone()),
        None => features
            .iter()
            .map(|f| f.class.clone())
            .collect::<Option<Vec<_>>>()
            .map(|present| {
                let set = load_prompts(&a.prompts.prompts)?;
                Ok::<_, Error>(
                    set.labels()
                        .iter()
                        .filter(|l| present.iter().any(|p| p == *l))
                        .map(|l| l.to_string())
                        .collect::<Vec<_>>(),
                )
            })
            .transpose()?,
    };
    let (labels, bank) = class_bank(&a.prompts.prompts, classes.as_deref(), &text)?;
    let records = features
        .into_iter()
        .map(|f| {
            let scores = class_scores(&f.embedding, &bank)?;
            let predicted = argmax(&scores);
            Ok(PredictionRecord {
                truth: f.class.as_deref().and_then(|c| position(&labels, c)),
                label: Some(labels[predicted].clone()),
                id: f.id,
                predicted,
                scores: Some(scores),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&a.out, &records)?;
    let summary = prediction_summary(&records, labels.len());
    println!(
        "classified {} ROIs over {} classes; {summary}",
        records.len(),
        labels.len()
    );
    ctx.meta(&a.out, json!({ "classes": labels, "summary": summary }))
}

fn prediction_summary(records: &[PredictionRecord], n_classes: usize) -> String {
    let truth: Option<Vec<usize>> = records.iter().map(|r| r.truth).collect();
    let Some(truth) = truth else {
        return "unlabelled".into();
    };
    let pred = records.iter().map(|r| r.predicted).collect();
    match LabeledPredictions::new(truth, pred, n_classes)
        .and_then(|p| Ok((accuracy(&p)?, balanced_accuracy(&p)?)))
    {
        Ok((acc, bacc)) => format!("accuracy {acc:.4}, balanced accuracy {bacc:.4}"),
        Err(e) => format!("metrics unavailable: {e}"),
    }
}

#[derive(Serialize)]
struct SlideRecord<'a> {
    id: &'a str,
    truth: Option<usize>,
    k: usize,
    predicted: usize,
    label: &'a str,
    scores: &'a [f64],
    per_k: &'a [crate::zeroshot::KPrediction],
}

fn load_manifests(path: &Path) -> Result<Vec<(SlideManifest, EmbeddingStore)>> {
    let manifests: Vec<SlideManifest> = nonempty(read_jsonl(path)?, path)?;
    manifests
        .into_iter()
        .map(|m| {
            let store = read_store(m.resolve_store(path))?;
            m.check_store(&store)?;
            Ok((m, store))
        })
        .collect()
}

fn classify_slide_cmd(ctx: &Ctx, a: &ClassifySlideArgs) -> Result<()> {
    let (model, vocab) = load_model(&a.model)?;
    let text = ToyTextEncoder {
        model: &model,
        vocab: &vocab,
    };
    let (labels, bank) = class_bank(&a.prompts.prompts, Some(&a.classes), &text)?;
    let topk = TopKConfig::new(a.ks.clone())?;
    let slides = load_manifests(&a.manifests)?;
    let preds = slides
        .iter()
        .map(|(m, s)| classify_slide(m, s, &bank, &topk))
        .collect::<Result<Vec<_>>>()?;
    let labelled = preds.iter().all(|p| p.label.is_some());
    let (k, selection) = match a.k {
        Some(k) if topk.ks.contains(&k) => (k, "fixed"),
        Some(k) => {
            return Err(Error::Usage(format!(
                "--k {k} is not among --ks {:?}",
                topk.ks
            )))
        }
        None => match labelled.then(|| select_best_k(&preds, labels.len())) {
            Some(Ok(best)) => (best.k, "best balanced accuracy"),
            Some(Err(e)) => {
                log::warn!("cannot rank K ({e}); reporting the smallest K");
                (topk.ks[0], "smallest")
            }
            None => {
                log::warn!("slides are unlabelled; reporting the smallest K");
                (topk.ks[0], "smallest")
            }
        },
    };
    let mut records = Vec::with_capacity(preds.len());
    for p in &preds {
        let at = p
            .at_k(k)
            .ok_or_else(|| Error::Consistency(format!("no K = {k} prediction")))?;
        records.push(PredictionRecord {
            id: p.slide_id.clone(),
            truth: p.label,
            predicted: at.predicted,
            label: Some(labels[at.predicted].clone()),
            scores: Some(at.scores.clone()),
        });
    }
    let rows: Vec<SlideRecord> = preds
        .iter()
        .zip(&records)
        .map(|(p, r)| SlideRecord {
            id: &p.slide_id,
            truth: p.label,
            k,
            predicted: r.predicted,
            label: r.label.as_deref().unwrap_or(""),
            scores: r.scores.as_deref().unwrap_or(&[]),
            per_k: &p.per_k,
        })
        .collect();
    write_jsonl(&a.out, &rows)?;
    if let Some(dir) = &a.heatmaps {
        ensure_dir(dir)?;
        for ((m, s), r) in slides.iter().zip(&records) {
            let sm = ScoreMatrix::from_store(s, m.tile_coords.clone(), &bank)?;
            let img = heatmap(&sm, r.predicted, m.width_px as usize, m.height_px as usize)?;
            write_ppm(&img, dir.join(format!("{}.heatmap.ppm", m.slide_id)))?;
        }
    }
    let summary = prediction_summary(&records, labels.len());
    println!(
        "classified {} slides at K = {k} ({selection}); {summary}",
        records.len()
    );
    ctx.meta(
        &a.out,
        json!({ "classes": labels, "k": k, "k_selection": selection, "summary": summary }),
    )
}

fn segment(ctx: &Ctx, a: &SegmentArgs) -> Result<()> {
    let (model, vocab) = load_model(&a.model)?;
    let text = ToyTextEncoder {
        model: &model,
        vocab: &vocab,
    };
    let enc = ToyImageEncoder { model: &model };
    let (labels, bank) = class_bank(&a.prompts.prompts, Some(&a.classes), &text)?;
    if a.positive as usize >= labels.len() {
        return Err(Error::Usage(format!(
            "--positive {} outside the class list",
            a.positive
        )));
    }
    let truth_classes: Option<Vec<TissueClass>> = labels
        .iter()
        .map(|l| TissueClass::from_label(l).ok())
        .collect();
    let cfg = SegmentConfig {
        tile_side: a.tile,
        overlap: a.overlap,
        ..SegmentConfig::default()
    };
    ensure_dir(&a.out)?;
    let mut rows = Vec::new();
    for src in slide_sources(&a.input)? {
        let raster = src.raster()?;
        let mask = segment_slide(&raster, &TissueParams::default())?;
        let pred = segment_slide_zero_shot(&raster, &mask, &bank, &enc, &cfg)?;
        write_pgm(
            &pred.to_gray(),
            a.out.join(format!("{}.mask.pgm", src.id())),
        )?;
        write_ppm(
            &pred.to_color(),
            a.out.join(format!("{}.mask.ppm", src.id())),
        )?;
        let scores = match (src.spec(), &truth_classes) {
            (Some(spec), Some(classes)) => {
                let truth = truth_mask(&spec.class_map()?, spec.width, spec.height, classes)?;
                Some(dice_precision_recall(&pred, &truth, a.positive)?)
            }
            _ => None,
        };
        match &scores {
            Some(s) => println!("{}: dice {:.4}", src.id(), s.dice),
            None => println!("{}: segmented", src.id()),
        }
        rows.push(
            json!({ "id": src.id(), "classes": labels, "positive": a.positive, "scores": scores }),
        );
    }
    let out = a.out.join("segment.jsonl");
    write_jsonl(&out, &rows)?;
    ctx.meta(&out, json!({ "slides": rows.len() }))
}

fn retrieve_cmd(ctx: &Ctx, a: &RetrieveArgs) -> Result<()> {
    let (model, vocab) = load_model(&a.model)?;
    let text = ToyTextEncoder {
        model: &model,
        vocab: &vocab,
    };
    let mut feats = read_features(&a.features)?;
    if let Some(n) = a.limit {
        feats.truncate(n);
    }
    let vectors = feats
        .iter()
        .map(|f| Embedding::normalize(f.embedding.clone()))
        .collect::<Result<Vec<_>>>()?;
    let db = EmbeddingStore::from_vectors(model.config().embed_dim, &vectors, None, true)?;
    let results = feats
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let caption = f.caption.as_deref().ok_or_else(|| {
                Error::Usage(format!("feature {} has no caption to query with", f.id))
            })?;
            let q = text.embed_text(caption)?;
            retrieve(&f.id, q.as_slice(), &db, a.top_k.min(feats.len()), Some(i))
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&a.out, &results)?;
    let ranks: Vec<Option<usize>> = results.iter().map(|r| r.ground_truth_rank).collect();
    let recall: Vec<(usize, f64)> = [1, 5, 10]
        .iter()
        .map(|&k| Ok((k, recall_at_k(&ranks, k)?)))
        .collect::<Result<_>>()?;
    let mr = mean_recall(&ranks)?;
    println!(
        "{} queries: {} mean recall {mr:.4}",
        results.len(),
        recall
            .iter()
            .map(|(k, r)| format!("R@{k} {r:.4},"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    ctx.meta(
        &a.out,
        json!({ "queries": results.len(), "recall": recall, "mean_recall": mr }),
    )
}

fn toy_images(pairs: &[(PairRecord, RasterImage)], side: usize) -> Result<Vec<ToyImage>> {
    pairs
        .iter()
        .map(|(_, img)| ToyImage::from_raster(img, side))
        .collect()
}

fn caption(ctx: &Ctx, a: &CaptionArgs) -> Result<()> {
    let (mut model, vocab) = load_model(&a.model)?;
    let side = model.config().image_side;
    let decode = DecodeConfig {
        top_k: a.top_k,
        max_len: a.max_len,
        seed: ctx.seed(),
    };
    let mut finetune = None;
    if let (Some(train_path), Some(val_path)) = (&a.finetune, &a.val) {
        let train = read_pairs(train_path)?;
        let val = read_pairs(val_path)?;
        let corpus = train
            .iter()
            .map(|(r, img)| {
                Ok(Pair {
                    image: ToyImage::from_raster(img, side)?,
                    caption: vocab.encode(&r.caption),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<String> = val.iter().map(|(r, _)| r.caption.clone()).collect();
        let cfg = TrainConfig {
            epochs: a.epochs,
            lr: a.lr,
            seed: ctx.seed(),
            ..TrainConfig::default()
        };
        let report = finetune_captioner(
            &mut model,
            &vocab,
            &corpus,
            &toy_images(&val, side)?,
            &refs,
            &cfg,
            &decode,
            a.patience,
        )?;
        println!(
            "fine-tuned {} epochs; best validation ROUGE-1 {:.4} at epoch {}",
            report.logs.len(),
            report.val_rouge1[report.best_epoch],
            report.best_epoch
        );
        if let Some(path) = &a.save_model {
            write_checkpoint(&model.to_checkpoint(&vocab), path)?;
        }
        finetune = Some(report);
    }
    let mut pairs = read_pairs(&a.pairs)?;
    if let Some(n) = a.limit {
        pairs.truncate(n);
    }
    let captions = generate_captions(&model, &vocab, &toy_images(&pairs, side)?, &decode)?;
    let refs: Vec<String> = pairs.iter().map(|(r, _)| r.caption.clone()).collect();
    let rows = pairs
        .iter()
        .zip(&captions)
        .map(|((r, _), c)| {
            Ok(json!({ "id": r.id, "caption": c, "reference": r.caption,
                       "rouge1": crate::eval::rouge1(c, &r.caption)? }))
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&a.out, &rows)?;
    let mean = mean_rouge1(&captions, &refs)?;
    println!("captioned {} images; mean ROUGE-1 {mean:.4}", rows.len());
    ctx.meta(
        &a.out,
        json!({ "images": rows.len(), "mean_rouge1": mean, "finetune": finetune }),
    )
}

fn labelled_bags(path: &Path) -> Result<Vec<LabeledBag>> {
    load_manifests(path)?
        .into_iter()
        .map(|(m, s)| {
            let label = m.label.ok_or_else(|| {
                Error::Usage(format!(
                    "slide {} in {} has no label",
                    m.slide_id,
                    path.display()
                ))
            })?;
            if s.is_empty() {
                return Err(Error::EmptySlide(m.slide_id));
            }
            Ok(LabeledBag {
                bag: bag_from_store(&s)?,
                label,
            })
        })
        .collect()
}

fn n_classes_of(bags: &[LabeledBag], given: Option<usize>) -> usize {
    given.unwrap_or_else(|| bags.iter().map(|b| b.label + 1).max().unwrap_or(0))
}

fn mil_schedule(a: &MilScheduleArgs, seed: u64) -> TrainingSchedule {
    TrainingSchedule {
        epochs: a.epochs,
        lr: a.lr,
        weight_decay: a.weight_decay,
        seed,
        ..TrainingSchedule::default()
    }
}

fn train_mil(ctx: &Ctx, a: &TrainMilArgs) -> Result<()> {
    let bags = labelled_bags(&a.manifests)?;
    let n_classes = n_classes_of(&bags, a.n_classes);
    let dim = bags[0].bag.cols();
    let schedule = mil_schedule(&a.schedule, ctx.seed());
    let (model, report) = train_abmil(&bags, AbmilConfig::new(dim, n_classes), &schedule)?;
    write_checkpoint(&model.to_checkpoint(), &a.out)?;
    let log: Vec<_> = report
        .loss_curve
        .iter()
        .enumerate()
        .map(|(epoch, loss)| json!({ "epoch": epoch, "loss": loss }))
        .collect();
    write_jsonl(
        &PathBuf::from(format!("{}.log.jsonl", a.out.display())),
        &log,
    )?;
    println!(
        "trained ABMIL on {} slides, {} classes: final loss {:.4}{}",
        bags.len(),
        n_classes,
        report.loss_curve.last().copied().unwrap_or(f64::NAN),
        if report.degenerate {
            " (single class: degenerate)"
        } else {
            ""
        }
    );
    ctx.meta(
        &a.out,
        json!({ "slides": bags.len(), "n_classes": n_classes, "schedule": schedule,
                              "degenerate": report.degenerate }),
    )
}

fn probe(ctx: &Ctx, a: &ProbeArgs) -> Result<()> {
    let train = read_features(&a.train)?;
    let test = read_features(&a.test)?;
    let classes = match &a.classes {
        Some(c) => c.clone(),
        None => {
            let mut c: Vec<String> = train.iter().filter_map(|f| f.class.clone()).collect();
            c.sort();
            c.dedup();
            c
        }
    };
    let labels = train
        .iter()
        .map(|f| {
            f.class
                .as_deref()
                .and_then(|c| position(&classes, c))
                .ok_or_else(|| {
                    Error::Usage(format!("training feature {} has no known class", f.id))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let dim = train[0].embedding.len();
    let x = Tensor2D::from_rows(
        &train
            .iter()
            .map(|f| f.embedding.clone())
            .collect::<Vec<_>>(),
    )?;
    let mut cfg = LinearProbeConfig::for_shape(dim, classes.len());
    cfg.max_iter = a.max_iter;
    cfg.tol = a.tol;
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    let fitted = linear_probe_fit(&x, &labels, classes.len(), &cfg)?;
    let records: Vec<PredictionRecord> = test
        .iter()
        .map(|f| {
            let scores = fitted.predict_proba(&f.embedding);
            let predicted = argmax(&scores);
            PredictionRecord {
                id: f.id.clone(),
                truth: f.class.as_deref().and_then(|c| position(&classes, c)),
                predicted,
                label: Some(classes[predicted].clone()),
                scores: Some(scores),
            }
        })
        .collect();
    write_jsonl(&a.out, &records)?;
    let summary = prediction_summary(&records, classes.len());
    println!(
        "probe: λ = {:.6}, {} L-BFGS iterations, gradient norm {:.2e} (converged: {}); {summary}",
        cfg.lambda, fitted.iterations, fitted.grad_norm, fitted.converged
    );
    ctx.meta(
        &a.out,
        json!({ "classes": classes, "config": cfg, "objective": fitted.objective,
                              "iterations": fitted.iterations, "grad_norm": fitted.grad_norm, "converged": fitted.converged,
                              "weights": fitted.weights, "bias": fitted.bias, "summary": summary }),
    )
}

fn fewshot(ctx: &Ctx, a: &FewshotArgs) -> Result<()> {
    let pool = labelled_bags(&a.train_manifests)?;
    let test = labelled_bags(&a.test_manifests)?;
    let n_classes = n_classes_of(&pool, a.n_classes);
    let plan = FewShotPlan {
        shots: a.shots.clone(),
        replicates: a.replicates,
        seed: ctx.seed(),
    };
    let schedule = mil_schedule(&a.schedule, ctx.seed());
    let config = AbmilConfig::new(pool[0].bag.cols(), n_classes);
    let records = run_fewshot(&pool, &test, &config, &schedule, &plan)?;
    write_jsonl(&a.out, &records)?;
    let medians = crate::supervised::median_by_shots(&records, &plan);
    for (n_c, m) in &medians {
        println!("n_c = {n_c:>3}: median balanced accuracy {m:.4}");
    }
    ctx.meta(
        &a.out,
        json!({ "plan": plan, "schedule": schedule, "medians": medians }),
    )
}

fn labeled_predictions(path: &Path, n_classes: Option<usize>) -> Result<LabeledPredictions> {
    let records: Vec<PredictionRecord> = nonempty(read_jsonl(path)?, path)?;
    let truth = records
        .iter()
        .map(|r| r.truth)
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Usage(format!("{} has predictions without truth", path.display())))?;
    let pred: Vec<usize> = records.iter().map(|r| r.predicted).collect();
    let width = records
        .iter()
        .filter_map(|r| r.scores.as_ref().map(Vec::len))
        .max()
        .unwrap_or(0);
    let inferred = truth
        .iter()
        .chain(&pred)
        .map(|&c| c + 1)
        .max()
        .unwrap_or(0)
        .max(width);
    let n = n_classes.unwrap_or(inferred);
    let p = LabeledPredictions::new(truth, pred, n)?;
    match records
        .iter()
        .map(|r| r.scores.clone())
        .collect::<Option<Vec<_>>>()
    {
        Some(scores) if width == n => p.with_scores(scores),
        _ => Ok(p),
    }
}

type MetricFn = fn(&LabeledPredictions) -> Result<f64>;

fn metric_table(p: &LabeledPredictions) -> Vec<(&'static str, MetricFn)> {
    let mut m: Vec<(&'static str, MetricFn)> = vec![
        ("accuracy", accuracy),
        ("balanced_accuracy", balanced_accuracy),
        ("weighted_f1", weighted_f1),
        ("cohens_kappa", |p| cohens_kappa(p, KappaWeighting::None)),
        ("quadratic_kappa", |p| {
            cohens_kappa(p, KappaWeighting::Quadratic)
        }),
    ];
    if p.scores.is_some() {
        m.push(("auc", auc_roc));
    }
    m
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let p = labeled_predictions(&a.predictions, a.n_classes)?;
    let mut rows: Vec<(String, Option<ConfidenceInterval>, Option<String>)> = Vec::new();
    for (name, f) in metric_table(&p) {
        let ci = bootstrap_ci(
            p.len(),
            |idx| f(&p.select(idx)),
            a.bootstrap,
            a.level,
            ctx.seed(),
        );
        match ci {
            Ok(ci) => rows.push((name.into(), Some(ci), None)),
            Err(e) => rows.push((name.into(), None, Some(e.to_string()))),
        }
    }
    println!(
        "{:<18} {:>8} {:>8} {:>8}",
        "metric", "value", "lower", "upper"
    );
    for (name, ci, err) in &rows {
        match ci {
            Some(c) => println!(
                "{name:<18} {:>8.4} {:>8.4} {:>8.4}",
                c.point, c.lower, c.upper
            ),
            None => println!(
                "{name:<18} {:>8}   ({})",
                "n/a",
                err.as_deref().unwrap_or("")
            ),
        }
    }
    let table: Vec<_> = rows
        .iter()
        .map(|(name, ci, err)| json!({ "metric": name, "ci": ci, "error": err }))
        .collect();
    let value = json!({ "n": p.len(), "n_classes": p.n_classes, "metrics": table });
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.eval.json", a.predictions.display())));
    write_json(&out, &value)?;
    ctx.meta(&out, json!({ "n": p.len() }))
}

fn stats(ctx: &Ctx, a: &StatsArgs) -> Result<()> {
    let (value, default_out) = match (&a.a, &a.b, &a.fewshot) {
        (Some(pa), Some(pb), None) => {
            let p = labeled_predictions(pa, None)?;
            let q = labeled_predictions(pb, Some(p.n_classes))?;
            if p.truth != q.truth {
                return Err(Error::Usage("--a and --b must score the same items".into()));
            }
            let metric: MetricFn = match a.metric {
                MetricName::Accuracy => accuracy,
                MetricName::BalancedAccuracy => balanced_accuracy,
                MetricName::WeightedF1 => weighted_f1,
            };
            let n = p.n_classes;
            let items = |x: &LabeledPredictions| -> Vec<(usize, usize)> {
                x.truth
                    .iter()
                    .copied()
                    .zip(x.pred.iter().copied())
                    .collect()
            };
            let score = move |rows: &[(usize, usize)]| {
                let (t, y): (Vec<usize>, Vec<usize>) = rows.iter().copied().unzip();
                metric(&LabeledPredictions::new(t, y, n)?)
            };
            let cfg = PermutationConfig {
                n_permutations: a.permutations,
                seed: ctx.seed(),
                ..PermutationConfig::default()
            };
            let r = paired_permutation_test(&items(&p), &items(&q), score, &cfg)?;
            println!(
                "{:?}: a {:.4}, b {:.4}, difference {:.4}, p = {:.4}",
                a.metric,
                metric(&p)?,
                metric(&q)?,
                r.observed,
                r.p_value
            );
            (
                json!({ "metric": a.metric, "a": metric(&p)?, "b": metric(&q)?, "test": r }),
                pa.clone(),
            )
        }
        (None, None, Some(path)) => {
            let records: Vec<FewShotRecord> = nonempty(read_jsonl(path)?, path)?;
            let mut shots: Vec<usize> = records.iter().map(|r| r.n_c).collect();
            shots.sort_unstable();
            shots.dedup();
            let mut rows = Vec::new();
            for n_c in shots {
                let v: Vec<f64> = records
                    .iter()
                    .filter(|r| r.n_c == n_c)
                    .map(|r| r.balanced_accuracy)
                    .collect();
                let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let med = median(&v)?;
                println!(
                    "n_c = {n_c:>3}: median {med:.4} (min {lo:.4}, max {hi:.4}, {} runs)",
                    v.len()
                );
                rows.push(
                    json!({ "n_c": n_c, "median": med, "min": lo, "max": hi, "runs": v.len() }),
                );
            }
            (json!({ "fewshot": rows }), path.clone())
        }
        _ => return Err(Error::Usage("give --a and --b, or --fewshot".into())),
    };
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.stats.json", default_out.display())));
    write_json(&out, &value)?;
    ctx.meta(&out, json!({}))
}

fn tissue_params(a: &SegmentTissueArgs) -> TissueParams {
    TissueParams {
        sat_threshold: a.sat_threshold,
        median_kernel: a.median_kernel,
        close_kernel: a.close_kernel,
        min_area: a.min_area,
        downsample: a.downsample,
    }
}

fn segment_tissue(ctx: &Ctx, a: &SegmentTissueArgs) -> Result<()> {
    let params = tissue_params(a);
    params.validate()?;
    ensure_dir(&a.out)?;
    let mut rows = Vec::new();
    for src in slide_sources(&a.input)? {
        let mask = segment_slide(&src.raster()?, &params)?;
        write_pgm(
            &mask.to_gray(),
            a.out.join(format!("{}.tissue.pgm", src.id())),
        )?;
        let fraction = mask.count() as f64 / (mask.width * mask.height).max(1) as f64;
        println!("{}: {:.1}% tissue", src.id(), 100.0 * fraction);
        rows.push(
            json!({ "id": src.id(), "tissue_cells": mask.count(), "tissue_fraction": fraction,
                          "bbox": mask.bbox(), "downsample": mask.downsample }),
        );
    }
    let out = a.out.join("tissue.jsonl");
    write_jsonl(&out, &rows)?;
    ctx.meta(&out, json!({ "slides": rows.len(), "params": params }))
}

fn tile(ctx: &Ctx, a: &TileArgs) -> Result<()> {
    let mut rows = Vec::new();
    for src in slide_sources(&a.input)? {
        let mask = segment_slide(&src.raster()?, &TissueParams::default())?;
        let grid = match a.overlap {
            Some(o) => overlap_tile_grid(&mask, a.side, o)?,
            None => classification_tile_grid(&mask, a.side, a.inclusion.into())?,
        };
        println!("{}: {} tiles", src.id(), grid.len());
        rows.extend(
            grid.iter()
                .map(|t| json!({ "slide_id": src.id(), "x": t.x, "y": t.y, "side": t.side })),
        );
    }
    write_jsonl(&a.out, &rows)?;
    ctx.meta(&a.out, json!({ "tiles": rows.len() }))
}
