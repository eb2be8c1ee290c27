//! Synthetic image/mask records and the question-answer generation
//! pipeline: caption, describe from two perspectives at two lengths,
//! evaluate (keep, revise or drop), transform into QA pairs, then a second
//! describe round with an alternate template.
//!
//! Every language step goes through the [`Oracle`] trait. [`MockOracle`]
//! derives its text from record geometry and is fully deterministic.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};
use crate::metrics::mask2box;
use crate::mllm::{candidate_suffix, strip_placeholders};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Ellipse,
    Rectangle,
    Blob,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Texture {
    Flat,
    Ring,
    Gradient,
    Speckle,
}

struct Category {
    name: &'static str,
    shape: Shape,
    intensity: f32,
    texture: Texture,
}

const CATEGORIES: [Category; 10] = [
    Category {
        name: "lung",
        shape: Shape::Ellipse,
        intensity: 0.06,
        texture: Texture::Flat,
    },
    Category {
        name: "liver",
        shape: Shape::Blob,
        intensity: 0.72,
        texture: Texture::Flat,
    },
    Category {
        name: "kidney",
        shape: Shape::Ellipse,
        intensity: 0.85,
        texture: Texture::Ring,
    },
    Category {
        name: "heart",
        shape: Shape::Blob,
        intensity: 0.9,
        texture: Texture::Gradient,
    },
    Category {
        name: "tumor",
        shape: Shape::Blob,
        intensity: 0.95,
        texture: Texture::Speckle,
    },
    Category {
        name: "polyp",
        shape: Shape::Ellipse,
        intensity: 0.68,
        texture: Texture::Ring,
    },
    Category {
        name: "cyst",
        shape: Shape::Ellipse,
        intensity: 0.04,
        texture: Texture::Ring,
    },
    Category {
        name: "spleen",
        shape: Shape::Ellipse,
        intensity: 0.66,
        texture: Texture::Gradient,
    },
    Category {
        name: "bladder",
        shape: Shape::Rectangle,
        intensity: 0.1,
        texture: Texture::Flat,
    },
    Category {
        name: "vertebra",
        shape: Shape::Rectangle,
        intensity: 0.98,
        texture: Texture::Speckle,
    },
];

const MODALITIES: [&str; 5] = ["CT", "MR", "X-ray", "ultrasound", "endoscopy"];
const BACKGROUND: f32 = 0.35;

pub fn category_names() -> Vec<&'static str> {
    CATEGORIES.iter().map(|c| c.name).collect()
}

fn category(name: &str) -> Option<&'static Category> {
    CATEGORIES.iter().find(|c| c.name == name)
}

/// FNV-1a over the seed and each part, used to derive independent streams.
pub fn mix_seed(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    eat(&seed.to_le_bytes());
    for p in parts {
        eat(p);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perspective {
    Attribute,
    Location,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Length {
    Long,
    Short,
}

impl Length {
    pub fn as_str(self) -> &'static str {
        match self {
            Length::Long => "long",
            Length::Short => "short",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
    pub perspective: Perspective,
    pub length: Length,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    /// Row-major grayscale intensities in `[0, 1]`.
    pub image: Vec<f32>,
    pub mask: Mask,
    pub bbox: BBox,
    pub label: String,
    pub modality: String,
    pub qa: Vec<QAPair>,
}

impl ImageRecord {
    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn image_tensor(&self) -> Tensor {
        let data = self.image.iter().map(|&v| f64::from(v)).collect();
        Tensor::matrix(self.height(), self.width(), data).expect("image matches mask shape")
    }
}

fn paint(rng: &mut ChaCha8Rng, cat: &Category, h: usize, w: usize) -> (Vec<f32>, Mask) {
    let noise = Normal::new(0.0f32, 0.03).expect("valid std");
    let (gx, gy) = (
        rng.random_range(-0.1f32..0.1),
        rng.random_range(-0.1f32..0.1),
    );
    let ra = rng.random_range(6.0f32..14.0);
    let rb = rng.random_range(6.0f32..14.0);
    let reach = ra.max(rb) + 1.0;
    let cy = rng.random_range(reach..h as f32 - reach);
    let cx = rng.random_range(reach..w as f32 - reach);
    let lobes: Vec<(f32, f32, f32)> = (0..3)
        .map(|_| {
            let r = rng.random_range(0.45f32..0.7) * ra.min(rb);
            let off = ra.min(rb) - r;
            let ang = rng.random_range(0.0f32..std::f32::consts::TAU);
            (cy + off * ang.sin(), cx + off * ang.cos(), r)
        })
        .collect();
    let inside = |r: f32, c: f32| -> Option<f32> {
        match cat.shape {
            Shape::Ellipse => {
                let d = ((r - cy) / rb).powi(2) + ((c - cx) / ra).powi(2);
                (d <= 1.0).then_some(d.sqrt())
            }
            Shape::Rectangle => {
                let d = ((r - cy).abs() / rb).max((c - cx).abs() / ra);
                (d <= 1.0).then_some(d)
            }
            Shape::Blob => lobes
                .iter()
                .map(|&(ly, lx, lr)| ((r - ly).powi(2) + (c - lx).powi(2)).sqrt() / lr)
                .filter(|d| *d <= 1.0)
                .min_by(f32::total_cmp),
        }
    };
    let mut image = vec![0.0f32; h * w];
    let mask = Mask::from_fn(h, w, |r, c| {
        inside(r as f32 + 0.5, c as f32 + 0.5).is_some()
    });
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f32 + 0.5, c as f32 + 0.5);
            let base = BACKGROUND + gx * (x / w as f32 - 0.5) + gy * (y / h as f32 - 0.5);
            let v = match inside(y, x) {
                None => base,
                Some(d) => match cat.texture {
                    Texture::Flat => cat.intensity,
                    Texture::Ring => {
                        if d > 0.7 {
                            cat.intensity
                        } else {
                            0.5 * (cat.intensity + BACKGROUND)
                        }
                    }
                    Texture::Gradient => cat.intensity - 0.15 * d,
                    Texture::Speckle => {
                        cat.intensity - 0.12 * f32::from(u8::from((r + c) % 3 == 0))
                    }
                },
            };
            image[r * w + c] = (v + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    (image, mask)
}

/// `count` single-object records with uniformly drawn categories.
pub fn synth_records(
    count: usize,
    seed: u64,
    height: usize,
    width: usize,
) -> Result<Vec<ImageRecord>> {
    if count == 0 {
        return Err(Error::invalid("synth_records: count must be >= 1"));
    }
    if height < 32 || width < 32 {
        return Err(Error::invalid("synth_records: grid must be at least 32x32"));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(seed, &[b"synth", &(i as u64).to_le_bytes()]));
            let cat = &CATEGORIES[rng.random_range(0..CATEGORIES.len())];
            let modality = MODALITIES[rng.random_range(0..MODALITIES.len())];
            let (image, mask) = paint(&mut rng, cat, height, width);
            let bbox = mask2box(&mask)?;
            Ok(ImageRecord {
                id: format!("rec-{i:06}"),
                image,
                mask,
                bbox,
                label: cat.name.to_string(),
                modality: modality.to_string(),
                qa: Vec::new(),
            })
        })
        .collect()
}

/// What the oracle may know about a record: the label, box and modality,
/// plus simple intensity statistics standing in for the pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordInfo {
    pub id: String,
    pub label: String,
    pub bbox: BBox,
    pub modality: String,
    pub inside_mean: f64,
    pub outside_mean: f64,
}

impl RecordInfo {
    pub fn from_record(r: &ImageRecord) -> Self {
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &m) in r.image.iter().zip(r.mask.bits()) {
            if m {
                si += f64::from(v);
                ni += 1;
            } else {
                so += f64::from(v);
                no += 1;
            }
        }
        Self {
            id: r.id.clone(),
            label: r.label.clone(),
            bbox: r.bbox,
            modality: r.modality.clone(),
            inside_mean: si / ni.max(1) as f64,
            outside_mean: so / no.max(1) as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Template {
    Primary,
    Alternate,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Description {
    pub text: String,
    pub perspective: Perspective,
    pub length: Length,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Revise(String),
    Drop,
}

pub trait Oracle: Sync {
    fn caption(&self, info: &RecordInfo) -> Result<String>;
    /// Exactly four descriptions: attribute/location at long/short length.
    fn describe(
        &self,
        caption: &str,
        info: &RecordInfo,
        template: Template,
    ) -> Result<Vec<Description>>;
    fn evaluate(&self, description: &Description, info: &RecordInfo) -> Result<Verdict>;
    fn transform(&self, description: &Description, label: &str) -> Result<QAPair>;
}

/// Knobs for exercising the pipeline's filter and failure paths.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MockPolicy {
    pub drop_perspective: Option<Perspective>,
    pub fail_ids: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MockOracle {
    pub seed: u64,
    pub policy: MockPolicy,
}

impl MockOracle {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            policy: MockPolicy::default(),
        }
    }

    fn pick<'a>(&self, info: &RecordInfo, call: &str, options: &[&'a str]) -> &'a str {
        let h = mix_seed(self.seed, &[info.id.as_bytes(), call.as_bytes()]);
        options[(h % options.len() as u64) as usize]
    }
}

fn region(b: &BBox) -> &'static str {
    let cx = 0.5 * (b.x1 + b.x2);
    let cy = 0.5 * (b.y1 + b.y2);
    let col = if cx < 0.4 {
        0
    } else if cx > 0.6 {
        2
    } else {
        1
    };
    let row = if cy < 0.4 {
        0
    } else if cy > 0.6 {
        2
    } else {
        1
    };
    [
        ["upper-left", "upper", "upper-right"],
        ["left", "central", "right"],
        ["lower-left", "lower", "lower-right"],
    ][row][col]
}

fn outline(label: &str) -> &'static str {
    match category(label).map(|c| c.shape) {
        Some(Shape::Ellipse) => "smooth oval",
        Some(Shape::Rectangle) => "straight-edged",
        Some(Shape::Blob) => "lobulated",
        None => "irregular",
    }
}

fn size_word(b: &BBox) -> &'static str {
    if b.area() > 0.12 {
        "large"
    } else {
        "small"
    }
}

impl Oracle for MockOracle {
    fn caption(&self, info: &RecordInfo) -> Result<String> {
        if self.policy.fail_ids.contains(&info.id) {
            return Err(Error::Oracle(format!(
                "caption request for {} failed",
                info.id
            )));
        }
        // Some captions name the wrong structure; the pipeline must not trust them.
        let named = self.pick(info, "caption", &category_names());
        Ok(format!(
            "A {} image showing a {} structure resembling a {named}.",
            info.modality,
            size_word(&info.bbox)
        ))
    }

    fn describe(
        &self,
        caption: &str,
        info: &RecordInfo,
        template: Template,
    ) -> Result<Vec<Description>> {
        let guess = category_names()
            .into_iter()
            .find(|n| caption.contains(&format!("resembling a {n}")))
            .unwrap_or(info.label.as_str())
            .to_string();
        let tone = if info.inside_mean > info.outside_mean {
            "brighter"
        } else {
            "darker"
        };
        let (shape, place, size) = (
            outline(&info.label),
            region(&info.bbox),
            size_word(&info.bbox),
        );
        let m = &info.modality;
        let texts = match template {
            Template::Primary => [
                (
                    Perspective::Attribute,
                    Length::Long,
                    format!("The {guess} appears {tone} than the surrounding tissue on this {m} scan and has a {shape} outline."),
                ),
                (Perspective::Attribute, Length::Short, format!("The {guess} is the {tone} {shape} region.")),
                (
                    Perspective::Location,
                    Length::Long,
                    format!("The {guess} is a {size} structure located in the {place} part of this {m} image."),
                ),
                (Perspective::Location, Length::Short, format!("The {guess} sits in the {place} area.")),
            ],
            Template::Alternate => [
                (
                    Perspective::Attribute,
                    Length::Long,
                    format!("The {guess} shows a {shape} boundary and a {tone} signal relative to its neighbourhood in the {m} view."),
                ),
                (Perspective::Attribute, Length::Short, format!("The {guess} looks {tone} and {shape}.")),
                (
                    Perspective::Location,
                    Length::Long,
                    format!("The {guess} occupies a {size} area toward the {place} side of the {m} frame."),
                ),
                (Perspective::Location, Length::Short, format!("The {guess} lies toward the {place} side.")),
            ],
        };
        Ok(texts
            .into_iter()
            .map(|(perspective, length, text)| Description {
                text,
                perspective,
                length,
            })
            .collect())
    }

    fn evaluate(&self, d: &Description, info: &RecordInfo) -> Result<Verdict> {
        if self.policy.drop_perspective == Some(d.perspective) {
            return Ok(Verdict::Drop);
        }
        let prefix = format!("The {} ", info.label);
        if d.text.starts_with(&prefix) {
            Ok(Verdict::Keep)
        } else {
            Ok(Verdict::Revise(apply_label_priority(&d.text, &info.label)))
        }
    }

    fn transform(&self, d: &Description, label: &str) -> Result<QAPair> {
        let clause = d
            .text
            .strip_prefix(&format!("The {label} "))
            .ok_or_else(|| {
                Error::Oracle(format!(
                    "description does not start with the label: {}",
                    d.text
                ))
            })?
            .trim_end_matches('.');
        let question = match d.length {
            Length::Long => {
                format!("Which structure {clause}? Please segment it and give its box.")
            }
            Length::Short => format!("Segment what {clause}."),
        };
        Ok(QAPair {
            question,
            answer: format!("It is the {label}."),
            perspective: d.perspective,
            length: d.length,
        })
    }
}

fn replace_word(text: &str, from: &str, to: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find(from) {
        let before_ok = rest[..pos]
            .chars()
            .last()
            .is_none_or(|c| !c.is_alphanumeric());
        let after = &rest[pos + from.len()..];
        let after_ok = after.chars().next().is_none_or(|c| !c.is_alphanumeric());
        out.push_str(&rest[..pos]);
        out.push_str(if before_ok && after_ok { to } else { from });
        rest = after;
    }
    out.push_str(rest);
    out
}

/// Replaces every other category name with `label`: the record label
/// overrides whatever a caption claimed.
pub fn apply_label_priority(text: &str, label: &str) -> String {
    category_names()
        .into_iter()
        .filter(|n| *n != label)
        .fold(text.to_string(), |t, n| replace_word(&t, n, label))
}

/// Normalizes an answer: label-priority fix, the label guaranteed present,
/// and exactly one placeholder per candidate at the end.
pub fn finalize_answer(answer: &str, label: &str, num_candidates: usize) -> String {
    let mut a = apply_label_priority(strip_placeholders(answer).trim(), label);
    if !a.contains(label) {
        a = format!("It is the {label}. {a}").trim().to_string();
    }
    format!("{a} {}", candidate_suffix(num_candidates))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineConfig {
    pub num_candidates: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { num_candidates: 2 }
    }
}

#[derive(Debug)]
pub struct PipelineOutput {
    /// Records with at least one surviving QA pair, in input order.
    pub records: Vec<ImageRecord>,
    pub skipped: Vec<String>,
    pub empty: Vec<String>,
}

fn annotate(
    record: &ImageRecord,
    oracle: &dyn Oracle,
    cfg: &PipelineConfig,
) -> Result<Vec<QAPair>> {
    let info = RecordInfo::from_record(record);
    let caption = oracle.caption(&info)?;
    let mut qa = Vec::new();
    for template in [Template::Primary, Template::Alternate] {
        let descriptions = oracle.describe(&caption, &info, template)?;
        if descriptions.len() != 4 {
            return Err(Error::Oracle(format!(
                "describe returned {} descriptions, expected 4",
                descriptions.len()
            )));
        }
        for d in descriptions {
            let d = match oracle.evaluate(&d, &info)? {
                Verdict::Keep => d,
                Verdict::Revise(text) => Description { text, ..d },
                Verdict::Drop => continue,
            };
            let d = Description {
                text: apply_label_priority(&d.text, &record.label),
                ..d
            };
            let mut pair = oracle.transform(&d, &record.label)?;
            pair.question = apply_label_priority(&pair.question, &record.label);
            pair.answer = finalize_answer(&pair.answer, &record.label, cfg.num_candidates);
            qa.push(pair);
        }
    }
    Ok(qa)
}

pub fn generate_pipeline(
    records: &[ImageRecord],
    oracle: &dyn Oracle,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    if records.is_empty() {
        return Err(Error::Empty("generate_pipeline: no records"));
    }
    if cfg.num_candidates == 0 {
        return Err(Error::invalid(
            "generate_pipeline: num_candidates must be >= 1",
        ));
    }
    let results: Vec<Result<Vec<QAPair>>> = records
        .par_iter()
        .map(|r| annotate(r, oracle, cfg))
        .collect();
    let mut out = PipelineOutput {
        records: Vec::new(),
        skipped: Vec::new(),
        empty: Vec::new(),
    };
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(qa) if qa.is_empty() => out.empty.push(r.id.clone()),
            Ok(qa) => out.records.push(ImageRecord { qa, ..r.clone() }),
            Err(e) => {
                log::warn!("skipping record {}: {e}", r.id);
                out.skipped.push(r.id.clone());
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

/// Seeded shuffle then a partition with sizes `round(n·train)`,
/// `round(n·val)` and the remainder.
pub fn split_dataset(
    records: &[ImageRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Splits> {
    let n = records.len();
    if n < 3 {
        return Err(Error::invalid(format!(
            "split_dataset: need at least 3 records, got {n}"
        )));
    }
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split_dataset: ratios {ratios:?} must be in [0,1] and sum to 1"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, &[b"split"])));
    let n_train = ((n as f64 * a).round() as usize).min(n);
    let n_val = ((n as f64 * b).round() as usize).min(n - n_train);
    let take = |idx: &[usize]| {
        let mut v: Vec<ImageRecord> = idx.iter().map(|&i| records[i].clone()).collect();
        v.sort_by(|x, y| x.id.cmp(&y.id));
        v
    };
    Ok(Splits {
        train: take(&order[..n_train]),
        val: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub images: BTreeMap<String, usize>,
    pub qa: BTreeMap<String, usize>,
    pub total_images: usize,
    pub total_qa: usize,
}

pub fn dataset_stats(records: &[ImageRecord]) -> DatasetStats {
    let mut s = DatasetStats::default();
    for r in records {
        *s.images.entry(r.label.clone()).or_default() += 1;
        *s.qa.entry(r.label.clone()).or_default() += r.qa.len();
        s.total_images += 1;
        s.total_qa += r.qa.len();
    }
    s
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    width: usize,
    height: usize,
    image_b64: String,
    mask_b64: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    label: String,
    modality: String,
    qa: Vec<QAPair>,
}

pub fn record_to_json(r: &ImageRecord) -> Result<String> {
    let bytes: Vec<u8> = r.image.iter().flat_map(|v| v.to_le_bytes()).collect();
    let line = RecordLine {
        id: r.id.clone(),
        width: r.width(),
        height: r.height(),
        image_b64: B64.encode(bytes),
        mask_b64: B64.encode(r.mask.pack()),
        bbox: r.bbox.to_array(),
        label: r.label.clone(),
        modality: r.modality.clone(),
        qa: r.qa.clone(),
    };
    Ok(serde_json::to_string(&line)?)
}

pub fn record_from_json(s: &str) -> Result<ImageRecord> {
    let line: RecordLine = serde_json::from_str(s)?;
    let decode = |what: &str, b: &str| {
        B64.decode(b)
            .map_err(|e| Error::invalid(format!("record {}: bad {what}: {e}", line.id)))
    };
    let img = decode("image_b64", &line.image_b64)?;
    if img.len() != 4 * line.width * line.height {
        return Err(Error::invalid(format!(
            "record {}: image has {} bytes for {}x{}",
            line.id,
            img.len(),
            line.height,
            line.width
        )));
    }
    let image = img
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mask = Mask::unpack(
        line.height,
        line.width,
        &decode("mask_b64", &line.mask_b64)?,
    )?;
    if mask.is_empty() {
        return Err(Error::invalid(format!("record {}: empty mask", line.id)));
    }
    Ok(ImageRecord {
        id: line.id,
        image,
        mask,
        bbox: BBox::from_array(line.bbox)?,
        label: line.label,
        modality: line.modality,
        qa: line.qa,
    })
}

pub fn write_jsonl(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(w, "{}", record_to_json(r)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ImageRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            record_from_json(&line)
                .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_consistent() {
        let a = synth_records(20, 3, 64, 64).unwrap();
        let b = synth_records(20, 3, 64, 64).unwrap();
        assert_eq!(a, b);
        for r in &a {
            assert!(!r.mask.is_empty());
            assert_eq!(r.bbox, mask2box(&r.mask).unwrap());
            assert!(r.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_ne!(a, synth_records(20, 4, 64, 64).unwrap());
        assert!(synth_records(0, 3, 64, 64).is_err());
    }

    #[test]
    fn object_contrasts_with_background() {
        for r in synth_records(50, 8, 64, 64).unwrap() {
            let info = RecordInfo::from_record(&r);
            assert!(
                (info.inside_mean - info.outside_mean).abs() > 0.15,
                "{} {info:?}",
                r.label
            );
        }
    }

    #[test]
    fn label_priority_replaces_whole_words() {
        assert_eq!(
            apply_label_priority("The liver near the kidney.", "lung"),
            "The lung near the lung."
        );
        assert_eq!(
            apply_label_priority("cystic tumors", "lung"),
            "cystic tumors"
        );
        let a = finalize_answer("It is the heart. <cand_1>", "heart", 3);
        assert_eq!(a, "It is the heart. <cand_1><cand_2><cand_3>");
        assert!(finalize_answer("Something else.", "cyst", 1).starts_with("It is the cyst."));
    }

    #[test]
    fn keep_all_yields_eight_pairs() {
        let recs = synth_records(5, 1, 64, 64).unwrap();
        let out =
            generate_pipeline(&recs, &MockOracle::new(1), &PipelineConfig::default()).unwrap();
        assert_eq!(out.records.len(), 5);
        for r in &out.records {
            assert_eq!(r.qa.len(), 8);
            for q in &r.qa {
                assert!(q.answer.contains(&r.label));
                assert_eq!(q.answer.matches("<cand_1>").count(), 1);
                assert_eq!(q.answer.matches("<cand_2>").count(), 1);
            }
        }
    }

    #[test]
    fn drop_and_failure_policies() {
        let recs = synth_records(4, 1, 64, 64).unwrap();
        let mut oracle = MockOracle::new(1);
        oracle.policy.drop_perspective = Some(Perspective::Location);
        oracle.policy.fail_ids.insert(recs[2].id.clone());
        let out = generate_pipeline(&recs, &oracle, &PipelineConfig::default()).unwrap();
        assert_eq!(out.skipped, vec![recs[2].id.clone()]);
        assert_eq!(out.records.len(), 3);
        for r in &out.records {
            assert_eq!(r.qa.len(), 4);
            assert!(r.qa.iter().all(|q| q.perspective == Perspective::Attribute));
        }
    }

    #[test]
    fn split_sizes() {
        let recs = synth_records(100, 2, 32, 32).unwrap();
        let s = split_dataset(&recs, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        let mut ids: Vec<&str> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .map(|r| r.id.as_str())
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 100);
        assert!(split_dataset(&recs[..2], (0.8, 0.1, 0.1), 7).is_err());
        assert!(split_dataset(&recs, (0.8, 0.1, 0.2), 7).is_err());
    }

    #[test]
    fn json_round_trip() {
        let recs = synth_records(3, 5, 64, 64).unwrap();
        let out =
            generate_pipeline(&recs, &MockOracle::new(5), &PipelineConfig::default()).unwrap();
        for r in &out.records {
            let back = record_from_json(&record_to_json(r).unwrap()).unwrap();
            assert_eq!(&back, r);
        }
        assert!(record_from_json("{\"id\":1}").is_err());
    }

    #[test]
    fn stats_conserve_counts() {
        assert_eq!(dataset_stats(&[]), DatasetStats::default());
        let recs = synth_records(30, 5, 32, 32).unwrap();
        let out =
            generate_pipeline(&recs, &MockOracle::new(5), &PipelineConfig::default()).unwrap();
        let s = dataset_stats(&out.records);
        assert_eq!(s.images.values().sum::<usize>(), s.total_images);
        assert_eq!(s.qa.values().sum::<usize>(), s.total_qa);
        assert_eq!(s.total_qa, 8 * 30);
    }
}
