//! Optimization: configuration, learning-rate schedule, AdamW, the mixed
//! referring/reasoning sampler, the per-batch training step in both modes,
//! and the binary checkpoint format.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{finalize_answer, mix_seed, ImageRecord, Length};
use crate::decoders::DecoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::losses::{
    bbox_loss_var, compose_var, mask_loss_var, sim_loss_var, text_ce_var, LossReport, LossWeights,
};
use crate::mllm::MllmConfig;
use crate::model::{forward_sample_var, similarity_var, Model, ModelConfig, PreparedImage, Query};
use crate::params::ParamStore;
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    End2end,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub fusion: FusionConfig,
    pub mode: TrainMode,
    /// Referring : reasoning sampling weights.
    pub mix_ratio: [f64; 2],
    pub weight_decay: f64,
    pub seed: u64,
    pub mllm: MllmConfig,
    pub decoder: DecoderConfig,
    pub max_answer_tokens: usize,
    /// Train on this many fixed (record, query) samples drawn once up front
    /// instead of a fresh draw per step.
    pub fixed_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 3e-4,
            warmup_iters: 100,
            total_iters: 2000,
            batch_size: 4,
            weights: LossWeights::default(),
            fusion: FusionConfig::default(),
            mode: TrainMode::End2end,
            mix_ratio: [7.0, 3.0],
            weight_decay: 0.01,
            seed: 0,
            mllm: MllmConfig::default(),
            decoder: DecoderConfig::default(),
            max_answer_tokens: 48,
            fixed_samples: None,
        }
    }
}

impl TrainConfig {
    /// Named presets: `default`, `overfit` (16 fixed samples, 2000 steps)
    /// and `finetune` (500 steps continuing from a checkpoint).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "overfit" => Ok(Self {
                total_iters: 2000,
                batch_size: 4,
                fixed_samples: Some(16),
                ..Self::default()
            }),
            "finetune" => Ok(Self {
                total_iters: 500,
                batch_size: 4,
                fixed_samples: Some(16),
                mode: TrainMode::Finetune,
                ..Self::default()
            }),
            other => Err(Error::invalid(format!("unknown preset `{other}`"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::invalid("lr_max must be positive"));
        }
        if self.total_iters == 0 || self.warmup_iters > self.total_iters {
            return Err(Error::invalid(
                "need 0 < total_iters and warmup_iters <= total_iters",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.mix_ratio.iter().any(|r| !(r.is_finite() && *r >= 0.0))
            || self.mix_ratio.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::invalid(
                "mix_ratio entries must be nonnegative with a positive sum",
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be nonnegative"));
        }
        if self.fixed_samples == Some(0) {
            return Err(Error::invalid("fixed_samples must be >= 1"));
        }
        self.weights.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            mllm: self.mllm.clone(),
            fusion: self.fusion.clone(),
            decoder: self.decoder.clone(),
            max_answer_tokens: self.max_answer_tokens,
        }
    }
}

/// Linear warmup to `lr_max`, then linear decay reaching zero at `total_iters`.
pub fn lr_schedule(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter >= cfg.total_iters {
        return Err(Error::invalid(format!(
            "iteration {iter} outside 0..{}",
            cfg.total_iters
        )));
    }
    let lr = if iter < cfg.warmup_iters {
        cfg.lr_max * (iter + 1) as f64 / cfg.warmup_iters as f64
    } else {
        cfg.lr_max * (cfg.total_iters - iter) as f64 / (cfg.total_iters - cfg.warmup_iters) as f64
    };
    Ok(lr)
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One AdamW update over every trainable tensor that has a gradient.
/// Returns the names skipped because their gradient was not finite.
pub fn adamw_step<'a>(
    stores: impl IntoIterator<Item = &'a mut ParamStore>,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Vec<String> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let mut skipped = Vec::new();
    for store in stores {
        let frozen: Vec<bool> = store.names().map(|n| store.is_frozen(n)).collect();
        for ((name, p), frozen) in store.iter_mut().zip(frozen) {
            if frozen {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                log::warn!("skipping update of `{name}`: non-finite gradient");
                skipped.push(name.to_string());
                continue;
            }
            let m = state
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = state
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((w, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                *w -= lr * weight_decay * *w;
                *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
    skipped
}

pub const REFERRING_TEMPLATES: [&str; 3] = [
    "Please segment the {label} in this image.",
    "Segment the {label}.",
    "Where is the {label}? Please segment it.",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Draw {
    Referring { record: usize, template: usize },
    Reasoning { record: usize, qa: usize },
}

/// Draws referring queries with probability `ratio[0] / (ratio[0] + ratio[1])`.
#[derive(Clone, Debug)]
pub struct MixedSampler {
    rng: ChaCha8Rng,
    referring: usize,
    reasoning: Vec<(usize, usize)>,
    p_referring: f64,
}

impl MixedSampler {
    pub fn new(
        referring_pool: usize,
        reasoning_pool: Vec<(usize, usize)>,
        ratio: [f64; 2],
        seed: u64,
    ) -> Result<Self> {
        if referring_pool == 0 || reasoning_pool.is_empty() {
            return Err(Error::Empty("mixed_sampler: both pools must be nonempty"));
        }
        let total = ratio[0] + ratio[1];
        if !(ratio[0] >= 0.0 && ratio[1] >= 0.0 && total > 0.0) {
            return Err(Error::invalid(
                "mixed_sampler: ratio must be nonnegative with a positive sum",
            ));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            referring: referring_pool,
            reasoning: reasoning_pool,
            p_referring: ratio[0] / total,
        })
    }

    /// Only the reasoning pairs that belong to `record`.
    fn reasoning_for(&self, record: usize) -> Vec<(usize, usize)> {
        self.reasoning
            .iter()
            .copied()
            .filter(|(r, _)| *r == record)
            .collect()
    }

    pub fn next_draw(&mut self) -> Draw {
        if self.rng.random::<f64>() < self.p_referring {
            Draw::Referring {
                record: self.rng.random_range(0..self.referring),
                template: self.rng.random_range(0..REFERRING_TEMPLATES.len()),
            }
        } else {
            let (record, qa) = self.reasoning[self.rng.random_range(0..self.reasoning.len())];
            Draw::Reasoning { record, qa }
        }
    }

    /// A draw tied to a given record; falls back to referring when the
    /// record has no QA pairs.
    pub fn draw_for(&mut self, record: usize) -> Draw {
        let own = self.reasoning_for(record);
        if own.is_empty() || self.rng.random::<f64>() < self.p_referring {
            Draw::Referring {
                record,
                template: self.rng.random_range(0..REFERRING_TEMPLATES.len()),
            }
        } else {
            let (record, qa) = own[self.rng.random_range(0..own.len())];
            Draw::Reasoning { record, qa }
        }
    }
}

/// One (record, query) pair ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub record: usize,
    pub question: String,
    pub answer: String,
    /// Bare-label query used for the reference pass in fine-tune mode.
    pub reference_question: String,
    pub length: Option<Length>,
}

impl TrainSample {
    /// Builds the query for `draw`; `rec` is the record the draw points at.
    pub fn from_draw(draw: Draw, rec: &ImageRecord, num_candidates: usize) -> Self {
        match draw {
            Draw::Referring { record, template } => Self {
                record,
                question: REFERRING_TEMPLATES[template].replace("{label}", &rec.label),
                answer: finalize_answer(
                    &format!("It is the {}.", rec.label),
                    &rec.label,
                    num_candidates,
                ),
                reference_question: rec.label.clone(),
                length: None,
            },
            Draw::Reasoning { record, qa } => {
                let pair = &rec.qa[qa];
                Self {
                    record,
                    question: pair.question.clone(),
                    answer: finalize_answer(&pair.answer, &rec.label, num_candidates),
                    reference_question: rec.label.clone(),
                    length: Some(pair.length),
                }
            }
        }
    }
}

impl Draw {
    pub fn record(self) -> usize {
        match self {
            Draw::Referring { record, .. } | Draw::Reasoning { record, .. } => record,
        }
    }
}

/// A record with its frozen encodings.
#[derive(Clone, Debug)]
pub struct PreparedRecord {
    pub record: ImageRecord,
    pub prep: PreparedImage,
}

pub fn prepare_records(model: &Model, records: &[ImageRecord]) -> Result<Vec<PreparedRecord>> {
    records
        .par_iter()
        .map(|r| {
            Ok(PreparedRecord {
                prep: model.prepare(&r.image_tensor())?,
                record: r.clone(),
            })
        })
        .collect()
}

/// Loss report and summed gradients of one sample.
pub fn sample_gradients(
    model: &Model,
    rec: &PreparedRecord,
    sample: &TrainSample,
    mode: TrainMode,
    w: &LossWeights,
) -> Result<(LossReport, BTreeMap<String, Vec<f64>>)> {
    let vocab = model.vocab();
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, true)?;
    let q = Query::new(&vocab, &sample.question, Some(&sample.answer));
    let s = forward_sample_var(&mut tape, &b, &model.cfg, &vocab, &rec.prep, &q, true)?;
    let logits = s.logits.expect("logits requested");
    let txt = text_ce_var(&mut tape, logits, &q.answer_targets())?;
    let mask = mask_loss_var(&mut tape, s.mask_logits, &rec.record.mask, w)?;
    let bbox = bbox_loss_var(&mut tape, s.bbox, &rec.record.bbox, w)?;

    let sim = if mode == TrainMode::Finetune {
        let rq = Query::new(&vocab, &sample.reference_question, Some(&sample.answer));
        let r = forward_sample_var(&mut tape, &b, &model.cfg, &vocab, &rec.prep, &rq, false)?;
        let reference = similarity_var(&mut tape, &r)?;
        let reference = tape.detach(reference)?;
        let reference = tape.value(reference).to_vec();
        let pred = similarity_var(&mut tape, &s)?;
        Some(sim_loss_var(&mut tape, pred, &reference, w)?)
    } else {
        None
    };
    let total = compose_var(&mut tape, txt, mask.mask, bbox.bbox, sim.map(|v| v.sim))?;
    let grads = tape.backward(total)?;
    let mut acc = BTreeMap::new();
    model.mllm.store.accumulate_grads(&b.mllm, &grads, &mut acc);
    model
        .routers
        .store
        .accumulate_grads(&b.routers, &grads, &mut acc);
    model
        .decoders
        .store
        .accumulate_grads(&b.decoders, &grads, &mut acc);
    let report = LossReport {
        txt: tape.item(txt),
        bce: tape.item(mask.bce),
        dice: tape.item(mask.dice),
        l1: tape.item(bbox.l1),
        giou: tape.item(bbox.giou),
        js: sim.map(|v| tape.item(v.js)),
        mse: sim.map(|v| tape.item(v.mse)),
        mask: tape.item(mask.mask),
        bbox: tape.item(bbox.bbox),
        sim: sim.map(|v| tape.item(v.sim)),
        total: tape.item(total),
    };
    Ok((report, acc))
}

/// Mean loss and mean gradient over a batch. Samples run in parallel; the
/// reduction follows batch order so results do not depend on scheduling.
pub fn batch_gradients(
    model: &Model,
    records: &[PreparedRecord],
    batch: &[TrainSample],
    mode: TrainMode,
    w: &LossWeights,
) -> Result<(LossReport, BTreeMap<String, Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Empty("train_step: empty batch"));
    }
    let per: Vec<(LossReport, BTreeMap<String, Vec<f64>>)> = batch
        .par_iter()
        .map(|s| sample_gradients(model, &records[s.record], s, mode, w))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut report = LossReport::default();
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (r, g) in per {
        report.accumulate(&r);
        for (name, gv) in g {
            let slot = grads.entry(name).or_insert_with(|| vec![0.0; gv.len()]);
            slot.iter_mut().zip(&gv).for_each(|(a, b)| *a += b);
        }
    }
    for g in grads.values_mut() {
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((report.scaled(scale), grads))
}

/// Forward, backward and one optimizer step.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamState,
    records: &[PreparedRecord],
    batch: &[TrainSample],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossReport> {
    let (report, grads) = batch_gradients(model, records, batch, cfg.mode, &cfg.weights)?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite { op: "train_step" });
    }
    adamw_step(model.stores_mut(), &grads, opt, lr, cfg.weight_decay);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iteration: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

/// Training loop state.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub opt: AdamState,
    /// Iterations completed by this trainer.
    pub iteration: usize,
    pub records: Vec<PreparedRecord>,
    sampler: MixedSampler,
    fixed: Option<Vec<TrainSample>>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// `model` must match `cfg`'s architecture. With `fixed_samples = k`
    /// only the first `k` records are used, one fixed query each.
    pub fn new(cfg: TrainConfig, model: Model, records: &[ImageRecord]) -> Result<Self> {
        cfg.validate()?;
        if model.cfg.fusion.n != cfg.fusion.n || model.cfg.mllm != cfg.mllm {
            return Err(Error::invalid(
                "model architecture does not match the training configuration",
            ));
        }
        if records.is_empty() {
            return Err(Error::Empty("trainer: no training records"));
        }
        let used = match cfg.fixed_samples {
            Some(k) => &records[..k.min(records.len())],
            None => records,
        };
        let reasoning: Vec<(usize, usize)> = used
            .iter()
            .enumerate()
            .flat_map(|(i, r)| (0..r.qa.len()).map(move |j| (i, j)))
            .collect();
        let mode_tag: &[u8] = match cfg.mode {
            TrainMode::End2end => b"end2end",
            TrainMode::Finetune => b"finetune",
        };
        let mut sampler = MixedSampler::new(
            used.len(),
            reasoning,
            cfg.mix_ratio,
            mix_seed(cfg.seed, &[b"sampler"]),
        )?;
        let n = cfg.fusion.n;
        let fixed = cfg.fixed_samples.map(|_| {
            (0..used.len())
                .map(|i| TrainSample::from_draw(sampler.draw_for(i), &used[i], n))
                .collect::<Vec<_>>()
        });
        let prepared = prepare_records(&model, used)?;
        Ok(Self {
            order: (0..used.len()).collect(),
            cursor: usize::MAX,
            rng: ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[b"order", mode_tag])),
            cfg,
            model,
            opt: AdamState::default(),
            iteration: 0,
            records: prepared,
            sampler,
            fixed,
        })
    }

    /// The fixed sample pool, when configured.
    pub fn fixed_samples(&self) -> Option<&[TrainSample]> {
        self.fixed.as_deref()
    }

    fn next_batch(&mut self) -> Vec<TrainSample> {
        let n = self.cfg.fusion.n;
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let sample = match &self.fixed {
                Some(pool) => {
                    if self.cursor >= self.order.len() {
                        self.order.shuffle(&mut self.rng);
                        self.cursor = 0;
                    }
                    self.cursor += 1;
                    pool[self.order[self.cursor - 1]].clone()
                }
                None => {
                    let d = self.sampler.next_draw();
                    TrainSample::from_draw(d, &self.records[d.record()].record, n)
                }
            };
            batch.push(sample);
        }
        batch
    }

    /// Runs one iteration and returns its log line.
    pub fn step(&mut self) -> Result<StepLog> {
        let lr = lr_schedule(self.iteration, &self.cfg)?;
        let batch = self.next_batch();
        let loss = train_step(
            &mut self.model,
            &mut self.opt,
            &self.records,
            &batch,
            &self.cfg,
            lr,
        )?;
        let log = StepLog {
            iteration: self.iteration,
            lr,
            loss,
        };
        self.iteration += 1;
        Ok(log)
    }

    pub fn done(&self) -> bool {
        self.iteration >= self.cfg.total_iters
    }

    /// Mean similarity loss over the fixed pool (or one referring query per
    /// record when no pool is configured), without updating anything.
    pub fn mean_sim_loss(&self) -> Result<f64> {
        let samples = self.probe_samples();
        let w = &self.cfg.weights;
        let sims = samples
            .par_iter()
            .map(|s| {
                let (r, _) = sample_gradients(
                    &self.model,
                    &self.records[s.record],
                    s,
                    TrainMode::Finetune,
                    w,
                )?;
                Ok(r.sim.expect("finetune mode reports sim"))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(sims.iter().sum::<f64>() / sims.len() as f64)
    }

    /// The fixed pool, or one referring sample per record.
    pub fn probe_samples(&self) -> Vec<TrainSample> {
        match &self.fixed {
            Some(pool) => pool.clone(),
            None => self
                .records
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    TrainSample::from_draw(
                        Draw::Referring {
                            record: i,
                            template: 0,
                        },
                        &r.record,
                        self.cfg.fusion.n,
                    )
                })
                .collect(),
        }
    }
}

const MAGIC: &[u8; 4] = b"MDSE";
const VERSION: u32 = 1;

/// Everything a checkpoint file holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub opt: Option<AdamState>,
    pub iteration: usize,
    pub train: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointConfig {
    model: ModelConfig,
    train: Option<TrainConfig>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    for store in ck.model.stores() {
        for (name, t) in store.iter() {
            entries.push((name.to_string(), t.shape().to_vec(), t.data().to_vec()));
        }
    }
    entries.push(("meta.iteration".into(), vec![1], vec![ck.iteration as f64]));
    if let Some(opt) = &ck.opt {
        entries.push(("opt.step".into(), vec![1], vec![opt.step as f64]));
        for (name, m) in &opt.m {
            entries.push((format!("opt.m/{name}"), vec![m.len()], m.clone()));
        }
        for (name, v) in &opt.v {
            entries.push((format!("opt.v/{name}"), vec![v.len()], v.clone()));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, data) in &entries {
        put_tensor(&mut out, name, shape, data);
    }
    let cfg = serde_json::to_vec(&CheckpointConfig {
        model: ck.model.cfg.clone(),
        train: ck.train.clone(),
    })?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    Ok(out)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Raw `(name, shape, data)` entries plus the trailing configuration text.
pub type RawCheckpoint = (Vec<(String, Vec<usize>, Vec<f64>)>, String);

pub fn parse_checkpoint(buf: &[u8]) -> Result<RawCheckpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("tensor {i}: name is not UTF-8")))?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= buf.len()))
            .ok_or_else(|| {
                Error::Checkpoint(format!("tensor `{name}`: implausible shape {shape:?}"))
            })?;
        let bytes = r.take(numel * 8, &name)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push((name, shape, data));
    }
    let len = r.u32("config length")? as usize;
    let cfg = String::from_utf8(r.take(len, "config")?.to_vec())
        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok((entries, cfg))
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let (entries, cfg_text) = parse_checkpoint(buf)?;
    let cfg: CheckpointConfig = serde_json::from_str(&cfg_text)
        .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
    let mut model = Model::init(cfg.model, 0)?;
    let mut iteration = None;
    let mut opt = AdamState::default();
    let mut has_opt = false;
    let mut seen = 0usize;
    for (name, shape, data) in entries {
        if name == "meta.iteration" {
            iteration = Some(data[0] as usize);
        } else if name == "opt.step" {
            opt.step = data[0] as u64;
            has_opt = true;
        } else if let Some(n) = name.strip_prefix("opt.m/") {
            opt.m.insert(n.to_string(), data);
        } else if let Some(n) = name.strip_prefix("opt.v/") {
            opt.v.insert(n.to_string(), data);
        } else {
            let slot = model
                .stores_mut()
                .into_iter()
                .find_map(|s| s.get_mut(&name))
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
            if slot.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {shape:?}, model expects {:?}",
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(&data);
            seen += 1;
        }
    }
    let expected = model.param_names().len();
    if seen != expected {
        return Err(Error::Checkpoint(format!(
            "found {seen} model tensors, expected {expected}"
        )));
    }
    Ok(Checkpoint {
        model,
        opt: has_opt.then_some(opt),
        iteration: iteration.ok_or_else(|| Error::Checkpoint("missing meta.iteration".into()))?,
        train: cfg.train,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Tensor names and shapes, in file order.
pub fn inspect_checkpoint(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let (entries, _) = parse_checkpoint(&fs::read(path)?)?;
    Ok(entries.into_iter().map(|(n, s, _)| (n, s)).collect())
}
