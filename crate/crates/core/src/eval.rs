//! Greedy-decoding evaluation of a model over a set of records.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::ImageRecord;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};
use crate::metrics::{
    box_iou, mask2box, mask_iou_dice, metric_report, metric_row, EvalSample, MetricReport,
    MetricRow,
};
use crate::model::{predict, Model};
use crate::trainer::{Trainer, REFERRING_TEMPLATES};

/// Where the scored box comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxSource {
    #[default]
    Decoder,
    /// Tightest box around the predicted mask.
    Mask2box,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct EvalOptions {
    /// Score the ground truth as the prediction.
    pub oracle: bool,
    pub box_source: BoxSource,
    pub acc_threshold: f64,
}

/// One evaluation query against one record.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalQuery {
    pub record: usize,
    pub question: String,
    /// `long`, `short` or `referring`.
    pub length: String,
}

/// Every reasoning question of each record plus one referring question.
pub fn eval_queries(records: &[ImageRecord]) -> Vec<EvalQuery> {
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        for qa in &r.qa {
            out.push(EvalQuery {
                record: i,
                question: qa.question.clone(),
                length: qa.length.as_str().to_string(),
            });
        }
        out.push(EvalQuery {
            record: i,
            question: REFERRING_TEMPLATES[0].replace("{label}", &r.label),
            length: "referring".into(),
        });
    }
    out
}

/// Per-sample line of the dump file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpLine {
    pub id: String,
    pub question: String,
    pub answer: Option<String>,
    pub category: String,
    pub length: String,
    pub height: usize,
    pub width: usize,
    pub pred_mask_b64: String,
    pub gt_mask_b64: String,
    pub pred_box: Option<[f64; 4]>,
    pub gt_box: [f64; 4],
    pub dice: f64,
    pub iou: f64,
    pub box_iou: f64,
}

impl DumpLine {
    pub fn to_sample(&self) -> Result<EvalSample> {
        let mask = |what: &str, s: &str| -> Result<Mask> {
            let bytes = B64
                .decode(s)
                .map_err(|e| Error::invalid(format!("dump {}: bad {what}: {e}", self.id)))?;
            Mask::unpack(self.height, self.width, &bytes)
        };
        Ok(EvalSample {
            pred_mask: mask("pred_mask_b64", &self.pred_mask_b64)?,
            gt_mask: mask("gt_mask_b64", &self.gt_mask_b64)?,
            pred_box: self.pred_box.map(BBox::from_array).transpose()?,
            gt_box: BBox::from_array(self.gt_box)?,
            category: self.category.clone(),
            length: Some(self.length.clone()),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub dump: Vec<DumpLine>,
    /// Queries whose decoded answer lacked a candidate token.
    pub missing_candidates: usize,
}

/// Runs greedy prediction for every query and scores the results. An answer
/// without all candidate tokens counts as an empty mask and no box.
pub fn evaluate(model: &Model, records: &[ImageRecord], opts: &EvalOptions) -> Result<Evaluation> {
    let queries = eval_queries(records);
    if queries.is_empty() {
        return Err(Error::Empty("evaluate: no records"));
    }
    let preps = if opts.oracle {
        Vec::new()
    } else {
        records
            .par_iter()
            .map(|r| model.prepare(&r.image_tensor()))
            .collect::<Result<Vec<_>>>()?
    };

    let scored = queries
        .par_iter()
        .map(|q| -> Result<(DumpLine, EvalSample, bool)> {
            let rec = &records[q.record];
            let (answer, mask, dec_box, missing) = if opts.oracle {
                (None, rec.mask.clone(), Some(rec.bbox), false)
            } else {
                match predict(model, &preps[q.record], &q.question) {
                    Ok(p) => (Some(p.answer), p.mask, Some(p.bbox), false),
                    Err(Error::CandidateAbsent(_)) | Err(Error::DuplicateCandidate(_)) => {
                        (None, Mask::empty(rec.height(), rec.width()), None, true)
                    }
                    Err(e) => return Err(e),
                }
            };
            let pred_box = match opts.box_source {
                BoxSource::Decoder => dec_box,
                BoxSource::Mask2box => mask2box(&mask).ok(),
            };
            let (iou, dice) = mask_iou_dice(&mask, &rec.mask)?;
            let sample = EvalSample {
                pred_mask: mask,
                gt_mask: rec.mask.clone(),
                pred_box,
                gt_box: rec.bbox,
                category: rec.label.clone(),
                length: Some(q.length.clone()),
            };
            let line = DumpLine {
                id: rec.id.clone(),
                question: q.question.clone(),
                answer,
                category: rec.label.clone(),
                length: q.length.clone(),
                height: rec.height(),
                width: rec.width(),
                pred_mask_b64: B64.encode(sample.pred_mask.pack()),
                gt_mask_b64: B64.encode(rec.mask.pack()),
                pred_box: pred_box.map(|b| b.to_array()),
                gt_box: rec.bbox.to_array(),
                dice,
                iou,
                box_iou: pred_box.map_or(0.0, |b| box_iou(&b, &rec.bbox)),
            };
            Ok((line, sample, missing))
        })
        .collect::<Result<Vec<_>>>()?;

    let missing_candidates = scored.iter().filter(|s| s.2).count();
    let (dump, samples): (Vec<_>, Vec<_>) = scored.into_iter().map(|(l, s, _)| (l, s)).unzip();
    Ok(Evaluation {
        report: metric_report(&samples, opts.acc_threshold)?,
        dump,
        missing_candidates,
    })
}

/// Greedy-decoding metrics of a trainer's model on its own probe samples.
pub fn training_set_metrics(trainer: &Trainer, acc_threshold: f64) -> Result<(MetricRow, usize)> {
    let scored = trainer
        .probe_samples()
        .par_iter()
        .map(|s| -> Result<(EvalSample, bool)> {
            let r = &trainer.records[s.record];
            let (mask, pred_box, missing) = match predict(&trainer.model, &r.prep, &s.question) {
                Ok(p) => (p.mask, Some(p.bbox), false),
                Err(Error::CandidateAbsent(_)) | Err(Error::DuplicateCandidate(_)) => {
                    (Mask::empty(r.record.height(), r.record.width()), None, true)
                }
                Err(e) => return Err(e),
            };
            Ok((
                EvalSample {
                    pred_mask: mask,
                    gt_mask: r.record.mask.clone(),
                    pred_box,
                    gt_box: r.record.bbox,
                    category: r.record.label.clone(),
                    length: s.length.map(|l| l.as_str().to_string()),
                },
                missing,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let missing = scored.iter().filter(|s| s.1).count();
    let samples: Vec<EvalSample> = scored.into_iter().map(|s| s.0).collect();
    Ok((metric_row(&samples, acc_threshold)?, missing))
}

/// Recomputes a report from dump lines.
pub fn report_from_dump(lines: &[DumpLine], acc_threshold: f64) -> Result<MetricReport> {
    let samples = lines
        .iter()
        .map(DumpLine::to_sample)
        .collect::<Result<Vec<_>>>()?;
    metric_report(&samples, acc_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_pipeline, synth_records, MockOracle, PipelineConfig};
    use crate::metrics::DEFAULT_ACC_THRESHOLD;
    use crate::model::ModelConfig;

    fn records(n: usize) -> Vec<ImageRecord> {
        let recs = synth_records(n, 4, 64, 64).unwrap();
        generate_pipeline(&recs, &MockOracle::new(4), &PipelineConfig::default())
            .unwrap()
            .records
    }

    #[test]
    fn oracle_mode_scores_perfectly() {
        let recs = records(3);
        let model = Model::init(ModelConfig::default(), 0).unwrap();
        let opts = EvalOptions {
            oracle: true,
            acc_threshold: DEFAULT_ACC_THRESHOLD,
            ..Default::default()
        };
        let ev = evaluate(&model, &recs, &opts).unwrap();
        let o = &ev.report.overall;
        assert_eq!(
            (o.dice, o.giou, o.ciou, o.box_iou, o.acc),
            (100.0, 100.0, 100.0, 100.0, 100.0)
        );
        assert_eq!(o.count, eval_queries(&recs).len());
        assert!(ev.report.per_length.contains_key("referring"));
    }

    #[test]
    fn dump_recount_matches_and_runs_are_identical() {
        let recs = records(2);
        let model = Model::init(ModelConfig::default(), 1).unwrap();
        let opts = EvalOptions {
            acc_threshold: DEFAULT_ACC_THRESHOLD,
            ..Default::default()
        };
        let a = evaluate(&model, &recs[..1], &opts).unwrap();
        let b = evaluate(&model, &recs[..1], &opts).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.dump, b.dump);
        assert_eq!(
            report_from_dump(&a.dump, DEFAULT_ACC_THRESHOLD).unwrap(),
            a.report
        );
    }
}
