//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero when a criterion outside [`KNOWN_FAILURES`] fails.

use std::process::ExitCode;
use std::time::Instant;

use medisee_core::datagen::{
    generate_pipeline, split_dataset, synth_records, write_jsonl, ImageRecord, MockOracle,
    PipelineConfig,
};
use medisee_core::decoders::{DecoderConfig, MaskLogits};
use medisee_core::eval::training_set_metrics;
use medisee_core::fusion::{fuse, route, FusionConfig, FusionMode, RouterParams};
use medisee_core::geometry::{BBox, Mask};
use medisee_core::gradsuite::run_gradient_suite;
use medisee_core::losses::{
    bbox_loss, compose_end, compose_ft, mask_loss, mask_loss_var, sim_loss, text_ce_var, BoxLoss,
    LossParts, LossWeights,
};
use medisee_core::metrics::{
    aggregate_seg, box_iou, mask2box, mask_iou_dice, EvalSample, DEFAULT_ACC_THRESHOLD,
};
use medisee_core::mllm::{candidate_suffix, CandidateBundle, MllmConfig};
use medisee_core::model::{forward_sample_var, predict_teacher_forced, Model, ModelConfig, Query};
use medisee_core::trainer::{
    load_checkpoint, save_checkpoint, Checkpoint, TrainConfig, Trainer, REFERRING_TEMPLATES,
};
use medisee_core::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

/// Criteria that fail for reasons documented in the README. They still print
/// FAIL but do not fail the test target.
const KNOWN_FAILURES: [usize; 1] = [6];

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn dataset(n: usize, seed: u64) -> Vec<ImageRecord> {
    let base = synth_records(n, seed, 64, 64).unwrap();
    generate_pipeline(&base, &MockOracle::new(seed), &PipelineConfig::default())
        .unwrap()
        .records
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let p: f64 = rng.random_range(0.05..0.95);
    Mask::new(h, w, (0..h * w).map(|_| rng.random_bool(p)).collect()).unwrap()
}

fn random_box(rng: &mut ChaCha8Rng, min_side: f64) -> BBox {
    let side = |rng: &mut ChaCha8Rng| {
        let s = rng.random_range(min_side..=1.0);
        let a = rng.random_range(0.0..=1.0 - s);
        (a, a + s)
    };
    let ((x1, x2), (y1, y2)) = (side(rng), side(rng));
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn gradient_suite() -> Check {
    let t = Instant::now();
    let r = run_gradient_suite(0, 1e-4).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    let worst = r
        .entries
        .iter()
        .filter(|e| !e.passed)
        .map(|e| &e.name)
        .collect::<Vec<_>>();
    ensure(
        r.passed(),
        format!(
            "failing modules {worst:?}, max rel err {:.2e}",
            r.max_rel_error()
        ),
    )?;
    ensure(secs < 120.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} modules, max rel err {:.2e}, {secs:.1}s",
        r.entries.len(),
        r.max_rel_error()
    ))
}

fn loss_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = LossWeights::default();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (h, wd) = (rng.random_range(2..12), rng.random_range(2..12));
        let mut m = random_mask(&mut rng, h, wd);
        m.set(0, 0, true);
        let logits = Tensor::matrix(
            h,
            wd,
            m.bits()
                .iter()
                .map(|&v| if v { 40.0 } else { -40.0 })
                .collect(),
        )
        .unwrap();
        let ml = mask_loss(&MaskLogits::new(logits), &m, &w).map_err(err)?;
        let b = random_box(&mut rng, 0.05);
        let bl = bbox_loss(&b, &b, &w).map_err(err)?;
        worst = worst.max(ml.dice).max(bl.giou);
    }
    ensure(
        worst <= 1e-6,
        format!("perfect-prediction loss {worst:.2e}"),
    )?;

    let mut js_asym: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..80);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        let (a, b) = (
            sim_loss(&p, &q, &w).map_err(err)?,
            sim_loss(&q, &p, &w).map_err(err)?,
        );
        js_asym = js_asym.max((a.js - b.js).abs());
        ensure(
            a.js <= std::f64::consts::LN_2,
            format!("js {} above ln 2", a.js),
        )?;

        let same = sim_loss(&p, &p, &w).map_err(err)?;
        let end = compose_end(&LossParts {
            txt: Some(rng.random_range(0.0..5.0)),
            mask: Some(
                mask_loss(
                    &MaskLogits::new(Tensor::matrix(1, n, p.clone()).unwrap()),
                    &random_mask(&mut rng, 1, n),
                    &w,
                )
                .map_err(err)?,
            ),
            bbox: Some(BoxLoss {
                l1: 0.25,
                giou: 0.5,
                bbox: 0.75,
            }),
        })
        .map_err(err)?;
        ensure(
            compose_ft(&end, &same).total == end.total,
            "L_ft differs from L_end at matching maps",
        )?;
    }
    ensure(js_asym <= 1e-12, format!("js asymmetry {js_asym:.2e}"))?;
    Ok(format!(
        "max perfect loss {worst:.1e}, js asymmetry {js_asym:.1e}"
    ))
}

fn naive_overlap(a: &Mask, b: &Mask) -> (f64, f64) {
    let (mut i, mut u, mut na, mut nb) = (0usize, 0usize, 0usize, 0usize);
    for r in 0..a.height() {
        for c in 0..a.width() {
            let (x, y) = (a.get(r, c), b.get(r, c));
            i += (x && y) as usize;
            u += (x || y) as usize;
            na += x as usize;
            nb += y as usize;
        }
    }
    let iou = if u == 0 { 1.0 } else { i as f64 / u as f64 };
    let dice = if na + nb == 0 {
        1.0
    } else {
        2.0 * i as f64 / (na + nb) as f64
    };
    (iou, dice)
}

/// Pixel centres of an `n`-cell grid that fall inside `[lo, hi]`.
fn covered(lo: f64, hi: f64, n: usize) -> Vec<bool> {
    (0..n)
        .map(|k| (k as f64 + 0.5) / n as f64)
        .map(|c| c >= lo && c <= hi)
        .collect()
}

fn raster_box_iou(a: &BBox, b: &BBox, n: usize) -> f64 {
    let axis = |a0, a1, b0, b1| {
        let (ca, cb) = (covered(a0, a1, n), covered(b0, b1, n));
        let both = ca.iter().zip(&cb).filter(|(x, y)| **x && **y).count();
        (
            ca.iter().filter(|x| **x).count(),
            cb.iter().filter(|x| **x).count(),
            both,
        )
    };
    let (ax, bx, ix) = axis(a.x1, a.x2, b.x1, b.x2);
    let (ay, by, iy) = axis(a.y1, a.y2, b.y1, b.y2);
    let inter = (ix * iy) as f64;
    inter / ((ax * ay + bx * by) as f64 - inter)
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut box_err: f64 = 0.0;
    let mut samples = Vec::new();
    for _ in 0..1000 {
        let (a, b) = (random_mask(&mut rng, 8, 8), random_mask(&mut rng, 8, 8));
        let got = mask_iou_dice(&a, &b).map_err(err)?;
        ensure(
            got == naive_overlap(&a, &b),
            format!("iou/dice {got:?} vs {:?}", naive_overlap(&a, &b)),
        )?;
        if !a.is_empty() {
            let bx = mask2box(&a).map_err(err)?;
            let rows: Vec<usize> = (0..8).filter(|&r| (0..8).any(|c| a.get(r, c))).collect();
            let cols: Vec<usize> = (0..8).filter(|&c| (0..8).any(|r| a.get(r, c))).collect();
            let want = [
                cols[0],
                rows[0],
                cols[cols.len() - 1] + 1,
                rows[rows.len() - 1] + 1,
            ]
            .map(|v| v as f64 / 8.0);
            ensure(
                bx.to_array() == want,
                format!("mask2box {:?} vs {want:?}", bx.to_array()),
            )?;
        }
        let (p, q) = (random_box(&mut rng, 0.1), random_box(&mut rng, 0.1));
        box_err = box_err.max((box_iou(&p, &q) - raster_box_iou(&p, &q, 16384)).abs());
        samples.push(EvalSample {
            pred_mask: a,
            gt_mask: b,
            pred_box: None,
            gt_box: q,
            category: "x".into(),
            length: None,
        });
    }
    ensure(box_err <= 2e-3, format!("box iou vs raster {box_err:.2e}"))?;
    let base = aggregate_seg(&samples).map_err(err)?;
    for _ in 0..100 {
        samples.shuffle(&mut rng);
        let got = aggregate_seg(&samples).map_err(err)?;
        ensure(
            got.1 == base.1 && got.2 == base.2,
            format!("shuffled gIoU/cIoU {got:?} vs {base:?}"),
        )?;
    }
    Ok(format!(
        "pixel metrics exact, box raster err {box_err:.1e}, 100 shuffles stable"
    ))
}

fn tiny_model_config(fusion: FusionConfig, decoder: DecoderConfig) -> ModelConfig {
    ModelConfig {
        mllm: MllmConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_hidden: 32,
            patch_size: 16,
            ..MllmConfig::default()
        },
        fusion,
        decoder,
        ..ModelConfig::default()
    }
}

fn referring_query(model: &Model, rec: &ImageRecord) -> Query {
    let question = REFERRING_TEMPLATES[0].replace("{label}", &rec.label);
    let answer = format!(
        "It is the {}. {}",
        rec.label,
        candidate_suffix(model.cfg.fusion.n)
    );
    Query::new(&model.vocab(), &question, Some(&answer))
}

fn fusion_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..1000u64 {
        let n = rng.random_range(1..6);
        let d = rng.random_range(1..10);
        let cfg = FusionConfig {
            n,
            mode: FusionMode::Soft,
            router_hidden: rng.random_range(1..20),
        };
        let p = RouterParams::init(cfg.clone(), d, i).map_err(err)?;
        let scale = rng.random_range(0.1..50.0);
        let data = (0..n * d)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        let bundle = CandidateBundle {
            candidates: Tensor::matrix(n, d, data).unwrap(),
            h_img: None,
            h_txt: Tensor::zeros(&[1, d]),
        };
        let (ws, wd) = route(&bundle, &p, &cfg).map_err(err)?;
        for w in [&ws, &wd] {
            ensure(
                (w.iter().sum::<f64>() - 1.0).abs() <= 1e-6 && w.iter().all(|&v| v >= 0.0),
                format!("weights {w:?}"),
            )?;
        }
        if n == 1 {
            let hard = FusionConfig {
                mode: FusionMode::Hard,
                ..cfg.clone()
            };
            let (hs, hd) = route(&bundle, &p, &hard).map_err(err)?;
            ensure(
                fuse(&bundle, &ws, &wd).map_err(err)? == fuse(&bundle, &hs, &hd).map_err(err)?,
                "n=1 soft and hard fusion differ",
            )?;
        }
    }

    let recs = dataset(6, 4);
    for (k, rec) in recs.iter().enumerate() {
        let soft_cfg = FusionConfig {
            n: 1,
            ..FusionConfig::default()
        };
        let soft = Model::init(
            tiny_model_config(soft_cfg, DecoderConfig::default()),
            k as u64,
        )
        .map_err(err)?;
        let mut hard = soft.clone();
        hard.cfg.fusion.mode = FusionMode::Hard;
        let prep = soft.prepare(&rec.image_tensor()).map_err(err)?;
        let q = referring_query(&soft, rec);
        ensure(
            predict_teacher_forced(&soft, &prep, &q).map_err(err)?
                == predict_teacher_forced(&hard, &prep, &q).map_err(err)?,
            "n=1 soft and hard models disagree",
        )?;

        let model = Model::init(
            tiny_model_config(
                FusionConfig {
                    mode: FusionMode::Hard,
                    ..FusionConfig::default()
                },
                DecoderConfig::default(),
            ),
            k as u64,
        )
        .map_err(err)?;
        let q = referring_query(&model, rec);
        let prep = model.prepare(&rec.image_tensor()).map_err(err)?;
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, true).map_err(err)?;
        let s = forward_sample_var(&mut tape, &b, &model.cfg, &model.vocab(), &prep, &q, true)
            .map_err(err)?;
        let txt = text_ce_var(&mut tape, s.logits.unwrap(), &q.answer_targets()).map_err(err)?;
        let m = mask_loss_var(&mut tape, s.mask_logits, &rec.mask, &LossWeights::default())
            .map_err(err)?;
        let bx = tape.sum(s.bbox).map_err(err)?;
        let total = tape.add(txt, m.mask).map_err(err)?;
        let total = tape.add(total, bx).map_err(err)?;
        let g = tape.backward(total).map_err(err)?;
        for (name, v) in b.routers.iter() {
            ensure(
                g.get(v).data().iter().all(|&x| x == 0.0),
                format!("hard-mode gradient on {name}"),
            )?;
        }
    }
    Ok("1000 routings on the simplex, n=1 soft == hard, hard-mode router grads zero".into())
}

fn mask_grad_on_box_head(model: &Model, rec: &ImageRecord) -> Result<f64, String> {
    let prep = model.prepare(&rec.image_tensor()).map_err(err)?;
    let q = referring_query(model, rec);
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, true).map_err(err)?;
    let s = forward_sample_var(&mut tape, &b, &model.cfg, &model.vocab(), &prep, &q, false)
        .map_err(err)?;
    let m =
        mask_loss_var(&mut tape, s.mask_logits, &rec.mask, &LossWeights::default()).map_err(err)?;
    let g = tape.backward(m.mask).map_err(err)?;
    Ok(b.decoders
        .iter()
        .filter(|(n, _)| n.starts_with("bbox."))
        .map(|(_, v)| g.get(v).data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt())
}

fn box_gradient_flow() -> Check {
    let recs = dataset(10, 7);
    let mut smallest = f64::INFINITY;
    for (seed, rec) in recs.iter().enumerate() {
        let with = |use_box| {
            let dec = DecoderConfig {
                use_box,
                ..DecoderConfig::default()
            };
            Model::init(tiny_model_config(FusionConfig::default(), dec), seed as u64).map_err(err)
        };
        let on = mask_grad_on_box_head(&with(true)?, rec)?;
        let off = mask_grad_on_box_head(&with(false)?, rec)?;
        ensure(
            on > 0.0,
            format!("zero gradient with the box channel on (sample {seed})"),
        )?;
        ensure(
            off == 0.0,
            format!("gradient {off:e} with the box channel off"),
        )?;
        smallest = smallest.min(on);
    }
    Ok(format!(
        "{} batches, min norm with box {smallest:.2e}, exactly 0 without",
        recs.len()
    ))
}

fn datagen_structure() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    for seed in 0..4u64 {
        let n = 20 + 13 * seed as usize;
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        let recs = dataset(n, seed);
        write_jsonl(&a, &recs).map_err(err)?;
        write_jsonl(&b, &dataset(n, seed)).map_err(err)?;
        ensure(
            std::fs::read(&a).map_err(err)? == std::fs::read(&b).map_err(err)?,
            format!("seed {seed}: bytes differ"),
        )?;
        for r in &recs {
            ensure(
                r.qa.len() <= 8,
                format!("{} has {} QA pairs", r.id, r.qa.len()),
            )?;
            ensure(
                r.qa.iter().all(|qa| qa.answer.contains(&r.label)),
                format!("{}: answer without label", r.id),
            )?;
        }
        let s = split_dataset(&recs, (0.8, 0.1, 0.1), seed).map_err(err)?;
        let k = recs.len() as f64;
        for (got, frac) in [
            (s.train.len(), 0.8),
            (s.val.len(), 0.1),
            (s.test.len(), 0.1),
        ] {
            ensure(
                (got as f64 - frac * k).abs() <= 1.0,
                format!("split {got} of {k}"),
            )?;
        }
    }
    Ok("byte-identical JSONL, labels in answers, <=8 QA, 80/10/10".into())
}

fn checkpoint_round_trip() -> Check {
    let recs = dataset(6, 9);
    let cfg = TrainConfig {
        total_iters: 3,
        warmup_iters: 1,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let model = Model::init(cfg.model_config(), 9).map_err(err)?;
    let mut tr = Trainer::new(cfg.clone(), model, &recs).map_err(err)?;
    while !tr.done() {
        tr.step().map_err(err)?;
    }
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("m.ckpt");
    save_checkpoint(
        &path,
        &Checkpoint {
            iteration: tr.iteration,
            opt: Some(tr.opt.clone()),
            model: tr.model.clone(),
            train: Some(cfg),
        },
    )
    .map_err(err)?;
    let back = load_checkpoint(&path).map_err(err)?;
    ensure(back.model == tr.model, "parameters differ after reload")?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..100 {
        let rec = &recs[i % recs.len()];
        let image = Tensor::new(
            vec![64, 64],
            (0..64 * 64).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .map_err(err)?;
        let qa = &rec.qa[rng.random_range(0..rec.qa.len())];
        let q = Query::new(&tr.model.vocab(), &qa.question, Some(&qa.answer));
        let a = predict_teacher_forced(&tr.model, &tr.model.prepare(&image).map_err(err)?, &q)
            .map_err(err)?;
        let b = predict_teacher_forced(&back.model, &back.model.prepare(&image).map_err(err)?, &q)
            .map_err(err)?;
        let bits = |p: &medisee_core::model::Prediction| {
            let mut v: Vec<u64> = p
                .mask_logits
                .grid
                .data()
                .iter()
                .map(|x| x.to_bits())
                .collect();
            v.extend(
                p.bbox
                    .to_array()
                    .iter()
                    .chain(&p.similarity)
                    .chain(&p.w_seg)
                    .chain(&p.w_det)
                    .map(|x| x.to_bits()),
            );
            v
        };
        ensure(bits(&a) == bits(&b), format!("forward {i} differs"))?;
    }
    Ok("100 forwards bitwise identical".into())
}

struct Overfit {
    seed: u64,
    trainer: Trainer,
    dice: f64,
    box_iou: f64,
    secs: f64,
}

fn overfit(seed: u64) -> Result<Overfit, String> {
    let recs = dataset(16, seed);
    let mut cfg = TrainConfig::preset("overfit").map_err(err)?;
    cfg.seed = seed;
    let model = Model::init(cfg.model_config(), seed).map_err(err)?;
    let t = Instant::now();
    let mut tr = Trainer::new(cfg, model, &recs).map_err(err)?;
    while !tr.done() {
        tr.step().map_err(err)?;
    }
    let secs = t.elapsed().as_secs_f64();
    let (row, _) = training_set_metrics(&tr, DEFAULT_ACC_THRESHOLD).map_err(err)?;
    Ok(Overfit {
        seed,
        trainer: tr,
        dice: row.dice,
        box_iou: row.box_iou,
        secs,
    })
}

fn overfit_experiment(runs: &[Overfit]) -> Check {
    let summary = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: dice {:.1} box {:.1} {:.0}s",
                r.seed, r.dice, r.box_iou, r.secs
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    let ok = runs
        .iter()
        .all(|r| r.dice >= 90.0 && r.box_iou >= 70.0 && r.secs < 600.0);
    ensure(ok, summary.clone())?;
    Ok(summary)
}

fn finetune_experiment(base: &Overfit) -> Check {
    let mut cfg = TrainConfig::preset("finetune").map_err(err)?;
    cfg.seed = base.seed;
    let recs: Vec<ImageRecord> = base
        .trainer
        .records
        .iter()
        .map(|r| r.record.clone())
        .collect();
    let mut tr = Trainer::new(cfg, base.trainer.model.clone(), &recs).map_err(err)?;
    let sim0 = tr.mean_sim_loss().map_err(err)?;
    let (before, _) = training_set_metrics(&tr, DEFAULT_ACC_THRESHOLD).map_err(err)?;
    while !tr.done() {
        tr.step().map_err(err)?;
    }
    let sim1 = tr.mean_sim_loss().map_err(err)?;
    let (after, _) = training_set_metrics(&tr, DEFAULT_ACC_THRESHOLD).map_err(err)?;
    let msg = format!(
        "sim {sim0:.3} -> {sim1:.4} ({:.1}%), dice {:.2} -> {:.2}",
        100.0 * sim1 / sim0,
        before.dice,
        after.dice
    );
    ensure(
        sim1 < 0.1 * sim0 && after.dice >= before.dice - 2.0,
        msg.clone(),
    )?;
    Ok(msg)
}

struct Tally {
    failed: Vec<usize>,
}

impl Tally {
    fn report(&mut self, n: usize, name: &str, r: Check) {
        match r {
            Ok(msg) => {
                println!("PASS {n} {name}: {msg}");
                if KNOWN_FAILURES.contains(&n) {
                    println!("     criterion {n} is listed as a known failure but passed");
                }
            }
            Err(msg) => {
                let note = if KNOWN_FAILURES.contains(&n) {
                    " (known failure)"
                } else {
                    ""
                };
                println!("FAIL {n} {name}: {msg}{note}");
                self.failed.push(n);
            }
        }
    }
}

fn main() -> ExitCode {
    let mut t = Tally { failed: Vec::new() };
    t.report(1, "gradient suite", gradient_suite());
    t.report(2, "loss identities", loss_identities());
    t.report(3, "metric oracles", metric_oracles());
    t.report(4, "fusion invariants", fusion_invariants());

    let runs: Result<Vec<Overfit>, String> = (0..3).map(overfit).collect();
    match runs {
        Ok(runs) => {
            t.report(5, "overfit", overfit_experiment(&runs));
            t.report(6, "finetune", finetune_experiment(&runs[0]));
        }
        Err(e) => {
            t.report(5, "overfit", Err(e.clone()));
            t.report(6, "finetune", Err(e));
        }
    }

    t.report(7, "box gradient flow", box_gradient_flow());
    t.report(8, "datagen", datagen_structure());
    t.report(9, "checkpoint round trip", checkpoint_round_trip());

    println!(
        "{}/9 criteria pass; failing: {:?}",
        9 - t.failed.len(),
        t.failed
    );
    if t.failed.iter().all(|n| KNOWN_FAILURES.contains(n)) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
