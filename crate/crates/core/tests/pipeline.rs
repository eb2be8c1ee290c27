use medisee_core::datagen::{
    generate_pipeline, read_jsonl, split_dataset, synth_records, write_jsonl, ImageRecord,
    MockOracle, PipelineConfig,
};
use medisee_core::decoders::DecoderConfig;
use medisee_core::losses::{mask_loss_var, LossWeights};
use medisee_core::mllm::MllmConfig;
use medisee_core::model::{forward_sample_var, Model, ModelConfig, Query};
use medisee_core::trainer::{TrainConfig, Trainer, REFERRING_TEMPLATES};
use medisee_core::Tape;

fn dataset(n: usize, seed: u64) -> Vec<ImageRecord> {
    let base = synth_records(n, seed, 64, 64).unwrap();
    generate_pipeline(&base, &MockOracle::new(seed), &PipelineConfig::default())
        .unwrap()
        .records
}

fn small_model_config(use_box: bool) -> ModelConfig {
    ModelConfig {
        mllm: MllmConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_hidden: 32,
            patch_size: 16,
            ..MllmConfig::default()
        },
        decoder: DecoderConfig {
            use_box,
            ..DecoderConfig::default()
        },
        ..ModelConfig::default()
    }
}

#[test]
fn jsonl_files_are_reproducible_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let recs = dataset(12, 7);
    write_jsonl(&a, &recs).unwrap();
    write_jsonl(&b, &dataset(12, 7)).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(read_jsonl(&a).unwrap(), recs);
    for r in &recs {
        assert!(r.qa.len() <= 8);
        assert!(r.qa.iter().all(|qa| qa.answer.contains(&r.label)));
    }
    let s = split_dataset(&recs, (0.8, 0.1, 0.1), 7).unwrap();
    assert_eq!(s.train.len() + s.val.len() + s.test.len(), recs.len());
}

/// Gradient norm of the mask loss with respect to the box-decoder weights.
fn mask_grad_on_box_head(model: &Model, rec: &ImageRecord) -> f64 {
    let vocab = model.vocab();
    let prep = model.prepare(&rec.image_tensor()).unwrap();
    let question = REFERRING_TEMPLATES[0].replace("{label}", &rec.label);
    let q = Query::new(
        &vocab,
        &question,
        Some(&format!("It is the {}. <cand_1><cand_2>", rec.label)),
    );
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, true).unwrap();
    let s = forward_sample_var(&mut tape, &b, &model.cfg, &vocab, &prep, &q, false).unwrap();
    let m = mask_loss_var(&mut tape, s.mask_logits, &rec.mask, &LossWeights::default()).unwrap();
    let g = tape.backward(m.mask).unwrap();
    b.decoders
        .iter()
        .filter(|(n, _)| n.starts_with("bbox."))
        .map(|(_, v)| g.get(v).data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

#[test]
fn mask_loss_reaches_box_head_only_through_box_prompt() {
    let recs = dataset(4, 3);
    for (seed, rec) in recs.iter().enumerate() {
        let on = Model::init(small_model_config(true), seed as u64).unwrap();
        let off = Model::init(small_model_config(false), seed as u64).unwrap();
        assert!(mask_grad_on_box_head(&on, rec) > 0.0);
        assert_eq!(mask_grad_on_box_head(&off, rec), 0.0);
    }
}

#[test]
fn short_training_run_lowers_the_loss_and_is_deterministic() {
    let recs = dataset(4, 11);
    let cfg = TrainConfig {
        total_iters: 40,
        warmup_iters: 5,
        batch_size: 2,
        fixed_samples: Some(2),
        lr_max: 3e-3,
        mllm: small_model_config(true).mllm,
        ..TrainConfig::default()
    };
    let run = || {
        let model = Model::init(cfg.model_config(), 1).unwrap();
        let mut tr = Trainer::new(cfg.clone(), model, &recs).unwrap();
        let mut totals = Vec::new();
        while !tr.done() {
            totals.push(tr.step().unwrap().loss.total);
        }
        (totals, tr.model)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    let head: f64 = a[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = a[a.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");
}
