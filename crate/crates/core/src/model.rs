//! The full pipeline: language model, candidate fusion, box and mask
//! decoders, wired together for training and inference.

use serde::{Deserialize, Serialize};

use crate::decoders::{
    bbox_decode_var, dense_features, mask_decode_var, similarity_map_var, DecoderConfig,
    DecoderParams, MaskLogits,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse_var, route_var, FusionConfig, Router, RouterParams};
use crate::geometry::{BBox, Mask};
use crate::mllm::{
    candidate_matrix_var, candidate_rows, decode_greedy, encode_image_patches, expand_vocabulary,
    forward_var, MllmConfig, ModelParams, MultimodalSequence, VocabSpec, EOS_ID,
};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mllm: MllmConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    /// Generation budget at inference time.
    pub max_answer_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mllm: MllmConfig::default(),
            fusion: FusionConfig::default(),
            decoder: DecoderConfig::default(),
            max_answer_tokens: 48,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.mllm.validate()?;
        self.fusion.validate()?;
        if self.max_answer_tokens == 0 {
            return Err(Error::invalid("max_answer_tokens must be >= 1"));
        }
        if self.mllm.image_size % self.decoder.enc_patch != 0 {
            return Err(Error::invalid(
                "image_size must be divisible by the dense encoder patch size",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub mllm: ModelParams,
    pub routers: RouterParams,
    pub decoders: DecoderParams,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let base = ModelParams::init(cfg.mllm.clone(), seed)?;
        let mllm = expand_vocabulary(&base, cfg.fusion.n, seed.wrapping_add(1))?;
        let routers =
            RouterParams::init(cfg.fusion.clone(), cfg.mllm.d_model, seed.wrapping_add(2))?;
        let decoders =
            DecoderParams::init(cfg.decoder.clone(), cfg.mllm.d_model, seed.wrapping_add(3))?;
        Ok(Self {
            cfg,
            mllm,
            routers,
            decoders,
        })
    }

    pub fn vocab(&self) -> VocabSpec {
        self.mllm.vocab().expect("vocabulary expanded at init")
    }

    pub fn stores(&self) -> [&ParamStore; 3] {
        [&self.mllm.store, &self.routers.store, &self.decoders.store]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore; 3] {
        [
            &mut self.mllm.store,
            &mut self.routers.store,
            &mut self.decoders.store,
        ]
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.stores().into_iter().find_map(|s| s.get(name))
    }

    pub fn param_names(&self) -> Vec<String> {
        self.stores()
            .iter()
            .flat_map(|s| s.names().map(String::from))
            .collect()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.stores().iter().any(|s| s.is_frozen(name))
    }

    pub fn bind(&self, tape: &mut Tape, grads: bool) -> Result<ModelBound> {
        Ok(ModelBound {
            mllm: self.mllm.store.bind(tape, grads)?,
            routers: self.routers.store.bind(tape, grads)?,
            decoders: self.decoders.store.bind(tape, grads)?,
        })
    }

    /// Frozen encodings of one image; reused across every query on it.
    pub fn prepare(&self, image: &Tensor) -> Result<PreparedImage> {
        let s = self.cfg.mllm.image_size;
        if image.shape() != [s, s] {
            return Err(Error::ShapeMismatch {
                op: "prepare",
                lhs: image.shape().to_vec(),
                rhs: vec![s, s],
            });
        }
        let patches = encode_image_patches(image, self.cfg.mllm.patch_size, &self.mllm)?;
        let f = dense_features(image, &self.decoders)?;
        Ok(PreparedImage {
            patches,
            features: f.grid,
            grid: (f.hf, f.wf),
            size: (s, s),
        })
    }
}

#[derive(Clone, Debug)]
pub struct ModelBound {
    pub mllm: Bound,
    pub routers: Bound,
    pub decoders: Bound,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedImage {
    pub patches: Tensor,
    pub features: Tensor,
    pub grid: (usize, usize),
    pub size: (usize, usize),
}

/// Token ids for `question\n` followed by an optional answer and EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Query {
    pub ids: Vec<usize>,
    pub prompt_len: usize,
}

impl Query {
    pub fn new(vocab: &VocabSpec, question: &str, answer: Option<&str>) -> Self {
        let mut ids = vocab.encode(&format!("{question}\n"));
        let prompt_len = ids.len();
        if let Some(a) = answer {
            ids.extend(vocab.encode(a));
            ids.push(EOS_ID);
        }
        Self { ids, prompt_len }
    }

    /// Next-token targets for the answer region, aligned with
    /// [`Query::logit_rows`].
    pub fn answer_targets(&self) -> Vec<Option<usize>> {
        self.ids[self.prompt_len..]
            .iter()
            .map(|&t| Some(t))
            .collect()
    }

    /// Text rows whose logits predict the answer tokens.
    pub fn logit_rows(&self) -> Option<(usize, usize)> {
        (self.ids.len() > self.prompt_len).then(|| (self.prompt_len - 1, self.ids.len() - 1))
    }
}

/// Tape handles for one sample.
#[derive(Clone, Copy, Debug)]
pub struct SampleVars {
    pub hidden: Var,
    /// Answer-region logits when requested.
    pub logits: Option<Var>,
    pub h_img: Var,
    pub w_seg: Var,
    pub w_det: Var,
    pub h_seg: Var,
    pub h_det: Var,
    pub bbox: Var,
    pub mask_logits: Var,
}

/// Teacher-forced forward through every stage. The candidate positions come
/// from `query.ids`, which must contain each candidate token once after the
/// prompt.
pub fn forward_sample_var(
    tape: &mut Tape,
    b: &ModelBound,
    cfg: &ModelConfig,
    vocab: &VocabSpec,
    prep: &PreparedImage,
    query: &Query,
    with_logits: bool,
) -> Result<SampleVars> {
    let seq = MultimodalSequence {
        patch_embeddings: Some(prep.patches.clone()),
        token_ids: query.ids.clone(),
        prompt_len: query.prompt_len,
    };
    let rows = candidate_rows(&seq, vocab)?;
    let patches = tape.leaf(&prep.patches)?;
    let logit_rows = if with_logits {
        Some(query.logit_rows().ok_or(Error::Empty("answer tokens"))?)
    } else {
        Some((query.ids.len() - 1, query.ids.len()))
    };
    let fw = forward_var(
        tape,
        &b.mllm,
        &cfg.mllm,
        Some(patches),
        &query.ids,
        logit_rows,
    )?;
    let cands = candidate_matrix_var(tape, fw.hidden, &rows)?;
    let w_seg = route_var(tape, &b.routers, &cfg.fusion, cands, Router::Seg)?;
    let w_det = route_var(tape, &b.routers, &cfg.fusion, cands, Router::Det)?;
    let h_seg = fuse_var(tape, cands, w_seg)?;
    let h_det = fuse_var(tape, cands, w_det)?;
    let bbox = bbox_decode_var(tape, &b.decoders, h_det)?;
    let feats = tape.leaf(&prep.features)?;
    let mask_logits = mask_decode_var(
        tape,
        &b.decoders,
        &cfg.decoder,
        feats,
        prep.grid,
        h_seg,
        Some(bbox),
        prep.size,
    )?;
    let h_img = tape.slice(fw.hidden, 0, 0, fw.num_patches)?;
    Ok(SampleVars {
        hidden: fw.hidden,
        logits: with_logits.then_some(fw.logits),
        h_img,
        w_seg,
        w_det,
        h_seg,
        h_det,
        bbox,
        mask_logits,
    })
}

/// `P`-vector similarity map for a sample on the tape.
pub fn similarity_var(tape: &mut Tape, s: &SampleVars) -> Result<Var> {
    similarity_map_var(tape, s.h_img, s.h_seg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub answer: String,
    pub mask_logits: MaskLogits,
    pub mask: Mask,
    pub bbox: BBox,
    pub w_seg: Vec<f64>,
    pub w_det: Vec<f64>,
    pub similarity: Vec<f64>,
}

/// Forward on a complete token sequence (no gradients).
pub fn predict_teacher_forced(
    model: &Model,
    prep: &PreparedImage,
    query: &Query,
) -> Result<Prediction> {
    let vocab = model.vocab();
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false)?;
    let s = forward_sample_var(&mut tape, &b, &model.cfg, &vocab, prep, query, false)?;
    let sim = similarity_var(&mut tape, &s)?;
    let mask_logits = MaskLogits::new(tape.tensor(s.mask_logits));
    let bx = tape.value(s.bbox);
    Ok(Prediction {
        answer: vocab.decode(&query.ids[query.prompt_len..]),
        mask: mask_logits.binarize(),
        mask_logits,
        bbox: BBox::new(bx[0], bx[1], bx[2], bx[3])?,
        w_seg: tape.value(s.w_seg).to_vec(),
        w_det: tape.value(s.w_det).to_vec(),
        similarity: tape.value(sim).to_vec(),
    })
}

/// Greedy generation, then decoding from the generated candidate tokens.
/// Fails with a candidate-absent error when generation omits one.
pub fn predict(model: &Model, prep: &PreparedImage, question: &str) -> Result<Prediction> {
    let vocab = model.vocab();
    let prompt = Query::new(&vocab, question, None);
    let seq = MultimodalSequence {
        patch_embeddings: Some(prep.patches.clone()),
        token_ids: prompt.ids.clone(),
        prompt_len: prompt.prompt_len,
    };
    let generated = decode_greedy(&seq, &model.mllm, model.cfg.max_answer_tokens)?;
    let mut ids = prompt.ids;
    ids.extend(generated);
    let query = Query {
        ids,
        prompt_len: prompt.prompt_len,
    };
    predict_teacher_forced(model, prep, &query)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mllm::candidate_suffix;

    fn tiny() -> ModelConfig {
        ModelConfig {
            mllm: MllmConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                ffn_hidden: 32,
                image_size: 16,
                patch_size: 4,
                ..Default::default()
            },
            max_answer_tokens: 8,
            ..Default::default()
        }
    }

    fn image(n: usize) -> Tensor {
        Tensor::matrix(
            n,
            n,
            (0..n * n).map(|i| ((i * 7) % 13) as f64 / 13.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn teacher_forced_prediction_is_deterministic() {
        let m = Model::init(tiny(), 1).unwrap();
        let prep = m.prepare(&image(16)).unwrap();
        let q = Query::new(
            &m.vocab(),
            "segment the lung",
            Some(&format!("It is. {}", candidate_suffix(2))),
        );
        let a = predict_teacher_forced(&m, &prep, &q).unwrap();
        let b = predict_teacher_forced(&m, &prep, &q).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mask.height(), 16);
        assert_eq!(a.similarity.len(), 16);
        assert!((a.w_seg.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn query_targets_align_with_logit_rows() {
        let m = Model::init(tiny(), 1).unwrap();
        let q = Query::new(&m.vocab(), "ab", Some("c"));
        assert_eq!(
            q.ids,
            vec![
                b'a' as usize,
                b'b' as usize,
                b'\n' as usize,
                b'c' as usize,
                EOS_ID
            ]
        );
        assert_eq!(q.prompt_len, 3);
        assert_eq!(q.logit_rows(), Some((2, 4)));
        assert_eq!(q.answer_targets(), vec![Some(b'c' as usize), Some(EOS_ID)]);
    }

    #[test]
    fn untrained_generation_misses_candidates() {
        let m = Model::init(tiny(), 1).unwrap();
        let prep = m.prepare(&image(16)).unwrap();
        assert!(matches!(
            predict(&m, &prep, "segment"),
            Err(Error::CandidateAbsent(_))
        ));
    }

    #[test]
    fn frozen_tensors_are_the_encoders() {
        let m = Model::init(tiny(), 1).unwrap();
        let frozen: Vec<String> = m
            .param_names()
            .into_iter()
            .filter(|n| m.is_frozen(n))
            .collect();
        assert_eq!(
            frozen,
            vec!["mllm.patch_bias", "mllm.patch_proj", "enc.bias", "enc.proj"]
        );
    }
}
