//! A tiny decoder-only multimodal language model.
//!
//! The sequence is an image prefix (one row per patch, mutually visible)
//! followed by byte-level text under a causal mask. Text attends to every
//! patch. Text positions carry no learned position embedding; each head
//! gets a linear distance penalty (ALiBi) over the text region instead, so
//! an identity network maps a token straight to its embedding row.
//!
//! The vocabulary is 256 byte tokens plus `n` appended candidate tokens
//! whose last-layer hidden rows feed the perception heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{filled, gaussian, Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// End-of-sequence token (the NUL byte never appears in generated text).
pub const EOS_ID: usize = 0;

const MASKED: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

/// Textual placeholder for candidate token `k` (1-based).
pub fn candidate_placeholder(k: usize) -> String {
    format!("<cand_{k}>")
}

/// Placeholder sequence `<cand_1>…<cand_n>`.
pub fn candidate_suffix(n: usize) -> String {
    (1..=n).map(candidate_placeholder).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub base_size: usize,
    pub num_candidates: usize,
}

impl VocabSpec {
    pub fn new(base_size: usize, num_candidates: usize) -> Result<Self> {
        if num_candidates == 0 || base_size == 0 {
            return Err(Error::invalid(
                "vocabulary needs base_size >= 1 and at least one candidate token",
            ));
        }
        Ok(Self {
            base_size,
            num_candidates,
        })
    }

    pub fn size(&self) -> usize {
        self.base_size + self.num_candidates
    }

    pub fn candidate_ids(&self) -> std::ops::Range<usize> {
        self.base_size..self.size()
    }

    pub fn is_candidate(&self, id: usize) -> bool {
        self.candidate_ids().contains(&id)
    }

    /// Byte-level encoding; `<cand_k>` placeholders map to candidate ids.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let bytes = text.as_bytes();
        let mut ids = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            if let Some((k, len)) = parse_placeholder(&bytes[i..]) {
                if (1..=self.num_candidates).contains(&k) {
                    ids.push(self.base_size + k - 1);
                    i += len;
                    continue;
                }
            }
            ids.push(bytes[i] as usize);
            i += 1;
        }
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut pending = Vec::new();
        for &id in ids {
            if self.is_candidate(id) {
                out.push_str(&String::from_utf8_lossy(&pending));
                pending.clear();
                out.push_str(&candidate_placeholder(id - self.base_size + 1));
            } else if id < 256 {
                pending.push(id as u8);
            }
        }
        out.push_str(&String::from_utf8_lossy(&pending));
        out
    }
}

fn parse_placeholder(bytes: &[u8]) -> Option<(usize, usize)> {
    let rest = bytes.strip_prefix(b"<cand_")?;
    let digits = rest.iter().take_while(|b| b.is_ascii_digit()).count();
    if digits == 0 || rest.get(digits) != Some(&b'>') {
        return None;
    }
    let k = std::str::from_utf8(&rest[..digits]).ok()?.parse().ok()?;
    Some((k, 6 + digits + 1))
}

/// Removes every candidate placeholder from `text`.
pub fn strip_placeholders(text: &str) -> String {
    let bytes = text.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if let Some((_, len)) = parse_placeholder(&bytes[i..]) {
            i += len;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).expect("placeholders are ASCII")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MllmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub base_vocab: usize,
    pub image_size: usize,
    pub patch_size: usize,
}

impl Default for MllmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_hidden: 256,
            base_vocab: 256,
            image_size: 64,
            patch_size: 8,
        }
    }
}

impl MllmConfig {
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(
                "mllm: d_model must be a positive multiple of n_heads",
            ));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::invalid(
                "mllm: image_size must be divisible by patch_size",
            ));
        }
        if self.base_vocab < 256 {
            return Err(Error::invalid(
                "mllm: base vocabulary must cover all 256 bytes",
            ));
        }
        Ok(())
    }
}

/// Image prefix plus text tokens. Positions `prompt_len..` of `token_ids`
/// form the generated region.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSequence {
    pub patch_embeddings: Option<Tensor>,
    pub token_ids: Vec<usize>,
    pub prompt_len: usize,
}

impl MultimodalSequence {
    pub fn num_patches(&self) -> usize {
        self.patch_embeddings.as_ref().map_or(0, Tensor::rows)
    }

    /// Text indices of candidate tokens inside the generated region.
    pub fn candidate_positions(&self, vocab: &VocabSpec) -> Vec<usize> {
        (self.prompt_len..self.token_ids.len())
            .filter(|&i| vocab.is_candidate(self.token_ids[i]))
            .collect()
    }
}

/// Language-model weights, including the frozen patch projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub cfg: MllmConfig,
    pub vocab_rows: usize,
    pub store: ParamStore,
}

/// Frozen vision-tower tensors.
pub const FROZEN_MLLM: [&str; 2] = ["mllm.patch_proj", "mllm.patch_bias"];

impl ModelParams {
    pub fn init(cfg: MllmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let ps2 = cfg.patch_size * cfg.patch_size;
        let mut s = ParamStore::new();
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let resid = lin(d) / ((2 * cfg.n_layers.max(1)) as f64).sqrt();

        s.insert(
            "mllm.patch_proj",
            gaussian(&[ps2, d], lin(ps2), &mut rng),
            false,
        );
        s.insert("mllm.patch_bias", filled(&[d], 0.0), false);
        s.insert(
            "mllm.img_pos",
            gaussian(&[cfg.num_patches(), d], 0.1, &mut rng),
            true,
        );
        s.insert(
            "mllm.tok_emb",
            gaussian(&[cfg.base_vocab, d], 0.1, &mut rng),
            true,
        );
        for l in 0..cfg.n_layers {
            let p = format!("mllm.blk{l}");
            s.insert(format!("{p}.ln1.g"), filled(&[d], 1.0), true);
            s.insert(format!("{p}.ln1.b"), filled(&[d], 0.0), true);
            for w in ["wq", "wk", "wv"] {
                s.insert(
                    format!("{p}.attn.{w}"),
                    gaussian(&[d, d], lin(d), &mut rng),
                    true,
                );
            }
            s.insert(
                format!("{p}.attn.wo"),
                gaussian(&[d, d], resid, &mut rng),
                true,
            );
            s.insert(format!("{p}.ln2.g"), filled(&[d], 1.0), true);
            s.insert(format!("{p}.ln2.b"), filled(&[d], 0.0), true);
            s.insert(
                format!("{p}.ffn.w1"),
                gaussian(&[d, cfg.ffn_hidden], lin(d), &mut rng),
                true,
            );
            s.insert(format!("{p}.ffn.b1"), filled(&[cfg.ffn_hidden], 0.0), true);
            s.insert(
                format!("{p}.ffn.w2"),
                gaussian(
                    &[cfg.ffn_hidden, d],
                    lin(cfg.ffn_hidden) / ((2 * cfg.n_layers) as f64).sqrt(),
                    &mut rng,
                ),
                true,
            );
            s.insert(format!("{p}.ffn.b2"), filled(&[d], 0.0), true);
        }
        s.insert("mllm.ln_f.g", filled(&[d], 1.0), true);
        s.insert("mllm.ln_f.b", filled(&[d], 0.0), true);
        s.insert(
            "mllm.lm_head",
            gaussian(&[cfg.base_vocab, d], 0.02, &mut rng),
            true,
        );
        Ok(Self {
            vocab_rows: cfg.base_vocab,
            cfg,
            store: s,
        })
    }

    pub fn vocab(&self) -> Result<VocabSpec> {
        VocabSpec::new(self.cfg.base_vocab, self.vocab_rows - self.cfg.base_vocab)
    }
}

/// Appends `n` candidate rows: Gaussian(0, 0.02) embeddings, zero output rows.
pub fn expand_vocabulary(params: &ModelParams, n: usize, seed: u64) -> Result<ModelParams> {
    if n == 0 {
        return Err(Error::invalid("expand_vocabulary: n must be >= 1"));
    }
    let d = params.cfg.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fresh = gaussian(&[n, d], 0.02, &mut rng);
    let mut out = params.clone();
    let grow = |t: &Tensor, extra: &[f64]| -> Result<Tensor> {
        let mut data = t.data().to_vec();
        data.extend_from_slice(extra);
        Ok(Tensor::new(vec![t.rows() + n, d], data)?.with_grad(t.requires_grad))
    };
    let emb = grow(params.store.expect("mllm.tok_emb")?, fresh.data())?;
    let head = grow(params.store.expect("mllm.lm_head")?, &vec![0.0; n * d])?;
    out.store.insert("mllm.tok_emb", emb, true);
    out.store.insert("mllm.lm_head", head, true);
    out.vocab_rows += n;
    Ok(out)
}

/// Splits an `H×W` image into row-major patches and projects each one.
pub fn encode_image_patches(
    image: &Tensor,
    patch_size: usize,
    params: &ModelParams,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = params.store.bind(&mut tape, false)?;
    let v = encode_image_patches_var(&mut tape, &b, image, patch_size)?;
    Ok(tape.tensor(v))
}

/// Flattened `P×(patch_size²)` patch matrix of an image.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    let [h, w] = image.shape() else {
        return Err(Error::invalid(format!(
            "image must be rank 2, got {:?}",
            image.shape()
        )));
    };
    let (h, w) = (*h, *w);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} is not divisible into {patch_size}-pixel patches"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let px = image.data();
    let mut out = Vec::with_capacity(h * w);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch_size {
                let row = pr * patch_size + r;
                let start = row * w + pc * patch_size;
                out.extend_from_slice(&px[start..start + patch_size]);
            }
        }
    }
    Tensor::matrix(gh * gw, patch_size * patch_size, out)
}

pub(crate) fn encode_image_patches_var(
    tape: &mut Tape,
    b: &Bound,
    image: &Tensor,
    patch_size: usize,
) -> Result<Var> {
    let patches = patchify(image, patch_size)?;
    let pv = tape.leaf(&patches)?;
    let proj = tape.matmul(pv, b.var("mllm.patch_proj"))?;
    tape.add(proj, b.var("mllm.patch_bias"))
}

fn affine_norm(tape: &mut Tape, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let n = tape.layer_norm(x, LN_EPS)?;
    let g = tape.mul(n, b.var(&format!("{prefix}.g")))?;
    tape.add(g, b.var(&format!("{prefix}.b")))
}

fn alibi_slope(head: usize, heads: usize) -> f64 {
    2f64.powf(-8.0 * (head + 1) as f64 / heads as f64)
}

/// Additive attention bias for one head over `P` patches and `T` tokens.
fn attention_bias(p: usize, t: usize, slope: f64) -> Vec<f64> {
    let s = p + t;
    let mut bias = vec![0.0; s * s];
    for q in 0..s {
        for k in 0..s {
            bias[q * s + k] = if k < p {
                0.0
            } else if q < p || k > q {
                MASKED
            } else {
                -slope * (q - k) as f64
            };
        }
    }
    bias
}

/// Output of a tape-level forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `(P+T)×d` last-layer hidden rows (the residual stream, before the final norm).
    pub hidden: Var,
    /// `T×V` logits for text positions.
    pub logits: Var,
    pub num_patches: usize,
}

/// Runs the transformer; `logit_rows` restricts the output projection to a
/// subset of text positions (all when `None`).
pub fn forward_var(
    tape: &mut Tape,
    b: &Bound,
    cfg: &MllmConfig,
    patches: Option<Var>,
    ids: &[usize],
    logit_rows: Option<(usize, usize)>,
) -> Result<ForwardVars> {
    let d = cfg.d_model;
    if ids.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    let txt = tape.embedding(b.var("mllm.tok_emb"), ids)?;
    let (mut x, p) = match patches {
        Some(pv) => {
            let p = tape.shape(pv)[0];
            if tape.shape(pv)[1] != d || p > cfg.num_patches() {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    lhs: tape.shape(pv).to_vec(),
                    rhs: vec![cfg.num_patches(), d],
                });
            }
            let pos = tape.slice(b.var("mllm.img_pos"), 0, 0, p)?;
            let img = tape.add(pv, pos)?;
            (tape.concat(&[img, txt], 0)?, p)
        }
        None => (txt, 0),
    };
    let t = ids.len();
    let s = p + t;
    let hd = d / cfg.n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let biases = (0..cfg.n_heads)
        .map(|h| {
            tape.constant(
                vec![s, s],
                attention_bias(p, t, alibi_slope(h, cfg.n_heads)),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    for l in 0..cfg.n_layers {
        let pre = format!("mllm.blk{l}");
        let h = affine_norm(tape, b, x, &format!("{pre}.ln1"))?;
        let q = tape.matmul(h, b.var(&format!("{pre}.attn.wq")))?;
        let k = tape.matmul(h, b.var(&format!("{pre}.attn.wk")))?;
        let v = tape.matmul(h, b.var(&format!("{pre}.attn.wv")))?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for (hi, bias) in biases.iter().enumerate() {
            let (c0, c1) = (hi * hd, (hi + 1) * hd);
            let qh = tape.slice(q, 1, c0, c1)?;
            let kh = tape.slice(k, 1, c0, c1)?;
            let vh = tape.slice(v, 1, c0, c1)?;
            let sc = tape.matmul_nt(qh, kh)?;
            let sc = tape.scale(sc, scale)?;
            let sc = tape.add(sc, *bias)?;
            let a = tape.softmax(sc)?;
            heads.push(tape.matmul(a, vh)?);
        }
        let o = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        };
        let o = tape.matmul(o, b.var(&format!("{pre}.attn.wo")))?;
        x = tape.add(x, o)?;

        let h2 = affine_norm(tape, b, x, &format!("{pre}.ln2"))?;
        let f = tape.matmul(h2, b.var(&format!("{pre}.ffn.w1")))?;
        let f = tape.add(f, b.var(&format!("{pre}.ffn.b1")))?;
        let f = tape.relu(f)?;
        let f = tape.matmul(f, b.var(&format!("{pre}.ffn.w2")))?;
        let f = tape.add(f, b.var(&format!("{pre}.ffn.b2")))?;
        x = tape.add(x, f)?;
    }
    let (r0, r1) = logit_rows.unwrap_or((0, t));
    if r0 >= r1 || r1 > t {
        return Err(Error::invalid(format!(
            "logit rows {r0}..{r1} outside 0..{t}"
        )));
    }
    let text = tape.slice(x, 0, p + r0, p + r1)?;
    let text = affine_norm(tape, b, text, "mllm.ln_f")?;
    let logits = tape.matmul_nt(text, b.var("mllm.lm_head"))?;
    Ok(ForwardVars {
        hidden: x,
        logits,
        num_patches: p,
    })
}

/// Forward pass without gradients: `(hidden (P+T)×d, logits T×V)`.
pub fn forward(seq: &MultimodalSequence, params: &ModelParams) -> Result<(Tensor, Tensor)> {
    check_ids(&seq.token_ids, params.vocab_rows)?;
    let mut tape = Tape::new();
    let b = params.store.bind(&mut tape, false)?;
    let patches = seq
        .patch_embeddings
        .as_ref()
        .map(|p| tape.leaf(p))
        .transpose()?;
    let out = forward_var(&mut tape, &b, &params.cfg, patches, &seq.token_ids, None)?;
    Ok((tape.tensor(out.hidden), tape.tensor(out.logits)))
}

fn check_ids(ids: &[usize], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&i| i >= vocab) {
        Some(&id) => Err(Error::TokenOutOfVocab { id, vocab }),
        None => Ok(()),
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding. Emits at least one token and stops after [`EOS_ID`]
/// or `max_len` tokens; the returned ids exclude the prompt.
pub fn decode_greedy(
    prompt: &MultimodalSequence,
    params: &ModelParams,
    max_len: usize,
) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::invalid("decode_greedy: max_len must be >= 1"));
    }
    check_ids(&prompt.token_ids, params.vocab_rows)?;
    let mut ids = prompt.token_ids.clone();
    let mut generated = Vec::new();
    while generated.len() < max_len {
        let mut tape = Tape::new();
        let b = params.store.bind(&mut tape, false)?;
        let patches = prompt
            .patch_embeddings
            .as_ref()
            .map(|p| tape.leaf(p))
            .transpose()?;
        let t = ids.len();
        let out = forward_var(&mut tape, &b, &params.cfg, patches, &ids, Some((t - 1, t)))?;
        let next = argmax(tape.value(out.logits));
        generated.push(next);
        ids.push(next);
        if next == EOS_ID {
            break;
        }
    }
    Ok(generated)
}

/// Hidden-row indices of candidate tokens, ordered by candidate id.
pub fn candidate_rows(seq: &MultimodalSequence, vocab: &VocabSpec) -> Result<Vec<usize>> {
    let p = seq.num_patches();
    let mut rows = Vec::with_capacity(vocab.num_candidates);
    for cid in vocab.candidate_ids() {
        let hits: Vec<usize> = (seq.prompt_len..seq.token_ids.len())
            .filter(|&i| seq.token_ids[i] == cid)
            .collect();
        match hits.as_slice() {
            [] => return Err(Error::CandidateAbsent(cid)),
            [one] => rows.push(p + one),
            _ => return Err(Error::DuplicateCandidate(cid)),
        }
    }
    Ok(rows)
}

/// Candidate hidden rows plus the image and text hidden rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateBundle {
    /// `n×d`, ordered by candidate id.
    pub candidates: Tensor,
    pub h_img: Option<Tensor>,
    pub h_txt: Tensor,
}

pub fn extract_candidate_embeddings(
    hidden: &Tensor,
    seq: &MultimodalSequence,
    vocab: &VocabSpec,
) -> Result<CandidateBundle> {
    let rows = candidate_rows(seq, vocab)?;
    let p = seq.num_patches();
    let d = hidden.cols();
    if hidden.rows() != p + seq.token_ids.len() {
        return Err(Error::ShapeMismatch {
            op: "extract_candidate_embeddings",
            lhs: hidden.shape().to_vec(),
            rhs: vec![p + seq.token_ids.len(), d],
        });
    }
    let gather = |idx: &mut dyn Iterator<Item = usize>| -> Vec<f64> {
        idx.flat_map(|r| hidden.row(r).to_vec()).collect()
    };
    let candidates = Tensor::matrix(rows.len(), d, gather(&mut rows.iter().copied()))?;
    let h_img = if p > 0 {
        Some(Tensor::matrix(p, d, gather(&mut (0..p)))?)
    } else {
        None
    };
    let h_txt = Tensor::matrix(seq.token_ids.len(), d, gather(&mut (p..hidden.rows())))?;
    Ok(CandidateBundle {
        candidates,
        h_img,
        h_txt,
    })
}

/// Gathers candidate rows of `hidden` on the tape into an `n×d` matrix.
pub fn candidate_matrix_var(tape: &mut Tape, hidden: Var, rows: &[usize]) -> Result<Var> {
    let parts = rows
        .iter()
        .map(|&r| tape.slice(hidden, 0, r, r + 1))
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat(&parts, 0)
    }
}
