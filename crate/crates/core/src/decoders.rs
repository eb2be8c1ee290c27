//! Perception heads: the box decoder fed by `h_det`, a prompt-conditioned
//! mask decoder fed by dense features, `h_seg` and the predicted box, and the
//! patch/prompt similarity map.
//!
//! The mask decoder is a linear stand-in for a SAM-style decoder:
//!
//! ```text
//! logit(y, x) = up(⟨f, W_p·h_seg⟩)(y, x) + γ·raster(B̂)(y, x) + b
//! ```
//!
//! where `up` is bilinear upsampling from the feature grid and `raster` is a
//! sigmoid-edged box indicator that keeps the mask loss differentiable in
//! the predicted box coordinates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};
use crate::mllm::patchify;
use crate::params::{filled, gaussian, Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Hidden width of the 3-layer box MLP (512 at width 4096, scaled to 64).
    pub bbox_hidden: usize,
    /// Patch size of the frozen dense feature encoder.
    pub enc_patch: usize,
    pub sharpness: f64,
    /// Feed the predicted box to the mask decoder.
    pub use_box: bool,
    /// Feed `h_seg` to the mask decoder.
    pub use_text: bool,
    /// Point prompts. The slot exists; no point extractor is implemented.
    pub use_points: bool,
    pub gamma_init: f64,
    pub bias_init: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            bbox_hidden: 8,
            enc_patch: 2,
            sharpness: 50.0,
            use_box: true,
            use_text: true,
            use_points: false,
            gamma_init: 4.0,
            bias_init: -2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub cfg: DecoderConfig,
    pub d_model: usize,
    pub store: ParamStore,
}

pub const FROZEN_ENCODER: [&str; 2] = ["enc.proj", "enc.bias"];

impl DecoderParams {
    pub fn init(cfg: DecoderConfig, d_model: usize, seed: u64) -> Result<Self> {
        if cfg.bbox_hidden == 0 || cfg.enc_patch == 0 || !(cfg.sharpness > 0.0) {
            return Err(Error::invalid(
                "decoders: bbox_hidden, enc_patch and sharpness must be positive",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = d_model;
        let h = cfg.bbox_hidden;
        let ps2 = cfg.enc_patch * cfg.enc_patch;
        let mut s = ParamStore::new();
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        s.insert("enc.proj", gaussian(&[ps2, d], lin(ps2), &mut rng), false);
        s.insert("enc.bias", gaussian(&[d], 0.5, &mut rng), false);
        s.insert("bbox.w1", gaussian(&[d, h], lin(d), &mut rng), true);
        s.insert("bbox.b1", filled(&[h], 0.0), true);
        s.insert("bbox.w2", gaussian(&[h, h], lin(h), &mut rng), true);
        s.insert("bbox.b2", filled(&[h], 0.0), true);
        s.insert("bbox.w3", gaussian(&[h, 4], lin(h), &mut rng), true);
        s.insert("bbox.b3", filled(&[4], 0.0), true);
        s.insert("mask.proj", gaussian(&[d, d], lin(d) * 0.1, &mut rng), true);
        s.insert("mask.gamma", filled(&[1], cfg.gamma_init), true);
        s.insert("mask.bias", filled(&[1], cfg.bias_init), true);
        Ok(Self {
            cfg,
            d_model,
            store: s,
        })
    }
}

/// Dense features on the encoder's patch grid, one `d`-row per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFeatures {
    /// `(hf·wf)×d`, row-major over the grid.
    pub grid: Tensor,
    pub hf: usize,
    pub wf: usize,
}

/// Frozen dense feature encoder applied to an `H×W` image.
pub fn dense_features(image: &Tensor, params: &DecoderParams) -> Result<DenseFeatures> {
    let ps = params.cfg.enc_patch;
    let patches = patchify(image, ps)?;
    let mut tape = Tape::new();
    let pv = tape.leaf(&patches)?;
    let w = tape.param(params.store.expect("enc.proj")?, false)?;
    let b = tape.param(params.store.expect("enc.bias")?, false)?;
    let f = tape.matmul(pv, w)?;
    let f = tape.add(f, b)?;
    Ok(DenseFeatures {
        grid: tape.tensor(f),
        hf: image.shape()[0] / ps,
        wf: image.shape()[1] / ps,
    })
}

/// `1×d` → `1×4` box corners `[x1, y1, x2, y2]`.
pub fn bbox_decode_var(tape: &mut Tape, b: &Bound, h_det: Var) -> Result<Var> {
    let mut x = h_det;
    for (i, last) in [(1, false), (2, false), (3, true)] {
        x = tape.matmul(x, b.var(&format!("bbox.w{i}")))?;
        x = tape.add(x, b.var(&format!("bbox.b{i}")))?;
        if !last {
            x = tape.relu(x)?;
        }
    }
    let s = tape.sigmoid(x)?;
    let cx = tape.slice(s, 1, 0, 1)?;
    let cy = tape.slice(s, 1, 1, 2)?;
    let w = tape.slice(s, 1, 2, 3)?;
    let h = tape.slice(s, 1, 3, 4)?;
    let hw = tape.scale(w, 0.5)?;
    let hh = tape.scale(h, 0.5)?;
    let x1 = tape.sub(cx, hw)?;
    let y1 = tape.sub(cy, hh)?;
    let x2 = tape.add(cx, hw)?;
    let y2 = tape.add(cy, hh)?;
    let corners = tape.concat(&[x1, y1, x2, y2], 1)?;
    tape.clamp(corners, 0.0, 1.0)
}

pub fn bbox_decode(h_det: &[f64], params: &DecoderParams) -> Result<BBox> {
    if h_det.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "bbox_decode" });
    }
    let mut tape = Tape::new();
    let b = params.store.bind(&mut tape, false)?;
    let h = tape.leaf(&Tensor::matrix(1, h_det.len(), h_det.to_vec())?)?;
    let out = bbox_decode_var(&mut tape, &b, h)?;
    let v = tape.value(out);
    BBox::new(v[0], v[1], v[2], v[3])
}

fn pixel_centers(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}

/// `H×W` soft indicator of a `1×4` box variable.
pub fn soft_box_raster_var(
    tape: &mut Tape,
    bx: Var,
    h: usize,
    w: usize,
    sharpness: f64,
) -> Result<Var> {
    let xs = tape.constant(vec![1, w], pixel_centers(w))?;
    let ys = tape.constant(vec![h, 1], pixel_centers(h))?;
    let edge = |tape: &mut Tape, lo: Var, hi: Var| -> Result<Var> {
        let d = tape.sub(hi, lo)?;
        let d = tape.scale(d, sharpness)?;
        tape.sigmoid(d)
    };
    let x1 = tape.slice(bx, 1, 0, 1)?;
    let y1 = tape.slice(bx, 1, 1, 2)?;
    let x2 = tape.slice(bx, 1, 2, 3)?;
    let y2 = tape.slice(bx, 1, 3, 4)?;
    let l = edge(tape, x1, xs)?;
    let r = edge(tape, xs, x2)?;
    let col = tape.mul(l, r)?;
    let t = edge(tape, y1, ys)?;
    let bt = edge(tape, ys, y2)?;
    let row = tape.mul(t, bt)?;
    tape.matmul(row, col)
}

pub fn soft_box_raster(bx: &BBox, h: usize, w: usize, sharpness: f64) -> Result<Tensor> {
    if !(sharpness > 0.0) {
        return Err(Error::invalid(
            "soft_box_raster: sharpness must be positive",
        ));
    }
    let mut tape = Tape::new();
    let b = tape.constant(vec![1, 4], bx.to_array().to_vec())?;
    let g = soft_box_raster_var(&mut tape, b, h, w, sharpness)?;
    Ok(tape.tensor(g))
}

/// Bilinear interpolation weights `out×inp` (half-pixel centers).
pub fn bilinear_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        let frac = src - lo as f64;
        m[i * inp + lo] += 1.0 - frac;
        m[i * inp + hi] += frac;
    }
    m
}

/// Mask logits `H×W`. `bx` is ignored unless the box prompt is enabled.
#[allow(clippy::too_many_arguments)]
pub fn mask_decode_var(
    tape: &mut Tape,
    b: &Bound,
    cfg: &DecoderConfig,
    features: Var,
    grid: (usize, usize),
    h_seg: Var,
    bx: Option<Var>,
    out: (usize, usize),
) -> Result<Var> {
    if cfg.use_points {
        return Err(Error::Unsupported("point prompts"));
    }
    let (hf, wf) = grid;
    let (h, w) = out;
    let fshape = tape.shape(features).to_vec();
    let d = tape.shape(h_seg)[1];
    if fshape != [hf * wf, d] {
        return Err(Error::ShapeMismatch {
            op: "mask_decode",
            lhs: fshape,
            rhs: vec![hf * wf, d],
        });
    }
    let mut logits = if cfg.use_text {
        let v = tape.matmul(h_seg, b.var("mask.proj"))?;
        let low = tape.matmul_nt(features, v)?;
        let low = tape.reshape(low, vec![hf, wf])?;
        let ah = tape.constant(vec![h, hf], bilinear_matrix(h, hf))?;
        let aw = tape.constant(vec![w, wf], bilinear_matrix(w, wf))?;
        let up = tape.matmul(ah, low)?;
        tape.matmul_nt(up, aw)?
    } else {
        tape.constant(vec![h, w], vec![0.0; h * w])?
    };
    if cfg.use_box {
        let bx = bx.ok_or(Error::invalid(
            "mask_decode: box prompt enabled but no box given",
        ))?;
        let r = soft_box_raster_var(tape, bx, h, w, cfg.sharpness)?;
        let r = tape.mul(r, b.var("mask.gamma"))?;
        logits = tape.add(logits, r)?;
    }
    tape.add(logits, b.var("mask.bias"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    pub grid: Tensor,
    pub threshold: f64,
}

impl MaskLogits {
    pub fn new(grid: Tensor) -> Self {
        Self {
            grid,
            threshold: 0.0,
        }
    }

    pub fn binarize(&self) -> Mask {
        let (h, w) = (self.grid.shape()[0], self.grid.shape()[1]);
        let bits = self
            .grid
            .data()
            .iter()
            .map(|&v| v > self.threshold)
            .collect();
        Mask::new(h, w, bits).expect("logit grid shape")
    }
}

pub fn mask_decode(
    f: &DenseFeatures,
    h_seg: &[f64],
    bx: &BBox,
    out: (usize, usize),
    params: &DecoderParams,
) -> Result<MaskLogits> {
    if !bx.is_valid() {
        return Err(Error::invalid("mask_decode: invalid box"));
    }
    let mut tape = Tape::new();
    let b = params.store.bind(&mut tape, false)?;
    let fv = tape.leaf(&f.grid)?;
    let hs = tape.leaf(&Tensor::matrix(1, h_seg.len(), h_seg.to_vec())?)?;
    let bv = tape.constant(vec![1, 4], bx.to_array().to_vec())?;
    let g = mask_decode_var(
        &mut tape,
        &b,
        &params.cfg,
        fv,
        (f.hf, f.wf),
        hs,
        Some(bv),
        out,
    )?;
    Ok(MaskLogits::new(tape.tensor(g)))
}

/// `P`-vector of dot products between image rows and `h_seg`.
pub fn similarity_map_var(tape: &mut Tape, h_img: Var, h_seg: Var) -> Result<Var> {
    let s = tape.matmul_nt(h_img, h_seg)?;
    let p = tape.shape(s)[0];
    tape.reshape(s, vec![p])
}

pub fn similarity_map(h_img: &Tensor, h_seg: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let hi = tape.leaf(h_img)?;
    let hs = tape.leaf(&Tensor::matrix(1, h_seg.len(), h_seg.to_vec())?)?;
    let s = similarity_map_var(&mut tape, hi, hs)?;
    Ok(tape.value(s).to_vec())
}
