//! Candidate fusion: two routers score the `n` candidate embeddings and
//! produce decoder-specific convex combinations `h_seg` and `h_det`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mllm::CandidateBundle;
use crate::params::{filled, gaussian, Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Soft,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub n: usize,
    pub mode: FusionMode,
    pub router_hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        // 1024 hidden units at width 4096, scaled to width 64.
        Self {
            n: 2,
            mode: FusionMode::Soft,
            router_hidden: 16,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.router_hidden == 0 {
            return Err(Error::invalid("fusion: n and router_hidden must be >= 1"));
        }
        Ok(())
    }
}

/// Which router / decoder a weight vector belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Router {
    Seg,
    Det,
}

impl Router {
    fn prefix(self) -> &'static str {
        match self {
            Router::Seg => "router.seg",
            Router::Det => "router.det",
        }
    }

    /// Candidate index used in hard mode.
    fn hard_index(self, n: usize) -> usize {
        match self {
            Router::Seg => 0,
            Router::Det => n.min(2) - 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams {
    pub cfg: FusionConfig,
    pub d_model: usize,
    pub store: ParamStore,
}

impl RouterParams {
    pub fn init(cfg: FusionConfig, d_model: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let fan_in = cfg.n * d_model;
        for r in [Router::Seg, Router::Det] {
            let p = r.prefix();
            store.insert(
                format!("{p}.w1"),
                gaussian(
                    &[fan_in, cfg.router_hidden],
                    1.0 / (fan_in as f64).sqrt(),
                    &mut rng,
                ),
                true,
            );
            store.insert(format!("{p}.b1"), filled(&[cfg.router_hidden], 0.0), true);
            store.insert(
                format!("{p}.w2"),
                gaussian(
                    &[cfg.router_hidden, cfg.n],
                    1.0 / (cfg.router_hidden as f64).sqrt(),
                    &mut rng,
                ),
                true,
            );
            store.insert(format!("{p}.b2"), filled(&[cfg.n], 0.0), true);
        }
        Ok(Self {
            cfg,
            d_model,
            store,
        })
    }

    /// Same shapes with every weight zeroed.
    pub fn zeroed(cfg: FusionConfig, d_model: usize) -> Result<Self> {
        let mut p = Self::init(cfg, d_model, 0)?;
        for (_, t) in p.store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(p)
    }
}

/// Router weights `1×n` for an `n×d` candidate matrix.
pub fn route_var(
    tape: &mut Tape,
    b: &Bound,
    cfg: &FusionConfig,
    candidates: Var,
    router: Router,
) -> Result<Var> {
    let shape = tape.shape(candidates).to_vec();
    if shape.len() != 2 || shape[0] != cfg.n {
        return Err(Error::ShapeMismatch {
            op: "route",
            lhs: shape,
            rhs: vec![cfg.n, 0],
        });
    }
    match cfg.mode {
        FusionMode::Hard => {
            let mut w = vec![0.0; cfg.n];
            w[router.hard_index(cfg.n)] = 1.0;
            tape.constant(vec![1, cfg.n], w)
        }
        FusionMode::Soft => {
            let p = router.prefix();
            let flat = tape.reshape(candidates, vec![1, shape[0] * shape[1]])?;
            let h = tape.matmul(flat, b.var(&format!("{p}.w1")))?;
            let h = tape.add(h, b.var(&format!("{p}.b1")))?;
            let h = tape.relu(h)?;
            let z = tape.matmul(h, b.var(&format!("{p}.w2")))?;
            let z = tape.add(z, b.var(&format!("{p}.b2")))?;
            tape.softmax(z)
        }
    }
}

/// `Σ_k w[k] · candidates[k]` as a `1×d` row.
pub fn fuse_var(tape: &mut Tape, candidates: Var, weights: Var) -> Result<Var> {
    tape.matmul(weights, candidates)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    pub h_seg: Vec<f64>,
    pub h_det: Vec<f64>,
    pub w_seg: Vec<f64>,
    pub w_det: Vec<f64>,
}

/// Router weights `(w_seg, w_det)` for a bundle.
pub fn route(
    bundle: &CandidateBundle,
    params: &RouterParams,
    cfg: &FusionConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if bundle.candidates.cols() != params.d_model {
        return Err(Error::ShapeMismatch {
            op: "route",
            lhs: bundle.candidates.shape().to_vec(),
            rhs: vec![cfg.n, params.d_model],
        });
    }
    let mut tape = Tape::new();
    let b = params.store.bind(&mut tape, false)?;
    let c = tape.leaf(&bundle.candidates)?;
    let ws = route_var(&mut tape, &b, cfg, c, Router::Seg)?;
    let wd = route_var(&mut tape, &b, cfg, c, Router::Det)?;
    Ok((tape.value(ws).to_vec(), tape.value(wd).to_vec()))
}

pub fn fuse(bundle: &CandidateBundle, w_seg: &[f64], w_det: &[f64]) -> Result<FusionOutput> {
    let n = bundle.candidates.rows();
    if w_seg.len() != n || w_det.len() != n {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            lhs: vec![n],
            rhs: vec![w_seg.len(), w_det.len()],
        });
    }
    let mut tape = Tape::new();
    let c = tape.leaf(&bundle.candidates)?;
    let ws = tape.leaf(&Tensor::matrix(1, n, w_seg.to_vec())?)?;
    let wd = tape.leaf(&Tensor::matrix(1, n, w_det.to_vec())?)?;
    let hs = fuse_var(&mut tape, c, ws)?;
    let hd = fuse_var(&mut tape, c, wd)?;
    Ok(FusionOutput {
        h_seg: tape.value(hs).to_vec(),
        h_det: tape.value(hd).to_vec(),
        w_seg: w_seg.to_vec(),
        w_det: w_det.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn bundle(rows: usize, cols: usize, data: Vec<f64>) -> CandidateBundle {
        CandidateBundle {
            candidates: Tensor::matrix(rows, cols, data).unwrap(),
            h_img: None,
            h_txt: Tensor::zeros(&[1, cols]),
        }
    }

    #[test]
    fn single_candidate_soft_weight_is_one() {
        let cfg = FusionConfig {
            n: 1,
            ..Default::default()
        };
        let p = RouterParams::init(cfg.clone(), 4, 3).unwrap();
        let (ws, wd) = route(&bundle(1, 4, vec![0.3, -1.0, 2.0, 0.5]), &p, &cfg).unwrap();
        assert_eq!(ws, vec![1.0]);
        assert_eq!(wd, vec![1.0]);
    }

    #[test]
    fn zero_router_is_uniform() {
        let cfg = FusionConfig {
            n: 3,
            ..Default::default()
        };
        let p = RouterParams::zeroed(cfg.clone(), 2).unwrap();
        let (ws, wd) = route(&bundle(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), &p, &cfg).unwrap();
        for w in ws.iter().chain(&wd) {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hard_assignment() {
        let cfg = FusionConfig {
            n: 2,
            mode: FusionMode::Hard,
            router_hidden: 4,
        };
        let p = RouterParams::init(cfg.clone(), 2, 3).unwrap();
        let (ws, wd) = route(&bundle(2, 2, vec![1.0, 2.0, 3.0, 4.0]), &p, &cfg).unwrap();
        assert_eq!(ws, vec![1.0, 0.0]);
        assert_eq!(wd, vec![0.0, 1.0]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let cfg = FusionConfig::default();
        let p = RouterParams::init(cfg.clone(), 4, 3).unwrap();
        assert!(route(&bundle(3, 4, vec![0.0; 12]), &p, &cfg).is_err());
        assert!(route(&bundle(2, 3, vec![0.0; 6]), &p, &cfg).is_err());
        assert!(fuse(&bundle(2, 2, vec![0.0; 4]), &[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn weighted_sum_and_selection() {
        let b = bundle(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let out = fuse(&b, &[0.25, 0.75], &[0.0, 1.0]).unwrap();
        assert_eq!(out.h_seg, vec![0.25, 0.75]);
        assert_eq!(out.h_det, vec![0.0, 1.0]);
        assert_eq!(out.w_seg, vec![0.25, 0.75]);
    }

    #[test]
    fn fused_vector_in_convex_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(1..5);
            let d = rng.random_range(1..6);
            let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let b = bundle(n, d, data.clone());
            let out = fuse(&b, &w, &w).unwrap();
            for j in 0..d {
                let col: Vec<f64> = (0..n).map(|k| data[k * d + j]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(out.h_seg[j] >= lo - 1e-12 && out.h_seg[j] <= hi + 1e-12);
            }
        }
    }
}
