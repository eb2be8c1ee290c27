//! Finite-difference sweep over every differentiable module.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datagen::mix_seed;
use crate::decoders::{
    bbox_decode_var, mask_decode_var, soft_box_raster_var, DecoderConfig, DecoderParams,
};
use crate::error::Result;
use crate::fusion::{fuse_var, route_var, FusionConfig, FusionMode, Router, RouterParams};
use crate::geometry::{BBox, Mask};
use crate::gradcheck::finite_difference_check;
use crate::losses::{
    bbox_loss_var, giou_loss_var, mask_loss_var, sim_loss_var, text_ce_var, LossWeights,
};
use crate::mllm::{forward_var, MllmConfig, ModelParams};
use crate::params::{gaussian, Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub instances: usize,
    pub coords: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub entries: Vec<SuiteEntry>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }
}

type Check = fn(&mut ChaCha8Rng, u64) -> Result<(f64, usize)>;

const ENTRIES: [(&str, usize, Check); 12] = [
    ("loss.bce", 50, check_bce),
    ("loss.dice", 50, check_dice),
    ("loss.l1", 50, check_l1),
    ("loss.giou", 50, check_giou),
    ("loss.js", 50, check_js),
    ("loss.mse", 50, check_mse),
    ("loss.text_ce", 50, check_text_ce),
    ("fusion.soft", 20, check_fusion),
    ("decoder.bbox", 20, check_bbox_decoder),
    ("decoder.box_raster", 50, check_raster),
    ("decoder.mask", 10, check_mask_decoder),
    ("mllm.two_block", 3, check_mllm),
];

/// Runs every entry with its instance count; each passes when its worst
/// relative error stays below `tolerance`.
pub fn run_gradient_suite(seed: u64, tolerance: f64) -> Result<SuiteReport> {
    let t0 = Instant::now();
    let mut entries = Vec::with_capacity(ENTRIES.len());
    for (name, instances, check) in ENTRIES.iter() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[name.as_bytes()]));
        let (mut worst, mut coords) = (0.0f64, 0);
        for i in 0..*instances {
            let (e, c) = check(
                &mut rng,
                mix_seed(seed, &[name.as_bytes(), &i.to_le_bytes()]),
            )?;
            worst = worst.max(e);
            coords += c;
        }
        log::debug!("gradcheck {name}: max rel err {worst:.3e} over {coords} coords");
        entries.push(SuiteEntry {
            name,
            instances: *instances,
            coords,
            max_rel_error: worst,
            passed: worst < tolerance,
        });
    }
    Ok(SuiteReport {
        tolerance,
        entries,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

fn run<F>(f: F, params: &[Tensor], max_coords: Option<usize>, seed: u64) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let r = finite_difference_check(f, params, FD_STEP, max_coords, seed)?;
    Ok((r.max_rel_error, r.coords_checked))
}

/// Checks a function of every tensor in `store` plus `extra` leaves.
fn run_store<F>(
    store: &ParamStore,
    extra: Vec<Tensor>,
    f: F,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    let mut params: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let k = params.len();
    params.extend(extra);
    run(
        |tape, vars| {
            let b = Bound::from_pairs(names.iter().cloned().zip(vars[..k].iter().copied()));
            f(tape, &b, &vars[k..])
        },
        &params,
        max_coords,
        seed,
    )
}

/// Projects `v` onto a fixed random direction so vector outputs become scalars.
fn project(tape: &mut Tape, v: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n = shape.iter().product();
    let dir = tape.constant(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let p = tape.mul(v, dir)?;
    tape.sum(p)
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let (a, b): (f64, f64) = (rng.random(), rng.random());
    let (c, d): (f64, f64) = (rng.random(), rng.random());
    [a.min(b), c.min(d), a.max(b), c.max(d)]
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let bits = (0..h * w).map(|_| rng.random_bool(0.4)).collect();
    Mask::new(h, w, bits).expect("mask dims")
}

fn mask_check(
    rng: &mut ChaCha8Rng,
    seed: u64,
    pick: fn(crate::losses::MaskLossVars) -> Var,
) -> Result<(f64, usize)> {
    let gt = random_mask(rng, 5, 6);
    let logits = gaussian(&[5, 6], 2.0, rng);
    let w = LossWeights::default();
    run(
        |tape, v| Ok(pick(mask_loss_var(tape, v[0], &gt, &w)?)),
        &[logits],
        None,
        seed,
    )
}

fn check_bce(rng: &mut ChaCha8Rng, seed: u64) -> Result<(f64, usize)> {
    mask_check(rng, seed, |m| m.bce)
}

fn check_dice(rng: &mut ChaCha8Rng, seed: u64) -> Result<(f64, usize)> {
    mask_check(rng, seed, |m| m.dice)
}

fn box_check(rng: &mut ChaCha8Rng, seed: u64, giou: bool) -> Result<(f64, usize)> {
    let gt = BBox::from_array(random_box(rng))?;
    let pred = Tensor::matrix(1, 4, random_box(rng).to_vec())?;
    let w = LossWeights::default();
    if giou {
        run(
            |tape, v| giou_loss_var(tape, v[0], &gt),
            &[pred],
            None,
            seed,
        )
    } else {
        run(
            |tape, v| Ok(bbox_loss_var(tape, v[0], &gt, &w)?.l1),
            &[pred],
            None,
            seed,
        )
    }
}

fn check_l1(rng: &mut ChaCha8Rng, seed: u64) -> Result<(f64, usize)> {
    box_check(rng, seed, false)
}

fn check_giou(rng: &mut ChaCha8Rng, seed: u64) -> Result<(f64, usize)> {
    box_check(rng, seed, true)
}

fn sim_check(rng: &mut ChaCha8Rng, seed: u64, js: bool) -> Result<(f64, usize)> {
    let p = 12;
    let reference: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
    let pred = Tensor::from_vec((0..p).map(|_| rng.random_range(-2.0..2.0)).collect());
    let w = LossWeights::default();
    run(
        |tape, v| {
            let s = sim_loss_var(tape, v[0], &reference, &w)?;
            Ok(if js { s.js } else { s.mse })
        },
        &[pred],
        None,
        seed,
    )
}

fn check_js(rng: &mut ChaCha8Rng, seed: u64) -> Result<(f64, usize)> {
    sim_check(rng, seed, true)
}

fn check_mse(rng: &mut ChaCha8Rng, seed: u64) -> Result<(f64, usize)> {
    sim_check(rng, seed, false)
}

fn check_text_ce(rng: &mut ChaCha8Rng, seed: u64) -> Result<(f64, usize)> {
    let (t, v) = (5, 7);
    let targets: Vec<Option<usize>> = (0..t)
        .map(|i| (i != 1).then(|| rng.random_range(0..v)))
        .collect();
    let logits = gaussian(&[t, v], 2.0, rng);
    run(
        |tape, x| text_ce_var(tape, x[0], &targets),
        &[logits],
        None,
        seed,
    )
}

fn check_fusion(rng: &mut ChaCha8Rng, seed: u64) -> Result<(f64, usize)> {
    let d = 6;
    let cfg = FusionConfig {
        n: 3,
        mode: FusionMode::Soft,
        router_hidden: 5,
    };
    let params = RouterParams::init(cfg.clone(), d, seed)?;
    let cands = gaussian(&[cfg.n, d], 1.0, rng);
    let dir_seed: u64 = rng.random();
    run_store(
        &params.store,
        vec![cands],
        |tape, b, x| {
            let mut r = ChaCha8Rng::seed_from_u64(dir_seed);
            let ws = route_var(tape, b, &cfg, x[0], Router::Seg)?;
            let wd = route_var(tape, b, &cfg, x[0], Router::Det)?;
            let hs = fuse_var(tape, x[0], ws)?;
            let hd = fuse_var(tape, x[0], wd)?;
            let a = project(tape, hs, &mut r)?;
            let c = project(tape, hd, &mut r)?;
            tape.add(a, c)
        },
        None,
        seed,
    )
}

fn check_bbox_decoder(rng: &mut ChaCha8Rng, seed: u64) -> Result<(f64, usize)> {
    let d = 10;
    let cfg = DecoderConfig {
        bbox_hidden: 6,
        ..DecoderConfig::default()
    };
    let params = DecoderParams::init(cfg, d, seed)?;
    let store = subset(&params.store, "bbox.");
    let h = gaussian(&[1, d], 1.0, rng);
    let dir_seed: u64 = rng.random();
    run_store(
        &store,
        vec![h],
        |tape, b, x| {
            let bx = bbox_decode_var(tape, b, x[0])?;
            project(tape, bx, &mut ChaCha8Rng::seed_from_u64(dir_seed))
        },
        None,
        seed,
    )
}

fn check_raster(rng: &mut ChaCha8Rng, seed: u64) -> Result<(f64, usize)> {
    let bx = Tensor::matrix(1, 4, random_box(rng).to_vec())?;
    let dir_seed: u64 = rng.random();
    run(
        |tape, v| {
            let r = soft_box_raster_var(tape, v[0], 7, 9, 10.0)?;
            project(tape, r, &mut ChaCha8Rng::seed_from_u64(dir_seed))
        },
        &[bx],
        None,
        seed,
    )
}

fn check_mask_decoder(rng: &mut ChaCha8Rng, seed: u64) -> Result<(f64, usize)> {
    let d = 6;
    let cfg = DecoderConfig::default();
    let params = DecoderParams::init(cfg.clone(), d, seed)?;
    let store = subset(&params.store, "mask.");
    let (grid, out) = ((3, 4), (6, 8));
    let features = gaussian(&[grid.0 * grid.1, d], 1.0, rng);
    let h_seg = gaussian(&[1, d], 1.0, rng);
    let bx = Tensor::matrix(1, 4, random_box(rng).to_vec())?;
    let dir_seed: u64 = rng.random();
    run_store(
        &store,
        vec![features, h_seg, bx],
        |tape, b, x| {
            let m = mask_decode_var(tape, b, &cfg, x[0], grid, x[1], Some(x[2]), out)?;
            project(tape, m, &mut ChaCha8Rng::seed_from_u64(dir_seed))
        },
        None,
        seed,
    )
}

fn check_mllm(rng: &mut ChaCha8Rng, seed: u64) -> Result<(f64, usize)> {
    let cfg = MllmConfig {
        image_size: 32,
        ..MllmConfig::default()
    };
    let params = ModelParams::init(cfg.clone(), seed)?;
    let patches = gaussian(&[cfg.num_patches(), cfg.d_model], 1.0, rng);
    let ids: Vec<usize> = (0..6)
        .map(|_| rng.random_range(0..cfg.base_vocab))
        .collect();
    let targets: Vec<Option<usize>> = (0..ids.len()).map(|i| ids.get(i + 1).copied()).collect();
    run_store(
        &params.store,
        vec![patches],
        |tape, b, x| {
            let out = forward_var(tape, b, &cfg, Some(x[0]), &ids, None)?;
            text_ce_var(tape, out.logits, &targets)
        },
        Some(2),
        seed,
    )
}

fn subset(store: &ParamStore, prefix: &str) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in store.iter().filter(|(n, _)| n.starts_with(prefix)) {
        s.insert(name, t.clone(), true);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_default_tolerance() {
        let r = run_gradient_suite(3, 1e-4).unwrap();
        assert_eq!(r.entries.len(), ENTRIES.len());
        for e in &r.entries {
            assert!(e.passed, "{}: {:.3e}", e.name, e.max_rel_error);
            assert!(e.coords > 0);
        }
    }
}
