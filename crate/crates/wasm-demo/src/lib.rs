//! Browser bindings for the demo page in `www/`.
//!
//! Tokens are 2-D points used directly as queries, keys and values, so the
//! attention maps can be drawn over the points themselves. The logic lives
//! in plain functions returning plain structs; the `#[wasm_bindgen]` layer
//! only copies results out.

use anchorattn::anchor::{fit_anchors, token_similarity};
use anchorattn::bench::{anchor_flops, vanilla_flops};
use anchorattn::reference::attention_weights;
use anchorattn::{anchor_affinity, seeded_rng, AnchorParams, AttentionInputs, Matrix, Result};
use wasm_bindgen::prelude::*;

fn points(xy: &[f64]) -> Result<Matrix> {
    if xy.is_empty() || !xy.len().is_multiple_of(2) {
        return Err(anchorattn::Error::Argument(format!(
            "expected a non-empty list of x,y pairs, got {} numbers",
            xy.len()
        )));
    }
    Matrix::new(xy.len() / 2, 2, xy.to_vec())
}

/// Anchors for a point cloud: `m` random points refined by `refine`
/// fixed-point steps.
pub fn anchors_for(tokens: &Matrix, m: usize, refine: usize, seed: u64) -> Result<AnchorParams> {
    if m == 0 {
        return Err(anchorattn::Error::Argument(
            "need at least one anchor".into(),
        ));
    }
    AnchorParams::from_keys(tokens, m, refine, &mut seeded_rng(seed))
}

/// Row-major `n x n` maps plus the anchors behind the second one.
#[derive(Debug, Clone, PartialEq)]
pub struct Maps {
    pub n: usize,
    pub m: usize,
    pub vanilla: Vec<f64>,
    pub anchor: Vec<f64>,
    pub anchors: Vec<f64>,
    /// `max |vanilla - anchor|` over all entries.
    pub max_gap: f64,
}

pub fn attention_maps(xy: &[f64], m: usize, refine: usize, seed: u64) -> Result<Maps> {
    let x = points(xy)?;
    let inputs = AttentionInputs::new(x.clone(), x.clone(), x.clone())?;
    let vanilla = attention_weights(&inputs)?;
    let anchors = anchors_for(&x, m, refine, seed)?;
    let s_t = token_similarity(&anchor_affinity(&anchors, &x)?)?;
    let max_gap = vanilla.max_abs_diff(&s_t)?;
    Ok(Maps {
        n: x.rows(),
        m,
        vanilla: vanilla.into_data(),
        anchor: s_t.into_data(),
        anchors: anchors.w_s.into_data(),
        max_gap,
    })
}

/// Anchor positions after each fixed-point iteration, starting from the
/// initial ones, and the objective at each of those points.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub m: usize,
    /// `(iterations + 1) * m * 2` coordinates.
    pub positions: Vec<f64>,
    pub objective: Vec<f64>,
}

pub fn fit_trajectory(xy: &[f64], m: usize, iterations: usize, seed: u64) -> Result<Trajectory> {
    let x = points(xy)?;
    let mut anchors = anchors_for(&x, m, 0, seed)?;
    let mut positions = anchors.w_s.data().to_vec();
    let mut objective = fit_anchors(&x, anchors.clone(), 0)?.objective;
    for _ in 0..iterations {
        let step = fit_anchors(&x, anchors, 1)?;
        positions.extend_from_slice(step.anchors.w_s.data());
        objective.push(step.objective[1]);
        anchors = step.anchors;
    }
    Ok(Trajectory {
        m,
        positions,
        objective,
    })
}

/// Closed-form FLOP counts at `points` token counts spaced geometrically
/// from 8 to `n_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopCurves {
    pub ns: Vec<f64>,
    pub vanilla: Vec<f64>,
    pub anchor: Vec<f64>,
    /// Smallest `n <= n_max` at which anchor attention is cheaper, if any.
    pub crossover: Option<f64>,
}

pub fn flop_curves(m: usize, d: usize, n_max: usize, points: usize) -> FlopCurves {
    let (lo, hi) = (8f64.ln(), (n_max.max(9) as f64).ln());
    let count = points.max(2);
    let mut ns: Vec<u64> = (0..count)
        .map(|i| {
            (lo + (hi - lo) * i as f64 / (count - 1) as f64)
                .exp()
                .round() as u64
        })
        .collect();
    ns.dedup();
    let (m, d) = (m.max(1) as u64, d.max(1) as u64);
    let vanilla: Vec<f64> = ns.iter().map(|&n| vanilla_flops(n, d) as f64).collect();
    let anchor: Vec<f64> = ns.iter().map(|&n| anchor_flops(n, m, d) as f64).collect();
    let crossover = crossover(m, d, n_max.max(9) as u64).map(|n| n as f64);
    FlopCurves {
        ns: ns.into_iter().map(|n| n as f64).collect(),
        vanilla,
        anchor,
        crossover,
    }
}

/// The cost difference is linear minus quadratic in `n` and positive at
/// `n = 1`, so anchors stay cheaper once they are cheaper.
fn crossover(m: u64, d: u64, n_max: u64) -> Option<u64> {
    let cheaper = |n: u64| anchor_flops(n, m, d) < vanilla_flops(n, d);
    if !cheaper(n_max) {
        return None;
    }
    let (mut lo, mut hi) = (1, n_max);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if cheaper(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Some(lo)
}

fn js_err(e: anchorattn::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct JsMaps(Maps);

#[wasm_bindgen]
impl JsMaps {
    #[wasm_bindgen(getter)]
    pub fn n(&self) -> usize {
        self.0.n
    }
    #[wasm_bindgen(getter)]
    pub fn vanilla(&self) -> Vec<f64> {
        self.0.vanilla.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn anchor(&self) -> Vec<f64> {
        self.0.anchor.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn anchors(&self) -> Vec<f64> {
        self.0.anchors.clone()
    }
    #[wasm_bindgen(getter, js_name = maxGap)]
    pub fn max_gap(&self) -> f64 {
        self.0.max_gap
    }
}

#[wasm_bindgen(js_name = attentionMaps)]
pub fn js_attention_maps(
    xy: &[f64],
    m: usize,
    refine: usize,
    seed: u64,
) -> std::result::Result<JsMaps, JsError> {
    attention_maps(xy, m, refine, seed)
        .map(JsMaps)
        .map_err(js_err)
}

#[wasm_bindgen]
pub struct JsTrajectory(Trajectory);

#[wasm_bindgen]
impl JsTrajectory {
    #[wasm_bindgen(getter)]
    pub fn positions(&self) -> Vec<f64> {
        self.0.positions.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn objective(&self) -> Vec<f64> {
        self.0.objective.clone()
    }
}

#[wasm_bindgen(js_name = fitTrajectory)]
pub fn js_fit_trajectory(
    xy: &[f64],
    m: usize,
    iterations: usize,
    seed: u64,
) -> std::result::Result<JsTrajectory, JsError> {
    fit_trajectory(xy, m, iterations, seed)
        .map(JsTrajectory)
        .map_err(js_err)
}

#[wasm_bindgen]
pub struct JsFlopCurves(FlopCurves);

#[wasm_bindgen]
impl JsFlopCurves {
    #[wasm_bindgen(getter)]
    pub fn ns(&self) -> Vec<f64> {
        self.0.ns.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn vanilla(&self) -> Vec<f64> {
        self.0.vanilla.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn anchor(&self) -> Vec<f64> {
        self.0.anchor.clone()
    }
    /// Crossover `n`, or `NaN` when anchors never win on the sampled range.
    #[wasm_bindgen(getter)]
    pub fn crossover(&self) -> f64 {
        self.0.crossover.unwrap_or(f64::NAN)
    }
}

#[wasm_bindgen(js_name = flopCurves)]
pub fn js_flop_curves(m: usize, d: usize, n_max: usize, points: usize) -> JsFlopCurves {
    JsFlopCurves(flop_curves(m, d, n_max, points))
}
