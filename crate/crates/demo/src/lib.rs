//! Browser bindings for `www/index.html`.
//!
//! Arrays cross the boundary as flat `Float64Array`s; layouts are given on
//! each function.

use wasm_bindgen::prelude::*;

use equiflow::alignment::{solve_eot, EotOptions, EotPlan};
use equiflow::data::{synthetic_toy_molecules, Molecule};
use equiflow::geometry::{apply, project_zero_com, squared_cost, PointCloud};
use equiflow::paths::{eot_training_pair, NoiseSchedule, DEFAULT_SIGMA_MIN};
use equiflow::rng;

fn js_err(e: equiflow::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `[t_0, α_0, log10 SNR_0, t_1, …]` on `n` points of (0, 1].
#[wasm_bindgen]
pub fn schedule_curves(name: &str, n: usize) -> Result<Vec<f64>, JsError> {
    let s = NoiseSchedule::from_name(name).map_err(js_err)?;
    let mut out = Vec::with_capacity(3 * n);
    for k in 1..=n {
        let t = k as f64 / n as f64;
        out.push(t);
        out.push(s.alpha(t).map_err(js_err)?);
        out.push(s.snr(t).map_err(js_err)?.log10());
    }
    Ok(out)
}

/// Result of aligning a Gaussian noise cloud to a toy molecule.
#[wasm_bindgen]
pub struct Alignment {
    noise: PointCloud,
    aligned: PointCloud,
    target: Molecule,
    plan: EotPlan,
    cost_before: f64,
}

#[wasm_bindgen]
impl Alignment {
    /// Noise cloud, as drawn: `[x0, y0, z0, x1, …]`.
    pub fn noise(&self) -> Vec<f64> {
        self.noise.to_flat()
    }

    /// Noise after the EOT rotation and permutation; row `i` is matched to atom `i`.
    pub fn aligned(&self) -> Vec<f64> {
        self.aligned.to_flat()
    }

    pub fn molecule(&self) -> Vec<f64> {
        self.target.coords.to_flat()
    }

    /// Element symbols of the molecule, space separated.
    pub fn elements(&self) -> String {
        self.target.elements.iter().map(|e| e.symbol()).collect::<Vec<_>>().join(" ")
    }

    #[wasm_bindgen(getter)]
    pub fn cost_before(&self) -> f64 {
        self.cost_before
    }

    #[wasm_bindgen(getter)]
    pub fn cost_after(&self) -> f64 {
        self.plan.cost
    }

    #[wasm_bindgen(getter)]
    pub fn iterations(&self) -> usize {
        self.plan.iterations
    }

    /// Positions along the straight conditional path at time `t`, paired by
    /// the EOT plan (`eot = true`) or by index (`eot = false`).
    pub fn interpolate(&self, t: f64, eot: bool) -> Result<Vec<f64>, JsError> {
        let n = self.target.len();
        let by_index = EotPlan::identity(n);
        let plan = if eot { &self.plan } else { &by_index };
        let (xt, _) =
            eot_training_pair(&self.noise, &self.target.coords, t, DEFAULT_SIGMA_MIN, plan).map_err(js_err)?;
        Ok(xt.to_flat())
    }
}

/// Draw a toy molecule and a same-size Gaussian cloud from `seed` and align them.
#[wasm_bindgen]
pub fn align_to_toy(seed: u32) -> Result<Alignment, JsError> {
    let target = synthetic_toy_molecules(1, seed as u64).remove(0);
    let mut r = rng::seeded(seed as u64 ^ 0x5a5a);
    let noise = project_zero_com(&PointCloud::standard_normal(target.len(), &mut r));
    let plan = solve_eot(&noise, &target.coords, &EotOptions::with_restarts(4), &mut rng::seeded(0)).map_err(js_err)?;
    let aligned = apply(&noise, &plan.rotation, &plan.permutation).map_err(js_err)?;
    let cost_before = squared_cost(&noise, &target.coords).map_err(js_err)?;
    Ok(Alignment { noise, aligned, target, plan, cost_before })
}
