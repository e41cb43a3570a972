//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function is a thin wrapper over a plain Rust function of the
//! same name in [`demo`], which is what the native tests exercise.

use wasm_bindgen::prelude::*;

pub mod demo {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use semslam_core::engine::QueryMode;
    use semslam_core::experiments::{run_trace, TraceOptions, TraceRecord};
    use semslam_core::scenario::{generate, Placement, ScenarioObject, ScenarioOptions};
    use semslam_core::semantic::{sample_observation_at, viewpoint_coeff};
    use semslam_core::{Pose2, SemanticModelParams};
    use serde::Serialize;

    /// Viewpoint coefficient `h` on a `resolution x resolution` grid of robot
    /// positions over `[-extent, extent]^2`, with an object at the origin
    /// facing `heading` and the robot always looking at it. Row-major, first
    /// row at `y = extent`.
    pub fn viewpoint_grid(heading: f64, resolution: usize, extent: f64) -> Result<Vec<f64>, String> {
        if resolution < 2 || !(extent > 0.0) {
            return Err("need resolution >= 2 and extent > 0".into());
        }
        let object = Pose2::new(0.0, 0.0, heading);
        let step = 2.0 * extent / (resolution - 1) as f64;
        let mut out = Vec::with_capacity(resolution * resolution);
        for row in 0..resolution {
            let y = extent - row as f64 * step;
            for col in 0..resolution {
                let x = -extent + col as f64 * step;
                let robot = Pose2::new(x, y, (-y).atan2(-x));
                out.push(viewpoint_coeff(&robot, &object).unwrap_or(0.0));
            }
        }
        Ok(out)
    }

    /// `n` classifier score vectors over three classes, flattened.
    pub fn simplex_samples(class: usize, h: f64, sigma_s: f64, n: usize, seed: u64) -> Result<Vec<f64>, String> {
        let params = SemanticModelParams::new(3, sigma_s).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(3 * n);
        for _ in 0..n {
            let z = sample_observation_at(h, class, &params, &mut rng).map_err(|e| e.to_string())?;
            out.extend_from_slice(&z.probs);
        }
        Ok(out)
    }

    #[derive(Serialize)]
    pub struct TraceView {
        pub objects: Vec<ScenarioObject>,
        pub waypoints: Vec<Pose2>,
        pub estimate: Vec<Pose2>,
        pub records: Vec<TraceRecord>,
    }

    /// Generates a scenario, runs the naive, exact and bound modes over the
    /// whole loop and returns everything the page plots.
    pub fn trace(
        n_objects: usize,
        n_classes: usize,
        dependent: bool,
        truth_retained: bool,
        n_samples: usize,
        seed: u64,
    ) -> Result<TraceView, String> {
        let scenario = generate(&ScenarioOptions {
            n_objects,
            n_classes,
            seed,
            dependent_prior: dependent,
            placement: if truth_retained { Placement::In } else { Placement::Out },
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let opts = TraceOptions {
            n_samples,
            modes: vec![QueryMode::Naive, QueryMode::ExactIndependent, QueryMode::Bound],
            seed,
            ..Default::default()
        };
        let run = run_trace(&scenario, &opts).map_err(|e| e.to_string())?;
        Ok(TraceView {
            objects: scenario.objects,
            waypoints: scenario.waypoints,
            estimate: run.final_poses,
            records: run.records,
        })
    }
}

#[wasm_bindgen]
pub fn viewpoint_grid(heading: f64, resolution: usize, extent: f64) -> Result<Vec<f64>, JsError> {
    demo::viewpoint_grid(heading, resolution, extent).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn simplex_samples(class: usize, h: f64, sigma_s: f64, n: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    demo::simplex_samples(class, h, sigma_s, n, seed).map_err(|e| JsError::new(&e))
}

/// JSON with `objects`, `waypoints`, `estimate` and per-step `records`.
#[wasm_bindgen]
pub fn trace_json(
    n_objects: usize,
    n_classes: usize,
    dependent: bool,
    truth_retained: bool,
    n_samples: usize,
    seed: u64,
) -> Result<String, JsError> {
    let view = demo::trace(n_objects, n_classes, dependent, truth_retained, n_samples, seed)
        .map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&view).map_err(|e| JsError::new(&e.to_string()))
}
