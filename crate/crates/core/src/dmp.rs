//! Discrete dynamic movement primitives, one per joint, fit from
//! demonstrations by ridge regression.
//!
//! Transformation system: `tau·v' = alpha_z (beta_z (g - y) - v) + f(s)`,
//! `tau·y' = v`, driven by the canonical decay `tau·s' = -alpha_s·s`. The
//! forcing term is the non-goal-scaled form `f(s) = s·Σ w_i ψ_i / Σ ψ_j`,
//! which avoids the singularity when a joint's goal equals its start.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ridge::ridge_solve;
use crate::rng::derive_seed;

pub const NUM_JOINTS: usize = 7;
/// Samples per demonstration over its duration.
pub const DEMO_SAMPLES: usize = 200;
/// Demonstration duration in seconds.
pub const DEMO_DURATION: f64 = 1.0;

pub const DEFAULT_ALPHA_Z: f64 = 25.0;
pub const DEFAULT_ALPHA_S: f64 = 8.0;
pub const DEFAULT_N_BASIS: usize = 20;
pub const DEFAULT_LAMBDA: f64 = 1e-6;

/// Joint whose goal encodes the cut approach distance.
pub const APPROACH_JOINT: usize = 0;
/// Goal shift per commanded cm of slice thickness, rad/cm.
pub const GOAL_SHIFT_PER_CM: f64 = 0.02;

/// Nominal joint start positions for synthetic demonstrations (rad).
const DEMO_START: [f64; NUM_JOINTS] = [0.30, -0.40, 0.25, -1.20, 0.10, 0.80, 0.20];
/// Nominal goal offsets from the start (rad).
const DEMO_DELTA: [f64; NUM_JOINTS] = [0.50, 0.40, -0.30, 0.55, -0.20, -0.60, 0.35];

/// One kinesthetic demonstration: uniform time grid, one position series
/// per joint.
#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub times: Vec<f64>,
    /// `joints[j][k]` is joint j at `times[k]`, in rad.
    pub joints: Vec<Vec<f64>>,
}

/// Parameters of a single-joint DMP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointDmp {
    pub weights: Vec<f64>,
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
    pub alpha_z: f64,
    pub beta_z: f64,
    pub alpha_s: f64,
    pub y0: f64,
    pub goal: f64,
    pub tau: f64,
}

/// The full cutting primitive: one DMP per joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmpParams {
    pub joints: Vec<JointDmp>,
}

/// Sampled rollout of all joints.
#[derive(Clone, Debug)]
pub struct RolloutResult {
    pub times: Vec<f64>,
    /// `positions[j][k]` is joint j at `times[k]`.
    pub positions: Vec<Vec<f64>>,
}

/// Gaussian basis centers spaced uniformly in canonical phase.
pub fn basis_centers(n_basis: usize, alpha_s: f64) -> Vec<f64> {
    (0..n_basis)
        .map(|i| (-alpha_s * i as f64 / (n_basis - 1) as f64).exp())
        .collect()
}

/// `h_i = 1/(c_{i+1} - c_i)^2`, last width repeated.
pub fn basis_widths(centers: &[f64]) -> Vec<f64> {
    let mut widths: Vec<f64> = centers
        .windows(2)
        .map(|c| 1.0 / (c[1] - c[0]).powi(2))
        .collect();
    widths.push(*widths.last().expect("n_basis >= 2"));
    widths
}

fn forcing(joint: &JointDmp, s: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&w, &c), &h) in joint.weights.iter().zip(&joint.centers).zip(&joint.widths) {
        let psi = (-h * (s - c) * (s - c)).exp();
        num += w * psi;
        den += psi;
    }
    if den == 0.0 {
        0.0
    } else {
        s * num / den
    }
}

/// Synthesize `n` noisy minimum-jerk demonstrations.
///
/// Each joint follows `y0 + (g - y0)(10 s^3 - 15 s^4 + 6 s^5)` plus a
/// smooth seeded perturbation of at most `amplitude` rad that vanishes at
/// both endpoints.
pub fn synth_demos_with_amplitude(seed: u64, n: usize, amplitude: f64) -> Result<Vec<Demonstration>> {
    if n < 1 {
        return Err(Error::EmptyInput("demonstration count"));
    }
    let times: Vec<f64> = (0..DEMO_SAMPLES)
        .map(|k| DEMO_DURATION * k as f64 / (DEMO_SAMPLES - 1) as f64)
        .collect();
    let per_term = amplitude / 3.0;
    let mut demos = Vec::with_capacity(n);
    for demo_idx in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, demo_idx as u64));
        let mut joints = Vec::with_capacity(NUM_JOINTS);
        for j in 0..NUM_JOINTS {
            let coeffs: Vec<f64> = (0..3)
                .map(|_| if per_term > 0.0 { rng.gen_range(-per_term..per_term) } else { 0.0 })
                .collect();
            let series = times
                .iter()
                .map(|&t| {
                    let s = t / DEMO_DURATION;
                    let shape = 10.0 * s.powi(3) - 15.0 * s.powi(4) + 6.0 * s.powi(5);
                    let wobble: f64 = coeffs
                        .iter()
                        .enumerate()
                        .map(|(k, &a)| a * (std::f64::consts::PI * (k + 1) as f64 * s).sin())
                        .sum();
                    DEMO_START[j] + DEMO_DELTA[j] * shape + wobble
                })
                .collect();
            joints.push(series);
        }
        demos.push(Demonstration { times: times.clone(), joints });
    }
    Ok(demos)
}

/// Synthetic demonstrations with the default 0.02 rad perturbation budget.
pub fn synth_demos(seed: u64, n: usize) -> Result<Vec<Demonstration>> {
    synth_demos_with_amplitude(seed, n, 0.02)
}

/// First and second derivatives on a uniform grid, fourth order
/// everywhere.
///
/// Central stencils in the interior, one-sided Fornberg stencils at the
/// two points on each edge. The forcing target is stiff near the start,
/// so lower-order edge rows would visibly bias the first basis weights.
fn differentiate(y: &[f64], h: f64) -> (Vec<f64>, Vec<f64>) {
    let n = y.len();
    debug_assert!(n >= 6);
    let mut dy = vec![0.0; n];
    let mut ddy = vec![0.0; n];
    let d1_edge0: [f64; 5] = [-25.0, 48.0, -36.0, 16.0, -3.0];
    let d1_edge1: [f64; 5] = [-3.0, -10.0, 18.0, -6.0, 1.0];
    let d2_edge0: [f64; 6] = [45.0, -154.0, 214.0, -156.0, 61.0, -10.0];
    let d2_edge1: [f64; 6] = [10.0, -15.0, -4.0, 14.0, -6.0, 1.0];
    let apply = |coeffs: &[f64], base: usize, step: isize| -> f64 {
        coeffs
            .iter()
            .enumerate()
            .map(|(k, &c)| c * y[(base as isize + step * k as isize) as usize])
            .sum()
    };
    for i in 0..n {
        if i >= 2 && i + 2 < n {
            dy[i] = (y[i - 2] - 8.0 * y[i - 1] + 8.0 * y[i + 1] - y[i + 2]) / (12.0 * h);
            ddy[i] = (-y[i - 2] + 16.0 * y[i - 1] - 30.0 * y[i] + 16.0 * y[i + 1] - y[i + 2])
                / (12.0 * h * h);
        } else if i == 0 {
            dy[i] = apply(&d1_edge0, 0, 1) / (12.0 * h);
            ddy[i] = apply(&d2_edge0, 0, 1) / (12.0 * h * h);
        } else if i == 1 {
            dy[i] = apply(&d1_edge1, 0, 1) / (12.0 * h);
            ddy[i] = apply(&d2_edge1, 0, 1) / (12.0 * h * h);
        } else if i == n - 1 {
            dy[i] = -apply(&d1_edge0, n - 1, -1) / (12.0 * h);
            ddy[i] = apply(&d2_edge0, n - 1, -1) / (12.0 * h * h);
        } else {
            dy[i] = -apply(&d1_edge1, n - 1, -1) / (12.0 * h);
            ddy[i] = apply(&d2_edge1, n - 1, -1) / (12.0 * h * h);
        }
    }
    (dy, ddy)
}

/// Fit one DMP per joint by ridge regression over all stacked demos.
pub fn fit_dmp(demos: &[Demonstration], n_basis: usize, lambda: f64) -> Result<DmpParams> {
    if demos.is_empty() {
        return Err(Error::EmptyInput("demonstrations"));
    }
    if n_basis < 2 {
        return Err(Error::InvalidValue { context: "n_basis", value: n_basis as f64 });
    }
    let alpha_z = DEFAULT_ALPHA_Z;
    let beta_z = alpha_z / 4.0;
    let alpha_s = DEFAULT_ALPHA_S;
    let tau = *demos[0].times.last().ok_or(Error::EmptyInput("demo times"))?;
    let centers = basis_centers(n_basis, alpha_s);
    let widths = basis_widths(&centers);

    let mut joints = Vec::with_capacity(NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        let y0 = demos.iter().map(|d| d.joints[j][0]).sum::<f64>() / demos.len() as f64;
        let goal = demos.iter().map(|d| *d.joints[j].last().unwrap()).sum::<f64>()
            / demos.len() as f64;

        let mut rows: Vec<f64> = Vec::new();
        let mut targets: Vec<f64> = Vec::new();
        for demo in demos {
            let h = demo.times[1] - demo.times[0];
            let y = &demo.joints[j];
            let (dy, ddy) = differentiate(y, h);
            for (k, &t) in demo.times.iter().enumerate() {
                let s = (-alpha_s * t / tau).exp();
                let mut den = 0.0;
                let mut feats = Vec::with_capacity(n_basis);
                for (&c, &w) in centers.iter().zip(&widths) {
                    let psi = (-w * (s - c) * (s - c)).exp();
                    feats.push(psi);
                    den += psi;
                }
                for f in feats.iter_mut() {
                    *f *= s / den;
                }
                rows.extend_from_slice(&feats);
                targets.push(
                    tau * tau * ddy[k] - alpha_z * (beta_z * (goal - y[k]) - tau * dy[k]),
                );
            }
        }
        let weights = ridge_solve(&rows, &targets, targets.len(), n_basis, lambda)?;
        joints.push(JointDmp {
            weights,
            centers: centers.clone(),
            widths: widths.clone(),
            alpha_z,
            beta_z,
            alpha_s,
            y0,
            goal,
            tau,
        });
    }
    Ok(DmpParams { joints })
}

/// Euler-integrate every joint for its duration.
pub fn rollout(params: &DmpParams, dt: f64) -> Result<RolloutResult> {
    if params.joints.is_empty() {
        return Err(Error::EmptyInput("dmp joints"));
    }
    let tau = params.joints[0].tau;
    if !(dt > 0.0) || dt > tau / 100.0 {
        return Err(Error::InvalidValue { context: "rollout dt", value: dt });
    }
    let steps = (tau / dt).round() as usize;
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
    let mut positions = Vec::with_capacity(params.joints.len());
    for joint in &params.joints {
        let mut y = joint.y0;
        let mut v = 0.0;
        let mut s = 1.0;
        let mut series = Vec::with_capacity(steps + 1);
        series.push(y);
        for _ in 0..steps {
            let f = forcing(joint, s);
            let dv = (joint.alpha_z * (joint.beta_z * (joint.goal - y) - v) + f) / joint.tau;
            let dyy = v / joint.tau;
            y += dt * dyy;
            v += dt * dv;
            s += dt * (-joint.alpha_s * s / joint.tau);
            series.push(y);
        }
        positions.push(series);
    }
    Ok(RolloutResult { times, positions })
}

/// Shift the approach joint's goal by the commanded slice thickness.
pub fn parameterize_cut(base: &DmpParams, d_cm: f64) -> Result<DmpParams> {
    if d_cm < 0.0 {
        return Err(Error::InvalidValue { context: "cut parameter d", value: d_cm });
    }
    let mut out = base.clone();
    out.joints[APPROACH_JOINT].goal += GOAL_SHIFT_PER_CM * d_cm;
    Ok(out)
}

/// Write demonstrations as CSV files `demo_{i}.csv` with columns t, j0..j6.
pub fn write_demos_csv(dir: &Path, demos: &[Demonstration]) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut names = Vec::new();
    for (i, demo) in demos.iter().enumerate() {
        let name = format!("demo_{i:02}.csv");
        let mut text = String::from("t,j0,j1,j2,j3,j4,j5,j6\n");
        for (k, &t) in demo.times.iter().enumerate() {
            text.push_str(&format!("{t}"));
            for series in &demo.joints {
                text.push_str(&format!(",{}", series[k]));
            }
            text.push('\n');
        }
        let path = dir.join(&name);
        fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
        names.push(name);
    }
    Ok(names)
}

/// Write one rollout as CSV with columns t, j0..j6.
pub fn write_rollout_csv(path: &Path, result: &RolloutResult) -> Result<()> {
    let mut text = String::from("t,j0,j1,j2,j3,j4,j5,j6\n");
    for (k, &t) in result.times.iter().enumerate() {
        text.push_str(&format!("{t}"));
        for series in &result.positions {
            text.push_str(&format!(",{}", series[k]));
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn save_params(path: &Path, params: &DmpParams) -> Result<()> {
    let json = serde_json::to_string_pretty(params)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_params(path: &Path) -> Result<DmpParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}
