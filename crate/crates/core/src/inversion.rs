//! Deterministic DDIM inversion and the two diagnostics built on it.
//!
//! One inversion step maps `x_{t-1}` to
//!
//! ```text
//! x_t = sqrt(a_t / a_{t-1}) x_{t-1}
//!     + (sqrt(1 - a_t) - sqrt(a_t / a_{t-1} - a_t)) eps(x_{t-1}, t - 1, c)
//! ```
//!
//! which undoes a sampler step exactly whenever `eps(x_t, t) = eps(x_{t-1}, t - 1)`.
//! The noise at `t - 1 = 0` goes through the usual time embedding with `t/T = 0`.

use crate::denoiser::{Condition, EpsQuery, NoisePredictor};
use crate::diffusion::{sample_final, Direction, Trajectory, TrajectoryBatch};
use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, DenseArray};
use crate::par;
use crate::schedule::NoiseSchedule;

/// Coefficients `(state, noise)` of the inversion step into `t`.
fn step_coefficients(schedule: &NoiseSchedule, t: usize) -> (f64, f64) {
    let (a, a_prev) = (schedule.alpha(t), schedule.alpha(t - 1));
    let ratio = a / a_prev;
    // Nonnegative whenever a_prev <= 1; clamp round-off at a_prev = 1.
    let radicand = (ratio - a).max(0.0);
    (ratio.sqrt(), (1.0 - a).sqrt() - radicand.sqrt())
}

pub(crate) fn invert_step_rows<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x: &mut [f64],
    t: usize,
    conds: &[Condition],
) -> Result<()> {
    schedule.check_step(t)?;
    let ts = vec![t - 1; conds.len()];
    let eps = model.predict(EpsQuery {
        x,
        t: &ts,
        steps: schedule.steps(),
        conds,
    })?;
    let (k_state, k_noise) = step_coefficients(schedule, t);
    for (xv, e) in x.iter_mut().zip(&eps) {
        *xv = k_state * *xv + k_noise * e;
    }
    ensure_finite(x, "inversion step")
}

/// Maps `x_{t-1}` to `x_t`.
pub fn invert_step<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_prev: &DenseArray,
    t: usize,
    c: Condition,
) -> Result<DenseArray> {
    if x_prev.len() != model.data_dim() {
        return Err(Error::invalid("state dimension differs from the model"));
    }
    let mut x = x_prev.as_slice().to_vec();
    invert_step_rows(model, schedule, &mut x, t, &[c])?;
    DenseArray::new(x_prev.shape().to_vec(), x)
}

/// Inverts every row of `x0` up to step `upto` (inclusive). The batch holds
/// `upto + 1` states.
pub fn invert_batch_upto<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x0: &[f64],
    conds: &[Condition],
    upto: usize,
) -> Result<TrajectoryBatch> {
    let d = model.data_dim();
    if x0.len() != conds.len() * d {
        return Err(Error::invalid("clean samples do not match the batch"));
    }
    if upto > schedule.steps() {
        return Err(Error::invalid(format!(
            "cannot invert to step {upto} on a {}-step schedule",
            schedule.steps()
        )));
    }
    ensure_finite(x0, "clean sample")?;
    let mut states = Vec::with_capacity(upto + 1);
    let mut x = x0.to_vec();
    states.push(x.clone());
    for t in 1..=upto {
        invert_step_rows(model, schedule, &mut x, t, conds)?;
        states.push(x.clone());
    }
    Ok(TrajectoryBatch {
        states,
        dim: d,
        conds: conds.to_vec(),
        direction: Direction::Inverted,
    })
}

pub fn invert_batch<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x0: &[f64],
    conds: &[Condition],
) -> Result<TrajectoryBatch> {
    invert_batch_upto(model, schedule, x0, conds, schedule.steps())
}

pub fn invert<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x0: &DenseArray,
    c: Condition,
) -> Result<Trajectory> {
    invert_batch(model, schedule, x0.as_slice(), &[c])?.trajectory(0)
}

/// `||sample(invert(x0).x_T).x_0 - x0|| / (||x0|| + 1e-12)` per row.
pub fn roundtrip_errors<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x0: &[f64],
    conds: &[Condition],
) -> Result<Vec<f64>> {
    let d = model.data_dim();
    let inv = invert_batch(model, schedule, x0, conds)?;
    let back = sample_final(model, schedule, &inv.states[schedule.steps()], conds)?;
    Ok(x0
        .chunks_exact(d)
        .zip(back.chunks_exact(d))
        .map(|(a, b)| {
            let diff: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
            let norm: f64 = a.iter().map(|p| p * p).sum();
            diff.sqrt() / (norm.sqrt() + 1e-12)
        })
        .collect())
}

pub fn roundtrip_error<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x0: &DenseArray,
    c: Condition,
) -> Result<f64> {
    Ok(roundtrip_errors(model, schedule, x0.as_slice(), &[c])?[0])
}

/// Mean over `t = 1..=T` of `||eps(x_t, t) - eps(x_{t-1}, t - 1)||` per row.
pub fn adjacent_eps_gaps<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    traj: &TrajectoryBatch,
) -> Result<Vec<f64>> {
    let steps = traj.steps();
    if steps == 0 {
        return Err(Error::invalid("trajectory has no steps"));
    }
    if steps != schedule.steps() {
        return Err(Error::invalid(format!(
            "trajectory has {steps} steps, schedule has {}",
            schedule.steps()
        )));
    }
    let rows = traj.rows();
    let eps: Vec<Vec<f64>> = par::try_map_indexed(steps + 1, |t| {
        model.predict(EpsQuery {
            x: &traj.states[t],
            t: &vec![t; rows],
            steps,
            conds: &traj.conds,
        })
    })?;
    let d = traj.dim;
    let mut gaps = vec![0.0; rows];
    for t in 1..=steps {
        for (r, gap) in gaps.iter_mut().enumerate() {
            let sq: f64 = eps[t][r * d..(r + 1) * d]
                .iter()
                .zip(&eps[t - 1][r * d..(r + 1) * d])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            *gap += sq.sqrt();
        }
    }
    Ok(gaps.into_iter().map(|g| g / steps as f64).collect())
}

pub fn adjacent_eps_gap<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    traj: &Trajectory,
) -> Result<f64> {
    if traj.states.len() < 2 {
        return Err(Error::invalid("trajectory has no steps"));
    }
    let batch = TrajectoryBatch {
        states: traj.states.iter().map(|s| s.as_slice().to_vec()).collect(),
        dim: model.data_dim(),
        conds: vec![traj.condition],
        direction: traj.direction,
    };
    Ok(adjacent_eps_gaps(model, schedule, &batch)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::stubs::AffineModel;
    use crate::diffusion::sample;
    use crate::numerics::RngState;

    const C0: Condition = Condition::unchecked(0);

    fn arr(v: &[f64]) -> DenseArray {
        DenseArray::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn zero_model_step_and_telescoping() {
        let s = NoiseSchedule::from_alphas(vec![1.0, 0.81]).unwrap();
        let zero = AffineModel::constant(vec![0.0]);
        let x1 = invert_step(&zero, &s, &arr(&[1.0]), 1, C0).unwrap();
        assert!((x1.as_slice()[0] - 0.9).abs() < 1e-15);
        assert!(invert_step(&zero, &s, &arr(&[1.0]), 2, C0).is_err());
        assert!(invert_step(&zero, &s, &arr(&[1.0]), 0, C0).is_err());

        let s = NoiseSchedule::default();
        let x0 = arr(&[2.0, -3.0]);
        let zero2 = AffineModel::constant(vec![0.0, 0.0]);
        let traj = invert(&zero2, &s, &x0, C0).unwrap();
        assert_eq!(traj.states.len(), 81);
        assert_eq!(traj.direction, Direction::Inverted);
        assert_eq!(traj.start(), &x0);
        let k = s.alpha_final().sqrt();
        for (a, b) in traj.end().as_slice().iter().zip(x0.as_slice()) {
            assert!((a - k * b).abs() < 1e-12);
        }
    }

    #[test]
    fn first_step_uses_forward_noising_form() {
        // With alpha_0 = 1 the second radicand vanishes:
        // x_1 = sqrt(a_1) x_0 + sqrt(1 - a_1) eps(x_0, 0).
        let s = NoiseSchedule::from_alphas(vec![1.0, 0.64, 0.3]).unwrap();
        let m = AffineModel::new(vec![0.2, 0.1, -0.3, 0.4], vec![0.05, 0.5]).unwrap();
        let x0 = arr(&[1.0, -2.0]);
        let e = m.eps(&x0, 0, 2, C0).unwrap();
        let x1 = invert_step(&m, &s, &x0, 1, C0).unwrap();
        for k in 0..2 {
            let want = 0.8 * x0.as_slice()[k] + 0.6 * e.as_slice()[k];
            assert!((x1.as_slice()[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn scalar_affine_recursion_oracle() {
        // eps(x) = 0.1 x, alpha = [1, 0.81, 0.49], x0 = 1, evaluated by hand:
        // x1 = 0.9 + 0.1 sqrt(0.19)
        // x2 = x1 (sqrt(0.49/0.81) + 0.1 (sqrt(0.51) - sqrt(0.49/0.81 - 0.49)))
        let s = NoiseSchedule::from_alphas(vec![1.0, 0.81, 0.49]).unwrap();
        let m = AffineModel::scaled_identity(1, 0.1);
        let traj = invert(&m, &s, &arr(&[1.0]), C0).unwrap();
        let x1 = 0.943_588_989_435_406_8;
        let x2 = 0.769_298_209_296_227_5;
        assert!((traj.states[1].as_slice()[0] - x1).abs() < 1e-14);
        assert!((traj.states[2].as_slice()[0] - x2).abs() < 1e-14);
    }

    #[test]
    fn inversion_is_deterministic() {
        let m = AffineModel::new(vec![0.3, 0.0, 0.1, -0.2], vec![0.1, 0.1]).unwrap();
        let s = NoiseSchedule::log_linear(40, 0.01).unwrap();
        let x0 = arr(&[0.4, 0.4]);
        assert_eq!(invert(&m, &s, &x0, C0).unwrap(), invert(&m, &s, &x0, C0).unwrap());
    }

    #[test]
    fn zero_model_roundtrip_is_exact() {
        let zero = AffineModel::constant(vec![0.0, 0.0]);
        for steps in [20, 40, 80] {
            let s = NoiseSchedule::log_linear(steps, 0.01).unwrap();
            let err = roundtrip_error(&zero, &s, &arr(&[3.0, -1.0]), C0).unwrap();
            assert!(err < 1e-12, "T={steps}: {err}");
        }
    }

    #[test]
    fn constant_model_has_zero_gap_and_exact_roundtrip() {
        let m = AffineModel::constant(vec![0.7, -0.2]);
        let s = NoiseSchedule::log_linear(20, 0.01).unwrap();
        let traj = invert(&m, &s, &arr(&[1.0, 2.0]), C0).unwrap();
        assert_eq!(adjacent_eps_gap(&m, &s, &traj).unwrap(), 0.0);
        assert!(roundtrip_error(&m, &s, &arr(&[1.0, 2.0]), C0).unwrap() < 1e-12);
    }

    #[test]
    fn empty_trajectory_rejected() {
        let m = AffineModel::constant(vec![0.0]);
        let s = NoiseSchedule::log_linear(4, 0.1).unwrap();
        let traj = Trajectory {
            states: vec![arr(&[1.0])],
            direction: Direction::Inverted,
            condition: C0,
        };
        assert!(adjacent_eps_gap(&m, &s, &traj).is_err());
    }

    /// Independent 2-D affine composition: both directions are affine maps
    /// `x -> M x + v`, tracked here with explicit 2x2 matrices.
    fn affine_roundtrip_oracle(a: [[f64; 2]; 2], b: [f64; 2], alpha: &[f64], x0: [f64; 2]) -> [f64; 2] {
        type Map = ([[f64; 2]; 2], [f64; 2]);
        fn compose(outer: Map, inner: Map) -> Map {
            let (m2, v2) = outer;
            let (m1, v1) = inner;
            let mut m = [[0.0; 2]; 2];
            let mut v = v2;
            for i in 0..2 {
                for j in 0..2 {
                    m[i][j] = m2[i][0] * m1[0][j] + m2[i][1] * m1[1][j];
                }
                v[i] += m2[i][0] * v1[0] + m2[i][1] * v1[1];
            }
            (m, v)
        }
        // x + k * (A x + b) as an affine map with state coefficient c.
        let step = |c: f64, k: f64| -> Map {
            (
                [[c + k * a[0][0], k * a[0][1]], [k * a[1][0], c + k * a[1][1]]],
                [k * b[0], k * b[1]],
            )
        };
        let mut total: Map = ([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0]);
        let steps = alpha.len() - 1;
        for t in 1..=steps {
            let (at, ap) = (alpha[t], alpha[t - 1]);
            let c = (at / ap).sqrt();
            let k = (1.0 - at).sqrt() - (at / ap - at).max(0.0).sqrt();
            total = compose(step(c, k), total);
        }
        for t in (1..=steps).rev() {
            let (at, ap) = (alpha[t], alpha[t - 1]);
            let c = (ap / at).sqrt();
            let k = (1.0 - ap).sqrt() - (ap / at).sqrt() * (1.0 - at).sqrt();
            total = compose(step(c, k), total);
        }
        let (m, v) = total;
        [
            m[0][0] * x0[0] + m[0][1] * x0[1] + v[0],
            m[1][0] * x0[0] + m[1][1] * x0[1] + v[1],
        ]
    }

    #[test]
    fn affine_models_match_composed_oracle() {
        let mut rng = RngState::new(77);
        for _ in 0..20 {
            let g = rng.gaussian_vec(8);
            let a = [[0.3 * g[0], 0.3 * g[1]], [0.3 * g[2], 0.3 * g[3]]];
            let b = [g[4], g[5]];
            let x0 = [2.0 * g[6], 2.0 * g[7]];
            let steps = [5, 20, 80][rng.below(3)];
            let s = NoiseSchedule::log_linear(steps, 0.01).unwrap();
            let m = AffineModel::new(vec![a[0][0], a[0][1], a[1][0], a[1][1]], b.to_vec()).unwrap();
            let want = affine_roundtrip_oracle(a, b, s.alphas(), x0);
            let inv = invert(&m, &s, &arr(&x0), C0).unwrap();
            let back = sample(&m, &s, inv.end(), C0).unwrap();
            let got = back.start().as_slice();
            let scale = want[0].hypot(want[1]).max(1.0);
            assert!((got[0] - want[0]).abs() < 1e-10 * scale);
            assert!((got[1] - want[1]).abs() < 1e-10 * scale);
            // The oracle's deviation from identity is the error the inversion
            // reports, and it is only zero when A = 0.
            let dev = (want[0] - x0[0]).hypot(want[1] - x0[1]) / (x0[0].hypot(x0[1]) + 1e-12);
            let reported = roundtrip_error(&m, &s, &arr(&x0), C0).unwrap();
            assert!(reported <= dev + 1e-9, "reported {reported} oracle {dev}");
        }
    }
}
