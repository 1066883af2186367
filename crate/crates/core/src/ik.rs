//! Optimization-based IK retargeting between embodiments: the fingertip and
//! fingertip+midjoint baselines, and the initial robot trajectories the
//! learned pipeline starts from.
//!
//! The wrist passes through untouched; only finger joints are optimized, by
//! damped least squares with a backtracking guard so the weighted residual
//! never increases on an accepted step. Finger correspondence: human thumb,
//! index, middle, ring map to the robot's four fingers; the pinky is unused.

use crate::geom::{GeomError, HandTrajectory, Pose, RobotTrajectory, HAND_CHANNELS, ROBOT_CHANNELS};
use crate::kinematics::{jacobian, HandModel, KinError};
use nalgebra::{DMatrix, DVector, Vector3};
use ndarray::Array2;
use thiserror::Error;

/// Keypoint indices of the five human fingertips (thumb first).
pub const HUMAN_TIP_KEYPOINTS: [usize; 5] = [3, 8, 13, 18, 23];
/// Keypoint indices of the five human midjoints (thumb IP, finger DIPs).
pub const HUMAN_MID_KEYPOINTS: [usize; 5] = [2, 7, 12, 17, 22];

#[derive(Debug, Error)]
pub enum IkError {
    #[error("invalid config: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Kin(#[from] KinError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone)]
pub struct IkConfig {
    /// Damping lambda, m^2.
    pub damping: f64,
    pub max_iters: usize,
    /// Convergence tolerance on the weighted RMS residual, meters.
    pub tolerance: f64,
    /// Per-target weights: 4 fingertips, then 4 midjoints when enabled.
    /// Empty means uniform.
    pub weights: Vec<f64>,
    /// Human-to-robot fingertip scale factor.
    pub scale: f64,
    /// Also match midjoints (the stronger baseline).
    pub use_midjoints: bool,
}

impl Default for IkConfig {
    fn default() -> Self {
        IkConfig {
            damping: 1e-4,
            max_iters: 200,
            tolerance: 1e-5,
            weights: Vec::new(),
            scale: 1.15,
            use_midjoints: false,
        }
    }
}

impl IkConfig {
    fn validate(&self) -> Result<(), IkError> {
        if !(self.damping > 0.0) {
            return Err(IkError::Config("damping must be positive"));
        }
        if !(self.tolerance > 0.0) {
            return Err(IkError::Config("tolerance must be positive"));
        }
        if !(self.scale > 0.0) {
            return Err(IkError::Config("scale must be positive"));
        }
        Ok(())
    }

    fn weight(&self, k: usize) -> f64 {
        self.weights.get(k).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone)]
pub struct IkFrameResult {
    /// 25-channel robot frame: human wrist pose copied, optimized angles.
    pub frame: Vec<f64>,
    /// Weighted RMS distance to the targets, meters.
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Extracts IK targets (robot wrist frame) from one 81-channel hand frame.
fn targets_from_hand_frame(h: &[f64], cfg: &IkConfig) -> Vec<Vector3<f64>> {
    let keypoint = |k: usize| {
        let o = 9 + 3 * k;
        Vector3::new(h[o], h[o + 1], h[o + 2]) * cfg.scale
    };
    let mut targets: Vec<Vector3<f64>> =
        HUMAN_TIP_KEYPOINTS[..4].iter().map(|&k| keypoint(k)).collect();
    if cfg.use_midjoints {
        targets.extend(HUMAN_MID_KEYPOINTS[..4].iter().map(|&k| keypoint(k)));
    }
    targets
}

fn weighted_rms(
    model: &HandModel,
    angles: &[f64],
    targets: &[Vector3<f64>],
    cfg: &IkConfig,
) -> Result<(f64, Vec<Vector3<f64>>), IkError> {
    let fk = model.fk(&Pose::identity(), angles)?;
    let mut points = model.fingertip_positions(&fk);
    if cfg.use_midjoints {
        points.extend(model.midjoint_positions(&fk));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, (p, t)) in points.iter().zip(targets).enumerate() {
        let w = cfg.weight(k);
        num += w * (t - p).norm_squared();
        den += w;
    }
    Ok(((num / den).sqrt(), points))
}

/// Damped-least-squares IK for a single hand frame. The robot wrist pose is
/// the human wrist pose; joint angles minimize the weighted squared distance
/// between robot sites and scaled human keypoints, clamped to limits.
pub fn retarget_frame_ik(
    h_frame: &[f64],
    warm_start: Option<&[f64]>,
    cfg: &IkConfig,
    robot: &HandModel,
) -> Result<IkFrameResult, IkError> {
    cfg.validate()?;
    assert_eq!(h_frame.len(), HAND_CHANNELS, "hand frame channel count");
    let targets = targets_from_hand_frame(h_frame, cfg);
    let n = robot.dof();

    let mut angles: Vec<f64> = match warm_start {
        Some(w) => w.to_vec(),
        None => robot.open_angles.clone(),
    };
    robot.clamp_angles(&mut angles);

    let mut sites: Vec<usize> = robot.fingertips.clone();
    if cfg.use_midjoints {
        sites.extend(robot.midjoints.iter().copied());
    }

    let (mut residual, mut points) = weighted_rms(robot, &angles, &targets, cfg)?;
    let mut iterations = 0;
    let mut converged = residual < cfg.tolerance;

    while !converged && iterations < cfg.max_iters {
        iterations += 1;
        // Stacked weighted system over all targets.
        let rows = 3 * targets.len();
        let mut jw = DMatrix::<f64>::zeros(rows, n);
        let mut rw = DVector::<f64>::zeros(rows);
        let full = robot.full_angles(&angles)?;
        for (k, (&site, target)) in sites.iter().zip(&targets).enumerate() {
            let jac = jacobian(&robot.chain, &Pose::identity(), &full, site)?;
            let w = cfg.weight(k).sqrt();
            let diff = target - points[k];
            for r in 0..3 {
                rw[3 * k + r] = w * diff[r];
                for (slot, &j) in robot.actuated.iter().enumerate() {
                    jw[(3 * k + r, slot)] = w * jac[(r, j)];
                }
            }
        }
        let jtj = jw.transpose() * &jw + DMatrix::identity(n, n) * cfg.damping;
        let jtr = jw.transpose() * rw;
        let Some(chol) = jtj.cholesky() else { break };
        let step = chol.solve(&jtr);

        // Backtracking: accept the first step size that reduces the residual.
        let mut accepted = false;
        let mut alpha = 1.0;
        for _ in 0..8 {
            let mut candidate = angles.clone();
            for (slot, c) in candidate.iter_mut().enumerate() {
                *c += alpha * step[slot];
            }
            robot.clamp_angles(&mut candidate);
            let (cand_res, cand_points) = weighted_rms(robot, &candidate, &targets, cfg)?;
            if cand_res < residual {
                angles = candidate;
                residual = cand_res;
                points = cand_points;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break; // local minimum (e.g. target beyond reach)
        }
        if residual < cfg.tolerance {
            converged = true;
        }
    }

    let mut frame = Vec::with_capacity(ROBOT_CHANNELS);
    frame.extend_from_slice(&h_frame[..9]); // wrist pass-through, exact
    frame.extend_from_slice(&angles);
    Ok(IkFrameResult {
        frame,
        residual,
        converged,
        iterations,
    })
}

#[derive(Debug, Clone, Default)]
pub struct IkTrajectoryReport {
    pub nonconverged_frames: usize,
    pub mean_residual: f64,
    /// Largest joint-angle change between consecutive frames, radians.
    pub max_joint_jump: f64,
}

/// Frame-wise IK with previous-frame warm starts for temporal coherence.
pub fn retarget_trajectory_ik(
    h: &HandTrajectory,
    cfg: &IkConfig,
    robot: &HandModel,
) -> Result<(RobotTrajectory, IkTrajectoryReport), IkError> {
    let t_len = h.len();
    let mut frames = Array2::zeros((t_len, ROBOT_CHANNELS));
    let mut report = IkTrajectoryReport::default();
    let mut warm: Option<Vec<f64>> = None;
    for t in 0..t_len {
        let row = h.frames.row(t);
        let result = retarget_frame_ik(
            row.as_slice().expect("contiguous"),
            warm.as_deref(),
            cfg,
            robot,
        )?;
        if !result.converged {
            report.nonconverged_frames += 1;
        }
        report.mean_residual += result.residual;
        let angles = result.frame[9..].to_vec();
        if let Some(prev) = &warm {
            for (a, b) in prev.iter().zip(&angles) {
                report.max_joint_jump = report.max_joint_jump.max((a - b).abs());
            }
        }
        for (c, v) in result.frame.iter().enumerate() {
            frames[(t, c)] = *v;
        }
        warm = Some(angles);
    }
    report.mean_residual /= t_len as f64;
    Ok((RobotTrajectory::new(frames, h.fps)?, report))
}

/// Builds the supervision pairs for the hand regressor. Demos whose
/// non-converged frame fraction exceeds 20% are skipped.
pub fn build_ik_pair_db(
    demos: &[HandTrajectory],
    cfg: &IkConfig,
    robot: &HandModel,
) -> Result<(Vec<(HandTrajectory, RobotTrajectory)>, Vec<usize>), IkError> {
    let mut pairs = Vec::with_capacity(demos.len());
    let mut skipped = Vec::new();
    for (i, demo) in demos.iter().enumerate() {
        let (robot_traj, report) = retarget_trajectory_ik(demo, cfg, robot)?;
        let frac = report.nonconverged_frames as f64 / demo.len() as f64;
        if frac > 0.20 {
            skipped.push(i);
            continue;
        }
        pairs.push((demo.clone(), robot_traj));
    }
    Ok((pairs, skipped))
}
