//! Kinematic chains, forward kinematics, and Jacobians for the canonical
//! human hand (24 keypoints, 20 actuated joints) and robot hand (16 DoF,
//! 4 fingertips + 4 midjoints).
//!
//! A chain is a topologically ordered list of joints; each joint is a fixed
//! translation from its parent followed by a rotation about a fixed axis.
//! Keypoint sites (fingertips, knuckles) are joints with limits [0, 0].
//!
//! Canonical frame convention: fingers extend along +x of the wrist frame,
//! the palm faces -z, the thumb sits on the +y side.
//!
//! Human keypoint order (24): thumb CMC, MCP, IP, TIP; then for each of
//! index, middle, ring, pinky: base knuckle, MCP, PIP, DIP, TIP.
//! Robot joint-angle order (16): thumb, index, middle, ring; per finger
//! abduction then three flexions root-to-tip.

use crate::geom::{GeomError, Pose};
use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KinError {
    #[error("joint {0} parent {1} is not earlier in the chain")]
    BadTopology(usize, usize),
    #[error("joint {0} axis is not unit norm")]
    BadAxis(usize),
    #[error("joint {0} limits are inverted")]
    BadLimits(usize),
    #[error("expected {expected} joint angles, got {got}")]
    AngleCount { got: usize, expected: usize },
    #[error("non-finite joint angle at index {0}")]
    NonFiniteAngle(usize),
    #[error("unknown end effector {0}")]
    UnknownEffector(String),
    #[error("chain text parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone)]
pub struct Joint {
    /// Index of the parent joint; `None` attaches to the root pose.
    pub parent: Option<usize>,
    /// Fixed translation from the parent frame, meters.
    pub offset: Vector3<f64>,
    /// Rotation axis in the joint's local frame.
    pub axis: Unit<Vector3<f64>>,
    /// Angle limits [lo, hi], radians. lo == hi marks a fixed site.
    pub limits: (f64, f64),
}

impl Joint {
    pub fn is_fixed(&self) -> bool {
        self.limits.0 == self.limits.1
    }
}

#[derive(Debug, Clone)]
pub struct KinematicChain {
    pub joints: Vec<Joint>,
    /// Named joints usable as IK / FK query targets.
    pub end_effectors: Vec<(String, usize)>,
}

impl KinematicChain {
    pub fn new(joints: Vec<Joint>, end_effectors: Vec<(String, usize)>) -> Result<Self, KinError> {
        for (i, j) in joints.iter().enumerate() {
            if let Some(p) = j.parent {
                if p >= i {
                    return Err(KinError::BadTopology(i, p));
                }
            }
            if (j.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(KinError::BadAxis(i));
            }
            if j.limits.0 > j.limits.1 {
                return Err(KinError::BadLimits(i));
            }
        }
        Ok(KinematicChain {
            joints,
            end_effectors,
        })
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn effector_index(&self, name: &str) -> Result<usize, KinError> {
        self.end_effectors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, i)| *i)
            .ok_or_else(|| KinError::UnknownEffector(name.to_string()))
    }

    /// True when `anc` lies on the parent path of `joint` (exclusive of `joint`).
    pub fn is_ancestor(&self, anc: usize, joint: usize) -> bool {
        let mut cur = self.joints[joint].parent;
        while let Some(p) = cur {
            if p == anc {
                return true;
            }
            cur = self.joints[p].parent;
        }
        false
    }
}

#[derive(Debug, Clone)]
pub struct FkResult {
    /// World position of each joint origin.
    pub positions: Vec<Vector3<f64>>,
    /// World rotation of each joint frame (after its own rotation).
    pub rotations: Vec<Matrix3<f64>>,
    /// Set when any input angle was clamped to its limits.
    pub clamped: bool,
}

/// Recursive rigid composition down the chain. Angles outside limits are
/// clamped and flagged.
pub fn forward_kinematics(
    chain: &KinematicChain,
    root: &Pose,
    angles: &[f64],
) -> Result<FkResult, KinError> {
    if angles.len() != chain.joints.len() {
        return Err(KinError::AngleCount {
            got: angles.len(),
            expected: chain.joints.len(),
        });
    }
    if let Some(i) = angles.iter().position(|a| !a.is_finite()) {
        return Err(KinError::NonFiniteAngle(i));
    }
    let root_rot = root.rotation_matrix()?;
    let mut positions = Vec::with_capacity(chain.joints.len());
    let mut rotations = Vec::with_capacity(chain.joints.len());
    let mut clamped = false;
    for (i, joint) in chain.joints.iter().enumerate() {
        let (parent_pos, parent_rot) = match joint.parent {
            Some(p) => (positions[p], rotations[p]),
            None => (root.position, root_rot),
        };
        let mut theta = angles[i];
        let clamped_theta = theta.clamp(joint.limits.0, joint.limits.1);
        if clamped_theta != theta {
            clamped = true;
            theta = clamped_theta;
        }
        let pos = parent_pos + parent_rot * joint.offset;
        let rot = parent_rot * Rotation3::from_axis_angle(&joint.axis, theta).into_inner();
        positions.push(pos);
        rotations.push(rot);
    }
    Ok(FkResult {
        positions,
        rotations,
        clamped,
    })
}

/// Position Jacobian (3 x n_joints, m/rad) of one effector.
/// Column j is axis_j x (p_eff - p_j) for ancestors of the effector,
/// zero otherwise.
pub fn jacobian(
    chain: &KinematicChain,
    root: &Pose,
    angles: &[f64],
    effector: usize,
) -> Result<Array2<f64>, KinError> {
    let fk = forward_kinematics(chain, root, angles)?;
    let root_rot = root.rotation_matrix()?;
    let p_eff = fk.positions[effector];
    let n = chain.joints.len();
    let mut jac = Array2::zeros((3, n));
    for (j, joint) in chain.joints.iter().enumerate() {
        if !chain.is_ancestor(j, effector) {
            continue;
        }
        let parent_rot = match joint.parent {
            Some(p) => fk.rotations[p],
            None => root_rot,
        };
        let world_axis = parent_rot * joint.axis.into_inner();
        let col = world_axis.cross(&(p_eff - fk.positions[j]));
        jac[(0, j)] = col.x;
        jac[(1, j)] = col.y;
        jac[(2, j)] = col.z;
    }
    Ok(jac)
}

/// A chain plus the bookkeeping that turns it into a hand: keypoint order,
/// fingertip/midjoint sites, actuated joints, and a rest ("open") posture.
#[derive(Debug, Clone)]
pub struct HandModel {
    pub chain: KinematicChain,
    /// Joint indices emitted as keypoints, in canonical order.
    pub keypoints: Vec<usize>,
    /// Fingertip joint indices, thumb first.
    pub fingertips: Vec<usize>,
    /// Midjoint indices (between distal and middle bone), thumb first.
    pub midjoints: Vec<usize>,
    /// Actuated joint indices in canonical angle order.
    pub actuated: Vec<usize>,
    /// Rest posture for the actuated joints.
    pub open_angles: Vec<f64>,
}

impl HandModel {
    pub fn dof(&self) -> usize {
        self.actuated.len()
    }

    /// Expands actuated angles to the full chain vector (sites get zero).
    pub fn full_angles(&self, actuated: &[f64]) -> Result<Vec<f64>, KinError> {
        if actuated.len() != self.actuated.len() {
            return Err(KinError::AngleCount {
                got: actuated.len(),
                expected: self.actuated.len(),
            });
        }
        let mut full = vec![0.0; self.chain.len()];
        for (slot, &j) in self.actuated.iter().enumerate() {
            full[j] = actuated[slot];
        }
        Ok(full)
    }

    pub fn fk(&self, root: &Pose, actuated: &[f64]) -> Result<FkResult, KinError> {
        forward_kinematics(&self.chain, root, &self.full_angles(actuated)?)
    }

    /// Keypoint positions in the order of `self.keypoints`.
    pub fn keypoint_positions(&self, fk: &FkResult) -> Vec<Vector3<f64>> {
        self.keypoints.iter().map(|&j| fk.positions[j]).collect()
    }

    pub fn fingertip_positions(&self, fk: &FkResult) -> Vec<Vector3<f64>> {
        self.fingertips.iter().map(|&j| fk.positions[j]).collect()
    }

    pub fn midjoint_positions(&self, fk: &FkResult) -> Vec<Vector3<f64>> {
        self.midjoints.iter().map(|&j| fk.positions[j]).collect()
    }

    /// Clamps actuated angles to their joint limits.
    pub fn clamp_angles(&self, actuated: &mut [f64]) {
        for (slot, &j) in self.actuated.iter().enumerate() {
            let (lo, hi) = self.chain.joints[j].limits;
            actuated[slot] = actuated[slot].clamp(lo, hi);
        }
    }
}

struct ChainBuilder {
    joints: Vec<Joint>,
    effectors: Vec<(String, usize)>,
}

impl ChainBuilder {
    fn new() -> Self {
        ChainBuilder {
            joints: Vec::new(),
            effectors: Vec::new(),
        }
    }

    fn joint(
        &mut self,
        parent: Option<usize>,
        offset: Vector3<f64>,
        axis: Vector3<f64>,
        limits: (f64, f64),
    ) -> usize {
        self.joints.push(Joint {
            parent,
            offset,
            axis: Unit::new_normalize(axis),
            limits,
        });
        self.joints.len() - 1
    }

    fn site(&mut self, parent: usize, offset: Vector3<f64>, name: &str) -> usize {
        let id = self.joint(Some(parent), offset, Vector3::z(), (0.0, 0.0));
        self.effectors.push((name.to_string(), id));
        id
    }

    fn build(self) -> KinematicChain {
        KinematicChain::new(self.joints, self.effectors).expect("builder produces valid chains")
    }
}

/// Canonical 24-keypoint human hand: a 4-keypoint thumb and four 5-keypoint
/// fingers, 20 actuated joints, middle-finger length 80 mm.
pub fn canonical_human_hand() -> HandModel {
    let mut b = ChainBuilder::new();
    let mut keypoints = Vec::new();
    let mut fingertips = Vec::new();
    let mut midjoints = Vec::new();
    let mut actuated = Vec::new();
    let mut open_angles = Vec::new();

    // Thumb: CMC (2 DoF), MCP, IP, TIP along a diagonal across the palm.
    let dir = Vector3::new(0.62, 0.76, -0.18).normalize();
    let flex_axis = Vector3::z().cross(&dir).normalize();
    let cmc_abd = b.joint(
        None,
        Vector3::new(0.020, 0.030, -0.008),
        Vector3::x(),
        (-0.6, 0.6),
    );
    let cmc_flex = b.joint(Some(cmc_abd), Vector3::zeros(), flex_axis, (-0.4, 1.3));
    let mcp = b.joint(Some(cmc_flex), dir * 0.045, flex_axis, (-0.2, 1.1));
    let ip = b.joint(Some(mcp), dir * 0.032, flex_axis, (-0.2, 1.2));
    let tip = b.site(ip, dir * 0.028, "thumb_tip");
    keypoints.extend([cmc_abd, mcp, ip, tip]);
    fingertips.push(tip);
    midjoints.push(ip);
    actuated.extend([cmc_abd, cmc_flex, mcp, ip]);
    open_angles.extend([0.1, 0.15, 0.1, 0.1]);

    // Four fingers: base knuckle site, MCP (abduction + flexion), PIP, DIP, TIP.
    let names = ["index", "middle", "ring", "pinky"];
    let y_off = [0.025, 0.008, -0.009, -0.026];
    let scale = [0.95, 1.0, 0.93, 0.78];
    for f in 0..4 {
        let base = b.joint(
            None,
            Vector3::new(0.030, y_off[f] * 0.7, 0.0),
            Vector3::z(),
            (0.0, 0.0),
        );
        let abd = b.joint(
            Some(base),
            Vector3::new(0.055, y_off[f] * 0.3, 0.0),
            Vector3::z(),
            (-0.35, 0.35),
        );
        let mcp = b.joint(Some(abd), Vector3::zeros(), Vector3::y(), (-0.3, 1.6));
        let pip = b.joint(
            Some(mcp),
            Vector3::new(0.040 * scale[f], 0.0, 0.0),
            Vector3::y(),
            (-0.1, 1.8),
        );
        let dip = b.joint(
            Some(pip),
            Vector3::new(0.025 * scale[f], 0.0, 0.0),
            Vector3::y(),
            (-0.1, 1.3),
        );
        let tip = b.site(
            dip,
            Vector3::new(0.015 * scale[f], 0.0, 0.0),
            &format!("{}_tip", names[f]),
        );
        keypoints.extend([base, mcp, pip, dip, tip]);
        fingertips.push(tip);
        midjoints.push(dip);
        actuated.extend([abd, mcp, pip, dip]);
        open_angles.extend([0.0, 0.25, 0.3, 0.15]);
    }

    HandModel {
        chain: b.build(),
        keypoints,
        fingertips,
        midjoints,
        actuated,
        open_angles,
    }
}

/// Canonical 16-DoF robot hand: four fingers with abduction plus three
/// flexions each, proximal/medial/distal links 54/38/44 mm (thumb variant
/// slightly longer), fingertip and midjoint sites per finger.
pub fn canonical_robot_hand() -> HandModel {
    let mut b = ChainBuilder::new();
    let mut fingertips = Vec::new();
    let mut midjoints = Vec::new();
    let mut actuated = Vec::new();
    let mut open_angles = Vec::new();

    const FLEX: (f64, f64) = (-0.47, 1.61);
    const ABD: (f64, f64) = (-0.2, 0.2);

    // Thumb: offset to the +y side, yaw joint brings it across the palm.
    let t_abd = b.joint(
        None,
        Vector3::new(0.005, 0.060, -0.010),
        Vector3::x(),
        ABD,
    );
    let t_f1 = b.joint(Some(t_abd), Vector3::new(0.030, 0.012, 0.0), Vector3::z(), FLEX);
    let t_f2 = b.joint(Some(t_f1), Vector3::new(0.055, 0.0, 0.0), Vector3::y(), FLEX);
    let t_f3 = b.joint(Some(t_f2), Vector3::new(0.040, 0.0, 0.0), Vector3::y(), FLEX);
    let t_tip = b.site(t_f3, Vector3::new(0.046, 0.0, 0.0), "thumb_tip");
    b.effectors.push(("thumb_mid".to_string(), t_f3));
    fingertips.push(t_tip);
    midjoints.push(t_f3);
    actuated.extend([t_abd, t_f1, t_f2, t_f3]);
    open_angles.extend([0.0, 0.2, 0.2, 0.1]);

    let names = ["index", "middle", "ring"];
    let y_off = [0.045, 0.0, -0.045];
    for f in 0..3 {
        let abd = b.joint(
            None,
            Vector3::new(0.010, y_off[f], 0.0),
            Vector3::z(),
            ABD,
        );
        let f1 = b.joint(Some(abd), Vector3::new(0.025, 0.0, 0.0), Vector3::y(), FLEX);
        let f2 = b.joint(Some(f1), Vector3::new(0.054, 0.0, 0.0), Vector3::y(), FLEX);
        let f3 = b.joint(Some(f2), Vector3::new(0.038, 0.0, 0.0), Vector3::y(), FLEX);
        let tip = b.site(f3, Vector3::new(0.044, 0.0, 0.0), &format!("{}_tip", names[f]));
        b.effectors.push((format!("{}_mid", names[f]), f3));
        fingertips.push(tip);
        midjoints.push(f3);
        actuated.extend([abd, f1, f2, f3]);
        open_angles.extend([0.0, 0.25, 0.25, 0.1]);
    }

    let keypoints = fingertips.iter().chain(midjoints.iter()).copied().collect();
    HandModel {
        chain: b.build(),
        keypoints,
        fingertips,
        midjoints,
        actuated,
        open_angles,
    }
}

/// Serializes a chain to the CHAIN v1 text format.
pub fn chain_to_text(chain: &KinematicChain) -> String {
    let mut out = String::from("CHAIN v1\n");
    out.push_str(&format!("joints: {}\n", chain.joints.len()));
    for j in &chain.joints {
        let parent = j.parent.map(|p| p as i64).unwrap_or(-1);
        out.push_str(&format!(
            "joint {} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}\n",
            parent,
            j.offset.x,
            j.offset.y,
            j.offset.z,
            j.axis.x,
            j.axis.y,
            j.axis.z,
            j.limits.0,
            j.limits.1
        ));
    }
    for (name, idx) in &chain.end_effectors {
        out.push_str(&format!("effector {name} {idx}\n"));
    }
    out
}

/// Parses the CHAIN v1 text format produced by [`chain_to_text`].
pub fn chain_from_text(text: &str) -> Result<KinematicChain, KinError> {
    let err = |line: usize, msg: &str| KinError::Parse {
        line,
        msg: msg.to_string(),
    };
    let mut lines = text.lines().enumerate();
    let (ln, header) = lines.next().ok_or_else(|| err(1, "empty file"))?;
    if header.trim() != "CHAIN v1" {
        return Err(err(ln + 1, "expected header 'CHAIN v1'"));
    }
    let (ln, count_line) = lines.next().ok_or_else(|| err(2, "missing joint count"))?;
    let count: usize = count_line
        .trim()
        .strip_prefix("joints:")
        .ok_or_else(|| err(ln + 1, "expected 'joints: <n>'"))?
        .trim()
        .parse()
        .map_err(|_| err(ln + 1, "bad joint count"))?;

    let mut joints = Vec::with_capacity(count);
    let mut effectors = Vec::new();
    for (ln, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("joint") => {
                let fields: Vec<&str> = parts.collect();
                if fields.len() != 9 {
                    return Err(err(ln + 1, "joint line needs 9 fields"));
                }
                let parent: i64 = fields[0].parse().map_err(|_| err(ln + 1, "bad parent"))?;
                let nums: Result<Vec<f64>, _> = fields[1..].iter().map(|s| s.parse()).collect();
                let nums = nums.map_err(|_| err(ln + 1, "bad number"))?;
                joints.push(Joint {
                    parent: if parent < 0 { None } else { Some(parent as usize) },
                    offset: Vector3::new(nums[0], nums[1], nums[2]),
                    axis: Unit::new_normalize(Vector3::new(nums[3], nums[4], nums[5])),
                    limits: (nums[6], nums[7]),
                });
            }
            Some("effector") => {
                let name = parts.next().ok_or_else(|| err(ln + 1, "missing name"))?;
                let idx: usize = parts
                    .next()
                    .ok_or_else(|| err(ln + 1, "missing index"))?
                    .parse()
                    .map_err(|_| err(ln + 1, "bad index"))?;
                effectors.push((name.to_string(), idx));
            }
            _ => return Err(err(ln + 1, "expected 'joint' or 'effector'")),
        }
    }
    if joints.len() != count {
        return Err(err(0, "joint count mismatch"));
    }
    KinematicChain::new(joints, effectors)
}

/// FK of a whole robot trajectory frame: wrist pose plus fingertip and
/// midjoint world positions. Used by the simulator and the regressor.
pub fn robot_frame_fk(
    model: &HandModel,
    frame: &[f64],
) -> Result<(Pose, Vec<Vector3<f64>>, Vec<Vector3<f64>>), KinError> {
    let wrist = Pose::from_channels(frame)?;
    let mut angles: Vec<f64> = frame[9..].to_vec();
    model.clamp_angles(&mut angles);
    let fk = model.fk(&wrist, &angles)?;
    Ok((
        wrist,
        model.fingertip_positions(&fk),
        model.midjoint_positions(&fk),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::pose_compose;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn two_link_chain() -> KinematicChain {
        let mut b = ChainBuilder::new();
        let j0 = b.joint(None, Vector3::zeros(), Vector3::z(), (-3.2, 3.2));
        let j1 = b.joint(Some(j0), Vector3::new(1.0, 0.0, 0.0), Vector3::z(), (-3.2, 3.2));
        b.site(j1, Vector3::new(1.0, 0.0, 0.0), "tip");
        b.build()
    }

    #[test]
    fn two_link_fk_zero_angles() {
        let chain = two_link_chain();
        let fk = forward_kinematics(&chain, &Pose::identity(), &[0.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(
            (fk.positions[2] - Vector3::new(2.0, 0.0, 0.0)).norm(),
            0.0,
            epsilon = 1e-12
        );
        assert!(!fk.clamped);
    }

    #[test]
    fn two_link_fk_right_angles() {
        // Cumulative angles pi/2 then pi: elbow at (0,1,0), tip at (-1,1,0).
        let chain = two_link_chain();
        let fk =
            forward_kinematics(&chain, &Pose::identity(), &[FRAC_PI_2, FRAC_PI_2, 0.0]).unwrap();
        assert_abs_diff_eq!(
            (fk.positions[2] - Vector3::new(-1.0, 1.0, 0.0)).norm(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn out_of_limit_angle_sets_clamp_flag() {
        let chain = two_link_chain();
        let fk = forward_kinematics(&chain, &Pose::identity(), &[5.0, 0.0, 0.0]).unwrap();
        assert!(fk.clamped);
    }

    #[test]
    fn two_link_jacobian_analytic() {
        let chain = two_link_chain();
        let tip = chain.effector_index("tip").unwrap();
        let jac = jacobian(&chain, &Pose::identity(), &[0.0, 0.0, 0.0], tip).unwrap();
        assert_abs_diff_eq!(jac[(0, 0)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(jac[(1, 0)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(jac[(1, 1)], 1.0, epsilon = 1e-12);
        // The tip site is not its own ancestor: zero column.
        assert_abs_diff_eq!(jac[(1, 2)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let model = canonical_robot_hand();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let root = Pose::new(
            Vector3::new(0.1, -0.05, 0.2),
            crate::geom::tests_support::random_rotation(&mut rng),
        )
        .unwrap();
        for &tip in &model.fingertips {
            let act: Vec<f64> = model
                .actuated
                .iter()
                .map(|&j| {
                    let (lo, hi) = model.chain.joints[j].limits;
                    rng.random_range(lo + 0.05..hi - 0.05)
                })
                .collect();
            let full = model.full_angles(&act).unwrap();
            let jac = jacobian(&model.chain, &root, &full, tip).unwrap();
            let h = 1e-6;
            for (slot, &j) in model.actuated.iter().enumerate() {
                let mut plus = act.clone();
                let mut minus = act.clone();
                plus[slot] += h;
                minus[slot] -= h;
                let fp = model.fk(&root, &plus).unwrap().positions[tip];
                let fm = model.fk(&root, &minus).unwrap().positions[tip];
                let fd = (fp - fm) / (2.0 * h);
                let analytic = Vector3::new(jac[(0, j)], jac[(1, j)], jac[(2, j)]);
                let scale = fd.norm().max(1.0);
                assert!(
                    (fd - analytic).norm() / scale < 1e-6,
                    "joint {j}: fd {fd:?} vs analytic {analytic:?}"
                );
            }
        }
    }

    #[test]
    fn fk_is_frame_equivariant() {
        let model = canonical_human_hand();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let root = Pose::new(
            Vector3::new(0.2, 0.1, 0.3),
            crate::geom::tests_support::random_rotation(&mut rng),
        )
        .unwrap();
        let g = Pose::new(
            Vector3::new(-0.4, 0.2, 0.1),
            crate::geom::tests_support::random_rotation(&mut rng),
        )
        .unwrap();
        let angles = model.open_angles.clone();
        let fk_local = model.fk(&root, &angles).unwrap();
        let fk_moved = model.fk(&pose_compose(&g, &root).unwrap(), &angles).unwrap();
        for (p_local, p_moved) in fk_local.positions.iter().zip(&fk_moved.positions) {
            let expected = g.transform_point(p_local);
            assert_abs_diff_eq!((expected - p_moved).norm(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn jacobian_fk_consistency_small_step() {
        let model = canonical_robot_hand();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tip = model.fingertips[1];
        let act: Vec<f64> = model
            .actuated
            .iter()
            .map(|&j| {
                let (lo, hi) = model.chain.joints[j].limits;
                rng.random_range(lo + 0.1..hi - 0.1)
            })
            .collect();
        let full = model.full_angles(&act).unwrap();
        let jac = jacobian(&model.chain, &Pose::identity(), &full, tip).unwrap();
        let mut delta = vec![0.0; act.len()];
        for d in delta.iter_mut() {
            *d = rng.random_range(-1.0..1.0);
        }
        let norm: f64 = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        for d in delta.iter_mut() {
            *d *= 1e-5 / norm;
        }
        let mut perturbed = act.clone();
        for (a, d) in perturbed.iter_mut().zip(&delta) {
            *a += d;
        }
        let p0 = model.fk(&Pose::identity(), &act).unwrap().positions[tip];
        let p1 = model.fk(&Pose::identity(), &perturbed).unwrap().positions[tip];
        let mut lin = Vector3::zeros();
        for (slot, &j) in model.actuated.iter().enumerate() {
            lin += Vector3::new(jac[(0, j)], jac[(1, j)], jac[(2, j)]) * delta[slot];
        }
        assert!((p1 - p0 - lin).norm() < 1e-8);
    }

    #[test]
    fn canonical_hand_counts() {
        let human = canonical_human_hand();
        assert_eq!(human.keypoints.len(), 24);
        assert_eq!(human.dof(), 20);
        let robot = canonical_robot_hand();
        assert_eq!(robot.dof(), 16);
        assert_eq!(robot.fingertips.len(), 4);
        assert_eq!(robot.midjoints.len(), 4);
        assert_eq!(robot.keypoints.len(), 8);
    }

    #[test]
    fn robot_zero_angles_tips_are_summed_offsets() {
        let model = canonical_robot_hand();
        let fk = model.fk(&Pose::identity(), &vec![0.0; 16]).unwrap();
        for &tip in &model.fingertips {
            let mut sum = Vector3::zeros();
            let mut cur = Some(tip);
            while let Some(j) = cur {
                sum += model.chain.joints[j].offset;
                cur = model.chain.joints[j].parent;
            }
            assert_abs_diff_eq!((fk.positions[tip] - sum).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn robot_workspace_radius_under_25cm() {
        let model = canonical_robot_hand();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut max_reach = 0.0f64;
        for _ in 0..2000 {
            let act: Vec<f64> = model
                .actuated
                .iter()
                .map(|&j| {
                    let (lo, hi) = model.chain.joints[j].limits;
                    rng.random_range(lo..hi)
                })
                .collect();
            let fk = model.fk(&Pose::identity(), &act).unwrap();
            for &tip in &model.fingertips {
                max_reach = max_reach.max(fk.positions[tip].norm());
            }
        }
        assert!(max_reach < 0.25, "max fingertip reach {max_reach:.3}");
    }

    #[test]
    fn human_hand_reach_under_limit() {
        let model = canonical_human_hand();
        let fk = model.fk(&Pose::identity(), &vec![0.0; 20]).unwrap();
        for p in model.keypoint_positions(&fk) {
            assert!(p.norm() < crate::geom::MAX_HAND_REACH);
        }
    }

    #[test]
    fn chain_text_round_trip() {
        let model = canonical_robot_hand();
        let text = chain_to_text(&model.chain);
        let parsed = chain_from_text(&text).unwrap();
        assert_eq!(parsed.joints.len(), model.chain.joints.len());
        for (a, b) in model.chain.joints.iter().zip(&parsed.joints) {
            assert_eq!(a.parent, b.parent);
            assert_eq!(a.offset, b.offset);
            assert_eq!(a.limits, b.limits);
        }
        assert_eq!(parsed.end_effectors, model.chain.end_effectors);
        assert!(chain_from_text("CHAIN v2\n").is_err());
        assert!(chain_from_text("CHAIN v1\njoints: 1\njunk\n").is_err());
    }
}
