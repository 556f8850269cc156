//! Smarticle body geometry, forward kinematics of the 3-link chain and the
//! rate-limited gait controller.
//!
//! Body frame: the center link lies along +x, with +y the side toward which
//! both outer links curl for positive joint angles. Outer link 1 hinges off
//! the −x end of the center link, outer link 2 off the +x end. With
//! `alpha1 = alpha2 = π/2` the chain is a "u" opening toward +y; with
//! `alpha1 = −alpha2` it is a point-symmetric "z".

use crate::error::KinematicsError;
use crate::geom::{wrap_angle, OrientedRect, Vec2};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

pub const LINK_OUTER1: usize = 0;
pub const LINK_CENTER: usize = 1;
pub const LINK_OUTER2: usize = 2;

/// Waypoint arrival tolerance, radians. Only absorbs rounding: anything
/// larger would shorten every cycle by the snapped distance.
pub const WAYPOINT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Exposed,
    Shrouded,
}

/// Photosensor housing. The exposed body saturates over almost the whole
/// half-space in front of the sensor face; the shroud narrows the
/// acceptance cone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyVariant {
    pub kind: VariantKind,
    pub acceptance_half_angle: f64,
    pub saturation_reading: f64,
}

impl BodyVariant {
    pub fn exposed() -> Self {
        Self {
            kind: VariantKind::Exposed,
            acceptance_half_angle: 80f64.to_radians(),
            saturation_reading: 1.0,
        }
    }

    pub fn shrouded() -> Self {
        Self {
            kind: VariantKind::Shrouded,
            acceptance_half_angle: 25f64.to_radians(),
            saturation_reading: 0.8,
        }
    }

    pub fn of_kind(kind: VariantKind) -> Self {
        match kind {
            VariantKind::Exposed => Self::exposed(),
            VariantKind::Shrouded => Self::shrouded(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmarticleGeometry {
    pub link_length: f64,
    pub link_width: f64,
    /// Symmetric joint limit: each joint angle lives in [−joint_limit, +joint_limit].
    pub joint_limit: f64,
}

impl Default for SmarticleGeometry {
    fn default() -> Self {
        Self {
            link_length: 0.14 / 3.0,
            link_width: 0.025,
            joint_limit: FRAC_PI_2,
        }
    }
}

impl SmarticleGeometry {
    /// End-to-end length in the straight configuration.
    pub fn total_length(&self) -> f64 {
        3.0 * self.link_length
    }

    pub fn link_area(&self) -> f64 {
        self.link_length * self.link_width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmarticleState {
    pub id: usize,
    /// Midpoint of the center link.
    pub center_pos: Vec2,
    pub heading: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub active: bool,
    pub variant: BodyVariant,
    /// Fraction of the gait cycle completed, in [0, 1).
    pub gait_phase: f64,
    /// Index of the waypoint the joints are currently heading to.
    pub gait_target: usize,
    /// Joint rates imposed during the last controller update, rad/s.
    pub joint_rate: [f64; 2],
    /// Body velocity from the last physics step.
    pub velocity: Vec2,
    pub angular_velocity: f64,
    /// Time the servos have been held against a blocking contact, s.
    pub stall_time: f64,
}

impl SmarticleState {
    pub fn new(id: usize, center_pos: Vec2, heading: f64, variant: BodyVariant) -> Self {
        Self {
            id,
            center_pos,
            heading: wrap_angle(heading),
            alpha1: 0.0,
            alpha2: 0.0,
            active: true,
            variant,
            gait_phase: 0.0,
            gait_target: 0,
            joint_rate: [0.0; 2],
            velocity: Vec2::ZERO,
            angular_velocity: 0.0,
            stall_time: 0.0,
        }
    }

    pub fn with_joints(mut self, alpha1: f64, alpha2: f64) -> Self {
        self.alpha1 = alpha1;
        self.alpha2 = alpha2;
        self
    }

    pub fn joints(&self) -> [f64; 2] {
        [self.alpha1, self.alpha2]
    }

    /// Mirror image about the world x-axis. The chain's handedness flips,
    /// so both joint angles change sign.
    pub fn reflected_x(&self) -> Self {
        Self {
            center_pos: Vec2::new(self.center_pos.x, -self.center_pos.y),
            heading: wrap_angle(-self.heading),
            alpha1: -self.alpha1,
            alpha2: -self.alpha2,
            joint_rate: [-self.joint_rate[0], -self.joint_rate[1]],
            velocity: Vec2::new(self.velocity.x, -self.velocity.y),
            angular_velocity: -self.angular_velocity,
            ..*self
        }
    }

    /// Rigid rotation of the whole pose by `angle` about `pivot`.
    pub fn rotated_about(&self, pivot: Vec2, angle: f64) -> Self {
        Self {
            center_pos: pivot + (self.center_pos - pivot).rotated(angle),
            heading: wrap_angle(self.heading + angle),
            velocity: self.velocity.rotated(angle),
            ..*self
        }
    }
}

/// Direction of each outer link in the body frame, pointing from its hinge
/// toward its free end.
pub fn outer_link_directions(alpha1: f64, alpha2: f64) -> [Vec2; 2] {
    [
        Vec2::new(-alpha1.cos(), alpha1.sin()),
        Vec2::new(alpha2.cos(), alpha2.sin()),
    ]
}

/// World-frame hinge points: the −x and +x ends of the center link.
pub fn hinge_points(s: &SmarticleState, g: &SmarticleGeometry) -> [Vec2; 2] {
    let u = Vec2::from_angle(s.heading) * (0.5 * g.link_length);
    [s.center_pos - u, s.center_pos + u]
}

/// The three links as world-frame rectangles, indexed by
/// [`LINK_OUTER1`], [`LINK_CENTER`], [`LINK_OUTER2`].
pub fn forward_kinematics(s: &SmarticleState, g: &SmarticleGeometry) -> [OrientedRect; 3] {
    let l = g.link_length;
    let [h1, h2] = hinge_points(s, g);
    let [d1, d2] = outer_link_directions(s.alpha1, s.alpha2);
    let d1 = d1.rotated(s.heading);
    let d2 = d2.rotated(s.heading);
    let rect = |center: Vec2, axis: Vec2| OrientedRect {
        center,
        axis,
        length: l,
        width: g.link_width,
    };
    [
        rect(h1 + d1 * (0.5 * l), d1),
        rect(s.center_pos, Vec2::from_angle(s.heading)),
        rect(h2 + d2 * (0.5 * l), d2),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaitProgram {
    /// Closed cycle of (alpha1, alpha2) corners; the last connects to the first.
    pub waypoints: Vec<[f64; 2]>,
    pub max_joint_speed: f64,
}

impl Default for GaitProgram {
    fn default() -> Self {
        default_square_gait(2.0)
    }
}

/// Four-corner square in joint space, traversed
/// (−π/2,−π/2) → (+π/2,−π/2) → (+π/2,+π/2) → (−π/2,+π/2).
pub fn default_square_gait(max_joint_speed: f64) -> GaitProgram {
    let a = FRAC_PI_2;
    GaitProgram {
        waypoints: vec![[-a, -a], [a, -a], [a, a], [-a, a]],
        max_joint_speed,
    }
}

impl GaitProgram {
    pub fn validate(&self, g: &SmarticleGeometry) -> Result<(), KinematicsError> {
        if self.waypoints.len() < 2 {
            return Err(KinematicsError::InvalidGait(
                "a gait cycle needs at least two waypoints".into(),
            ));
        }
        if !(self.max_joint_speed > 0.0) || !self.max_joint_speed.is_finite() {
            return Err(KinematicsError::InvalidGait(format!(
                "max_joint_speed must be positive, got {}",
                self.max_joint_speed
            )));
        }
        let lim = g.joint_limit + 1e-12;
        for (i, w) in self.waypoints.iter().enumerate() {
            if w.iter().any(|a| !a.is_finite() || a.abs() > lim) {
                return Err(KinematicsError::InvalidGait(format!(
                    "waypoint {i} ({}, {}) outside joint limits ±{}",
                    w[0], w[1], g.joint_limit
                )));
            }
        }
        if self.cycle_time() <= 0.0 {
            return Err(KinematicsError::InvalidGait(
                "gait cycle has zero length".into(),
            ));
        }
        Ok(())
    }

    /// Time to reach waypoint `k` from waypoint `k − 1`. Each joint is
    /// limited independently, so the joint with the longer travel sets it.
    pub fn segment_time(&self, k: usize) -> f64 {
        let n = self.waypoints.len();
        let from = self.waypoints[(k + n - 1) % n];
        let to = self.waypoints[k % n];
        chebyshev(from, to) / self.max_joint_speed
    }

    pub fn cycle_time(&self) -> f64 {
        (0..self.waypoints.len()).map(|k| self.segment_time(k)).sum()
    }

    /// Joint angles and next-waypoint index at a fraction of the cycle,
    /// measured from waypoint 0.
    pub fn pose_at_phase(&self, phase: f64) -> ([f64; 2], usize) {
        let n = self.waypoints.len();
        let mut t = phase.rem_euclid(1.0) * self.cycle_time();
        for step in 1..=n {
            let k = step % n;
            let seg = self.segment_time(k);
            if t < seg || step == n {
                let from = self.waypoints[step - 1];
                let to = self.waypoints[k];
                let f = if seg > 0.0 { (t / seg).min(1.0) } else { 1.0 };
                let pose = [from[0] + (to[0] - from[0]) * f, from[1] + (to[1] - from[1]) * f];
                return (pose, k);
            }
            t -= seg;
        }
        unreachable!("loop always returns on the last segment")
    }

    /// Phase of a pose travelling toward waypoint `target`.
    fn phase_of(&self, joints: [f64; 2], target: usize) -> f64 {
        let n = self.waypoints.len();
        let cycle = self.cycle_time();
        let arrival: f64 = if target % n == 0 {
            cycle
        } else {
            (1..=target % n).map(|k| self.segment_time(k)).sum()
        };
        let remaining = chebyshev(joints, self.waypoints[target % n]) / self.max_joint_speed;
        let elapsed = arrival - remaining.min(self.segment_time(target));
        (elapsed / cycle).rem_euclid(1.0)
    }
}

fn chebyshev(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).abs().max((a[1] - b[1]).abs())
}

fn approach(current: f64, target: f64, max_step: f64) -> f64 {
    let d = target - current;
    if d.abs() <= max_step {
        target
    } else {
        current + max_step * d.signum()
    }
}

/// Moves the joints along the gait for `dt` seconds.
///
/// Motion budget left over after reaching a waypoint carries into the next
/// segment, so a whole number of cycle times brings the joints back to
/// where they started.
/// Abandons the current segment: the joints head for the following waypoint.
pub fn skip_waypoint(s: &SmarticleState, prog: &GaitProgram) -> SmarticleState {
    let target = (s.gait_target + 1) % prog.waypoints.len();
    SmarticleState {
        gait_target: target,
        gait_phase: prog.phase_of(s.joints(), target),
        ..*s
    }
}

pub fn advance_gait(
    s: &SmarticleState,
    prog: &GaitProgram,
    dt: f64,
) -> Result<SmarticleState, KinematicsError> {
    if !(dt > 0.0) {
        return Err(KinematicsError::NonPositiveDt(dt));
    }
    let n = prog.waypoints.len();
    let mut out = *s;
    let mut joints = s.joints();
    let mut target = s.gait_target % n;
    let mut budget = dt;
    // Bounded so a degenerate cycle shorter than dt cannot spin forever.
    for _ in 0..=n {
        let goal = prog.waypoints[target];
        if chebyshev(joints, goal) <= WAYPOINT_TOLERANCE {
            joints = goal;
            target = (target + 1) % n;
            continue;
        }
        let need = chebyshev(joints, goal) / prog.max_joint_speed;
        if need <= budget {
            joints = goal;
            budget -= need;
            target = (target + 1) % n;
            if budget <= 0.0 {
                break;
            }
        } else {
            let max_step = prog.max_joint_speed * budget;
            joints = [
                approach(joints[0], goal[0], max_step),
                approach(joints[1], goal[1], max_step),
            ];
            if chebyshev(joints, goal) <= WAYPOINT_TOLERANCE {
                joints = goal;
                target = (target + 1) % n;
            }
            break;
        }
    }
    out.joint_rate = [(joints[0] - s.alpha1) / dt, (joints[1] - s.alpha2) / dt];
    out.alpha1 = joints[0];
    out.alpha2 = joints[1];
    out.gait_target = target;
    out.gait_phase = prog.phase_of(joints, target);
    Ok(out)
}

/// Rate-limited move toward a fixed pose, used for inactive smarticles that
/// straighten out instead of freezing.
pub fn approach_pose(s: &SmarticleState, pose: [f64; 2], max_joint_speed: f64, dt: f64) -> SmarticleState {
    let step = max_joint_speed * dt;
    let a1 = approach(s.alpha1, pose[0], step);
    let a2 = approach(s.alpha2, pose[1], step);
    SmarticleState {
        joint_rate: [(a1 - s.alpha1) / dt, (a2 - s.alpha2) / dt],
        alpha1: a1,
        alpha2: a2,
        ..*s
    }
}
