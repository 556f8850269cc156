//! Fixed-timestep overdamped mechanics for the smarticles and the ring.
//!
//! Every body is first order: velocity responds instantly to the net force.
//! Smarticles rest on their center link and obey Coulomb friction against
//! the ground (stuck below the static threshold, sliding against the
//! kinetic force above it). The ring slides against a pure linear drag.
//! Contacts are penalty springs with damping on the closing speed, one
//! scalar force per contact applied equal and opposite to the two bodies.

use crate::contact::{detect_from_links, BodyId, Contact};
use crate::error::PhysicsError;
use crate::geom::{wrap_angle, OrientedRect, Vec2};
use crate::kinematics::{forward_kinematics, hinge_points, SmarticleGeometry, SmarticleState};
use crate::kinematics::{LINK_CENTER, LINK_OUTER1, LINK_OUTER2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingState {
    pub center: Vec2,
    /// Inner radius of the wall.
    pub radius: f64,
    pub mass: f64,
    pub heading: f64,
    /// Linear drag against the plate, N·s/m.
    pub drag: f64,
    pub velocity: Vec2,
}

impl RingState {
    pub fn new(center: Vec2, radius: f64) -> Self {
        Self {
            center,
            radius,
            mass: 0.1,
            heading: 0.0,
            drag: 40.0,
            velocity: Vec2::ZERO,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsParams {
    pub dt: f64,
    /// N/m
    pub contact_stiffness: f64,
    /// N·s/m
    pub contact_damping: f64,
    /// Kinetic Coulomb coefficient of the center link on the plate.
    pub ground_friction_coeff: f64,
    /// Static threshold as a multiple of the kinetic coefficient.
    pub static_friction_ratio: f64,
    /// Smarticle translational drag above the friction force, N·s/m.
    pub linear_drag: f64,
    /// Smarticle rotational drag above the friction torque, N·m·s/rad.
    pub angular_drag: f64,
    pub smarticle_mass: f64,
    pub gravity: f64,
    /// Allowed contact penetration, m. Steps fail beyond ten times this.
    pub slop: f64,
    /// A joint holds its angle for a step when its outer link is already
    /// this deep in a contact it would drive deeper, m.
    pub servo_stall_depth: f64,
    /// Continuous hold after which the gait gives up on its current
    /// waypoint and heads for the next one, s.
    pub servo_stall_timeout: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            contact_stiffness: 500.0,
            contact_damping: 5.0,
            ground_friction_coeff: 0.3,
            static_friction_ratio: 1.2,
            linear_drag: 40.0,
            angular_drag: 0.4,
            smarticle_mass: 0.035,
            gravity: 9.81,
            slop: 1e-3,
            servo_stall_depth: 1e-3,
            servo_stall_timeout: 0.5,
        }
    }
}

impl PhysicsParams {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        let nonneg = [
            ("contact_damping", self.contact_damping),
            ("ground_friction_coeff", self.ground_friction_coeff),
            ("linear_drag", self.linear_drag),
            ("angular_drag", self.angular_drag),
            ("smarticle_mass", self.smarticle_mass),
            ("gravity", self.gravity),
            ("servo_stall_depth", self.servo_stall_depth),
            ("servo_stall_timeout", self.servo_stall_timeout),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(PhysicsError::InvalidParams(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        let pos = [
            ("dt", self.dt),
            ("contact_stiffness", self.contact_stiffness),
            ("slop", self.slop),
            ("linear_drag", self.linear_drag),
            ("angular_drag", self.angular_drag),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(PhysicsError::InvalidParams(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.static_friction_ratio < 1.0 {
            return Err(PhysicsError::InvalidParams(
                "static friction cannot be below kinetic".into(),
            ));
        }
        Ok(())
    }

    pub fn max_penetration(&self) -> f64 {
        10.0 * self.slop
    }

    fn normal_load(&self) -> f64 {
        self.smarticle_mass * self.gravity
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleState {
    pub smarticles: Vec<SmarticleState>,
    pub ring: RingState,
    pub time: f64,
    /// Number of physics steps taken; `time` is always `step × dt`.
    pub step: u64,
}

impl EnsembleState {
    pub fn new(smarticles: Vec<SmarticleState>, ring: RingState) -> Self {
        Self {
            smarticles,
            ring,
            time: 0.0,
            step: 0,
        }
    }

    pub fn links(&self, g: &SmarticleGeometry) -> Vec<[OrientedRect; 3]> {
        self.smarticles.iter().map(|s| forward_kinematics(s, g)).collect()
    }

    /// Mirror image of the whole world about the x-axis.
    pub fn reflected_x(&self) -> Self {
        let mut ring = self.ring;
        ring.center.y = -ring.center.y;
        ring.velocity.y = -ring.velocity.y;
        ring.heading = wrap_angle(-ring.heading);
        Self {
            smarticles: self.smarticles.iter().map(|s| s.reflected_x()).collect(),
            ring,
            ..self.clone()
        }
    }

    /// Rigid rotation of the whole world about the origin.
    pub fn rotated(&self, angle: f64) -> Self {
        let mut ring = self.ring;
        ring.center = ring.center.rotated(angle);
        ring.velocity = ring.velocity.rotated(angle);
        ring.heading = wrap_angle(ring.heading + angle);
        Self {
            smarticles: self
                .smarticles
                .iter()
                .map(|s| s.rotated_about(Vec2::ZERO, angle))
                .collect(),
            ring,
            ..self.clone()
        }
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    pub contacts: usize,
    pub max_penetration: f64,
    /// Sum of every contact force over every body; zero up to rounding.
    pub net_contact_force: Vec2,
    /// Largest single contact force magnitude, N.
    pub max_contact_force: f64,
}

/// World velocity of a point rigidly attached to `link` of `s`, including
/// the servo-driven joint motion.
pub fn link_point_velocity(s: &SmarticleState, g: &SmarticleGeometry, link: usize, p: Vec2) -> Vec2 {
    let mut v = s.velocity + (p - s.center_pos).perp() * s.angular_velocity;
    let [h1, h2] = hinge_points(s, g);
    match link {
        LINK_OUTER1 => v += (p - h1).perp() * (-s.joint_rate[0]),
        LINK_OUTER2 => v += (p - h2).perp() * s.joint_rate[1],
        _ => {}
    }
    v
}

/// True when the joint motion planned in `next` would drive an outer link of
/// `current` further into a contact deeper than the stall depth. `index` is
/// the smarticle's position in the ensemble.
pub fn servo_stalled(
    index: usize,
    current: &SmarticleState,
    next: &SmarticleState,
    contacts: &[Contact],
    g: &SmarticleGeometry,
    stall_depth: f64,
) -> bool {
    if next.joint_rate == [0.0; 2] {
        return false;
    }
    let driven = SmarticleState {
        velocity: Vec2::ZERO,
        angular_velocity: 0.0,
        joint_rate: next.joint_rate,
        ..*current
    };
    contacts.iter().filter(|c| c.depth > stall_depth).any(|c| {
        [(c.bodies.0, c.normal), (c.bodies.1, -c.normal)].into_iter().any(|(id, push)| match id {
            BodyId::Link { smarticle, link } if smarticle == index && link != LINK_CENTER => {
                link_point_velocity(&driven, g, link, c.point).dot(push) < 0.0
            }
            _ => false,
        })
    })
}

fn body_point_velocity(e: &EnsembleState, g: &SmarticleGeometry, id: BodyId, p: Vec2) -> Vec2 {
    match id {
        BodyId::Link { smarticle, link } => link_point_velocity(&e.smarticles[smarticle], g, link, p),
        BodyId::Ring => e.ring.velocity,
    }
}

/// Scalar penalty force for a single contact, never pulling.
pub fn contact_force(c: &Contact, e: &EnsembleState, g: &SmarticleGeometry, p: &PhysicsParams) -> f64 {
    let va = body_point_velocity(e, g, c.bodies.0, c.point);
    let vb = body_point_velocity(e, g, c.bodies.1, c.point);
    let closing = (vb - va).dot(c.normal);
    (p.contact_stiffness * c.depth + p.contact_damping * closing).max(0.0)
}

/// Overdamped Coulomb response: zero while the drive is within the static
/// budget, otherwise the excess over kinetic friction divided by drag.
fn coulomb_rate(drive: f64, static_limit: f64, kinetic_limit: f64, drag: f64) -> f64 {
    if drive <= static_limit {
        0.0
    } else {
        (drive - kinetic_limit) / drag
    }
}

pub fn step(e: &EnsembleState, p: &PhysicsParams, g: &SmarticleGeometry) -> Result<EnsembleState, PhysicsError> {
    step_with_report(e, p, g).map(|(next, _)| next)
}

pub fn step_with_report(
    e: &EnsembleState,
    p: &PhysicsParams,
    g: &SmarticleGeometry,
) -> Result<(EnsembleState, StepReport), PhysicsError> {
    let links = e.links(g);
    let contacts = detect_from_links(&links, &e.ring);
    let max_pen = contacts.iter().map(|c| c.depth).fold(0.0, f64::max);
    if max_pen > p.max_penetration() {
        return Err(PhysicsError::Unstable {
            time: e.time,
            penetration: max_pen,
            limit: p.max_penetration(),
        });
    }

    let n = e.smarticles.len();
    let mut force = vec![Vec2::ZERO; n];
    let mut torque = vec![0.0; n];
    let mut ring_force = Vec2::ZERO;
    let mut report = StepReport {
        contacts: contacts.len(),
        max_penetration: max_pen,
        ..StepReport::default()
    };

    let mut apply = |id: BodyId, f: Vec2, at: Vec2, report: &mut StepReport| {
        report.net_contact_force += f;
        match id {
            BodyId::Link { smarticle, .. } => {
                force[smarticle] += f;
                torque[smarticle] += (at - e.smarticles[smarticle].center_pos).cross(f);
            }
            BodyId::Ring => ring_force += f,
        }
    };
    for c in &contacts {
        let mag = contact_force(c, e, g, p);
        report.max_contact_force = report.max_contact_force.max(mag);
        let f = c.normal * mag;
        apply(c.bodies.0, f, c.point, &mut report);
        apply(c.bodies.1, -f, c.point, &mut report);
    }

    let load = p.normal_load();
    let mu_k = p.ground_friction_coeff;
    let mu_s = mu_k * p.static_friction_ratio;
    // Uniform pressure under a bar of length l resists spinning about its
    // midpoint with torque μ·N·l/4.
    let lever = 0.25 * g.link_length;

    let mut next = e.clone();
    for (i, s) in next.smarticles.iter_mut().enumerate() {
        let f = force[i];
        let fm = f.norm();
        let rate = coulomb_rate(fm, mu_s * load, mu_k * load, p.linear_drag);
        s.velocity = if rate > 0.0 { f * (rate / fm) } else { Vec2::ZERO };
        let t = torque[i];
        let spin = coulomb_rate(t.abs(), mu_s * load * lever, mu_k * load * lever, p.angular_drag);
        s.angular_velocity = spin * t.signum();
        s.center_pos += s.velocity * p.dt;
        s.heading = wrap_angle(s.heading + s.angular_velocity * p.dt);
    }
    next.ring.velocity = ring_force * (1.0 / next.ring.drag);
    next.ring.center += next.ring.velocity * p.dt;
    next.step = e.step + 1;
    next.time = next.step as f64 * p.dt;
    Ok((next, report))
}

/// Applies `controller` then [`step`], `n` times.
pub fn run_fixed_steps<C>(
    e: &EnsembleState,
    n: u64,
    p: &PhysicsParams,
    g: &SmarticleGeometry,
    mut controller: C,
) -> Result<EnsembleState, PhysicsError>
where
    C: FnMut(&mut EnsembleState) -> Result<(), PhysicsError>,
{
    let mut state = e.clone();
    for _ in 0..n {
        let index = state.step;
        let wrap = |err: PhysicsError| PhysicsError::AtStep {
            index,
            source: Box::new(err),
        };
        controller(&mut state).map_err(wrap)?;
        state = step(&state, p, g).map_err(wrap)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::BodyVariant;

    fn lone(pos: Vec2) -> EnsembleState {
        EnsembleState::new(
            vec![SmarticleState::new(0, pos, 0.0, BodyVariant::exposed())],
            RingState::new(Vec2::ZERO, 0.095),
        )
    }

    #[test]
    fn contact_free_is_static() {
        let e = lone(Vec2::new(0.001, -0.002));
        let p = PhysicsParams::default();
        let next = step(&e, &p, &SmarticleGeometry::default()).unwrap();
        assert_eq!(next.smarticles[0].center_pos, e.smarticles[0].center_pos);
        assert_eq!(next.ring.center, e.ring.center);
        assert_eq!(next.time, p.dt);
    }

    #[test]
    fn single_contact_moves_only_the_ring() {
        let g = SmarticleGeometry::default();
        let p = PhysicsParams::default();
        // Radial smarticle whose outer corners sit 0.1 mm past the wall:
        // force well under the static budget μs·m·g.
        let depth: f64 = 1e-4;
        let reach = ((0.095 + depth).powi(2) - (g.link_width / 2.0).powi(2)).sqrt();
        let e = lone(Vec2::new(reach - 0.07, 0.0));
        let f = p.contact_stiffness * depth;
        assert!(f < p.static_friction_ratio * p.ground_friction_coeff * p.smarticle_mass * p.gravity);
        let next = step(&e, &p, &g).unwrap();
        assert_eq!(next.smarticles[0].center_pos, e.smarticles[0].center_pos);
        assert_eq!(next.smarticles[0].heading, e.smarticles[0].heading);
        let expected = f * p.dt / e.ring.drag;
        assert!((next.ring.center.x - expected).abs() < 1e-12 * expected);
        assert!(next.ring.center.y.abs() < 1e-18);
    }

    #[test]
    fn excessive_penetration_is_rejected() {
        let e = lone(Vec2::new(0.095 - 0.07 + 0.05, 0.0));
        let err = step(&e, &PhysicsParams::default(), &SmarticleGeometry::default()).unwrap_err();
        assert!(matches!(err, PhysicsError::Unstable { .. }));
    }

    #[test]
    fn zero_steps_is_identity() {
        let e = lone(Vec2::ZERO);
        let out = run_fixed_steps(&e, 0, &PhysicsParams::default(), &SmarticleGeometry::default(), |_| Ok(())).unwrap();
        assert_eq!(out, e);
    }

    #[test]
    fn step_errors_carry_index() {
        let e = lone(Vec2::new(0.095 - 0.07 + 0.05, 0.0));
        let err = run_fixed_steps(&e, 3, &PhysicsParams::default(), &SmarticleGeometry::default(), |_| Ok(())).unwrap_err();
        assert!(matches!(err, PhysicsError::AtStep { index: 0, .. }));
    }

    #[test]
    fn params_validation() {
        assert!(PhysicsParams::default().validate().is_ok());
        let bad = PhysicsParams { dt: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = PhysicsParams { contact_stiffness: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
