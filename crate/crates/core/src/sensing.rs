//! Light sources, photosensor occlusion and response, and the
//! active/inactive switch driven by the readings.

use crate::geom::{OrientedRect, Vec2};
use crate::kinematics::{outer_link_directions, hinge_points, BodyVariant, SmarticleGeometry, SmarticleState, VariantKind};
use crate::kinematics::{LINK_OUTER1, LINK_OUTER2};
use crate::physics::EnsembleState;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightSource {
    pub id: u32,
    pub position: Vec2,
    pub on: bool,
    pub intensity: f64,
    /// Number of point emitters. More than one models a bar of lights laid
    /// along the plate edge, centered on `position`.
    pub emitters: usize,
    pub emitter_spacing: f64,
}

impl LightSource {
    pub fn point(id: u32, position: Vec2) -> Self {
        Self {
            id,
            position,
            on: true,
            intensity: 1.0,
            emitters: 1,
            emitter_spacing: 0.01,
        }
    }

    pub fn bar(id: u32, position: Vec2, emitters: usize, spacing: f64) -> Self {
        Self {
            emitters,
            emitter_spacing: spacing,
            ..Self::point(id, position)
        }
    }

    /// Emitter positions. A bar runs tangent to the plate edge, taken as
    /// perpendicular to the direction from the plate center (the origin).
    pub fn emitter_points(&self) -> Vec<Vec2> {
        let n = self.emitters.max(1);
        if n == 1 {
            return vec![self.position];
        }
        let axis = if self.position.norm() > 0.0 {
            self.position.normalized().perp()
        } else {
            Vec2::new(1.0, 0.0)
        };
        let mid = 0.5 * (n - 1) as f64;
        (0..n)
            .map(|k| self.position + axis * ((k as f64 - mid) * self.emitter_spacing))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InactivePolicy {
    #[default]
    FreezeCurrent,
    Straighten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorParams {
    /// Distance of each sensor from its link's free end, m.
    pub sensor_inset: f64,
    pub activation_threshold: f64,
    pub deactivation_threshold: f64,
    /// Distance at which inverse-square falloff equals 1; closer saturates.
    pub falloff_reference: f64,
    pub ring_opaque: bool,
    pub max_lights_on: usize,
    pub inactive_policy: InactivePolicy,
    /// Optional piecewise-linear response tables, `[|incidence| rad, fraction of
    /// saturation]`, zero past the last entry.
    pub exposed_response: Option<Vec<[f64; 2]>>,
    pub shrouded_response: Option<Vec<[f64; 2]>>,
}

impl Default for SensorParams {
    fn default() -> Self {
        Self {
            sensor_inset: 0.01,
            activation_threshold: 0.5,
            deactivation_threshold: 0.4,
            falloff_reference: 0.1,
            ring_opaque: false,
            max_lights_on: 1,
            inactive_policy: InactivePolicy::FreezeCurrent,
            exposed_response: None,
            shrouded_response: None,
        }
    }
}

impl SensorParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.deactivation_threshold < self.activation_threshold) {
            return Err("deactivation threshold must be below activation threshold".into());
        }
        if !(self.falloff_reference > 0.0) {
            return Err("falloff_reference must be positive".into());
        }
        for table in [&self.exposed_response, &self.shrouded_response].into_iter().flatten() {
            if table.is_empty() || table.windows(2).any(|w| w[1][0] <= w[0][0] || w[1][1] > w[0][1]) {
                return Err("response tables must have increasing angles and non-increasing values".into());
            }
            if table.iter().any(|p| !(0.0..=1.0).contains(&p[1])) {
                return Err("response table fractions must lie in [0, 1]".into());
            }
        }
        Ok(())
    }

    fn table_for(&self, kind: VariantKind) -> Option<&[[f64; 2]]> {
        match kind {
            VariantKind::Exposed => self.exposed_response.as_deref(),
            VariantKind::Shrouded => self.shrouded_response.as_deref(),
        }
    }

    /// Reading at unit intensity and no distance loss.
    pub fn angular_response(&self, variant: &BodyVariant, incidence: f64) -> f64 {
        let a = incidence.abs();
        let fraction = match self.table_for(variant.kind) {
            Some(t) => interpolate(t, a),
            None => default_response(variant, a),
        };
        variant.saturation_reading * fraction
    }

    pub fn distance_falloff(&self, distance: f64) -> f64 {
        if distance <= self.falloff_reference {
            1.0
        } else {
            (self.falloff_reference / distance).powi(2)
        }
    }
}

/// Exposed sensors are flat out to the acceptance angle; shrouded ones follow
/// a cosine lobe that the shroud cuts off at the acceptance angle.
fn default_response(variant: &BodyVariant, a: f64) -> f64 {
    if a > variant.acceptance_half_angle {
        return 0.0;
    }
    match variant.kind {
        VariantKind::Exposed => 1.0,
        VariantKind::Shrouded => a.cos(),
    }
}

fn interpolate(table: &[[f64; 2]], a: f64) -> f64 {
    let last = table[table.len() - 1];
    if a > last[0] {
        return 0.0;
    }
    if a <= table[0][0] {
        return table[0][1];
    }
    for w in table.windows(2) {
        if a <= w[1][0] {
            let f = (a - w[0][0]) / (w[1][0] - w[0][0]);
            return w[0][1] + f * (w[1][1] - w[0][1]);
        }
    }
    last[1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Photosensor {
    pub position: Vec2,
    /// Outward normal of the face the sensor is mounted in.
    pub normal: Vec2,
    pub link: usize,
}

/// Sensors sit in the outer links' faces that point to +y in the straight
/// configuration, `inset` back from each free end.
pub fn sensor_positions(s: &SmarticleState, g: &SmarticleGeometry, inset: f64) -> [Photosensor; 2] {
    let [h1, h2] = hinge_points(s, g);
    let [d1, d2] = outer_link_directions(s.alpha1, s.alpha2);
    let d1 = d1.rotated(s.heading);
    let d2 = d2.rotated(s.heading);
    let n1 = -d1.perp();
    let n2 = d2.perp();
    let along = g.link_length - inset;
    let half_w = 0.5 * g.link_width;
    [
        Photosensor {
            position: h1 + d1 * along + n1 * half_w,
            normal: n1,
            link: LINK_OUTER1,
        },
        Photosensor {
            position: h2 + d2 * along + n2 * half_w,
            normal: n2,
            link: LINK_OUTER2,
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotosensorReading {
    pub smarticle_id: usize,
    pub sensor_index: usize,
    pub value: f64,
    /// True when some light is on and every emitter's line of sight is blocked.
    pub occluded: bool,
    pub incidence_angle: f64,
}

/// Whether `a`–`b` crosses the circle boundary (one end inside, one outside,
/// or a chord through it).
fn segment_crosses_circle(a: Vec2, b: Vec2, center: Vec2, radius: f64) -> bool {
    let ra = (a - center).norm();
    let rb = (b - center).norm();
    if (ra <= radius) != (rb <= radius) {
        return true;
    }
    if ra <= radius {
        return false;
    }
    let d = b - a;
    let t = ((center - a).dot(d) / d.norm_sq()).clamp(0.0, 1.0);
    (a + d * t - center).norm() < radius
}

/// Whether the sight line reaches the sensor, ignoring the sensor's own link.
pub fn line_of_sight(
    from: Vec2,
    to: &Photosensor,
    owner: usize,
    links: &[[OrientedRect; 3]],
    e: &EnsembleState,
    p: &SensorParams,
) -> bool {
    if p.ring_opaque && segment_crosses_circle(from, to.position, e.ring.center, e.ring.radius) {
        return false;
    }
    for (i, ls) in links.iter().enumerate() {
        for (k, r) in ls.iter().enumerate() {
            if i == owner && k == to.link {
                continue;
            }
            if r.intersects_segment(from, to.position) {
                return false;
            }
        }
    }
    true
}

pub fn compute_readings(
    e: &EnsembleState,
    lights: &[LightSource],
    g: &SmarticleGeometry,
    p: &SensorParams,
) -> Vec<PhotosensorReading> {
    let links = e.links(g);
    let emitters: Vec<(f64, Vec2)> = lights
        .iter()
        .filter(|l| l.on)
        .flat_map(|l| l.emitter_points().into_iter().map(move |q| (l.intensity, q)))
        .collect();
    let mut out = Vec::with_capacity(2 * e.smarticles.len());
    for (i, s) in e.smarticles.iter().enumerate() {
        for (k, sensor) in sensor_positions(s, g, p.sensor_inset).iter().enumerate() {
            let mut best: Option<(f64, f64)> = None;
            let mut any_visible = false;
            for &(intensity, q) in &emitters {
                let to_light = q - sensor.position;
                let incidence = sensor.normal.cross(to_light).atan2(sensor.normal.dot(to_light));
                if !line_of_sight(q, sensor, i, &links, e, p) {
                    continue;
                }
                any_visible = true;
                let v = intensity * p.angular_response(&s.variant, incidence) * p.distance_falloff(to_light.norm());
                if best.map_or(true, |(bv, _)| v > bv) {
                    best = Some((v, incidence));
                }
            }
            let occluded = !emitters.is_empty() && !any_visible;
            let (value, incidence_angle) = match best {
                Some((v, a)) => (v.min(s.variant.saturation_reading), a),
                None => {
                    let a = emitters.first().map_or(0.0, |&(_, q)| {
                        let d = q - sensor.position;
                        sensor.normal.cross(d).atan2(sensor.normal.dot(d))
                    });
                    (0.0, a)
                }
            };
            out.push(PhotosensorReading {
                smarticle_id: s.id,
                sensor_index: k,
                value,
                occluded,
                incidence_angle,
            });
        }
    }
    out
}

/// Hysteretic switch: bright sensors deactivate a smarticle, and only a
/// reading below the lower threshold reactivates it.
pub fn update_activity(e: &EnsembleState, readings: &[PhotosensorReading], p: &SensorParams) -> EnsembleState {
    let mut next = e.clone();
    for s in next.smarticles.iter_mut() {
        let peak = readings
            .iter()
            .filter(|r| r.smarticle_id == s.id)
            .map(|r| r.value)
            .fold(0.0, f64::max);
        if peak >= p.activation_threshold {
            if s.active {
                s.joint_rate = [0.0; 2];
            }
            s.active = false;
        } else if peak < p.deactivation_threshold {
            s.active = true;
        }
    }
    next
}
