//! Narrow-phase contact generation between smarticle links and the ring wall.
//!
//! Link–link overlap uses the separating-axis test on the two rectangles'
//! face normals. The face with the least penetration becomes the reference
//! face; the most anti-parallel face of the other rectangle is clipped
//! against its side planes, keeping every clipped point that lies behind
//! the reference face. A corner poking into a face yields one point, a
//! face lying flat on a face yields two.

use crate::geom::{OrientedRect, Vec2};
use crate::kinematics::{forward_kinematics, SmarticleGeometry};
use crate::physics::{EnsembleState, RingState};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BodyId {
    Link { smarticle: usize, link: usize },
    Ring,
}

impl BodyId {
    pub fn smarticle(&self) -> Option<usize> {
        match *self {
            BodyId::Link { smarticle, .. } => Some(smarticle),
            BodyId::Ring => None,
        }
    }
}

/// One contact point. `normal` is the direction the contact force pushes
/// `bodies.0`; `bodies.1` receives the opposite force.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub point: Vec2,
    pub normal: Vec2,
    pub depth: f64,
    pub bodies: (BodyId, BodyId),
}

/// All contacts in the ensemble, sorted by (body pair, point).
pub fn detect_contacts(e: &EnsembleState, g: &SmarticleGeometry) -> Vec<Contact> {
    let links: Vec<[OrientedRect; 3]> = e
        .smarticles
        .iter()
        .map(|s| forward_kinematics(s, g))
        .collect();
    detect_from_links(&links, &e.ring)
}

pub fn detect_from_links(links: &[[OrientedRect; 3]], ring: &RingState) -> Vec<Contact> {
    let mut out = Vec::new();
    for (i, li) in links.iter().enumerate() {
        for (a, ra) in li.iter().enumerate() {
            let id_a = BodyId::Link { smarticle: i, link: a };
            if let Some(c) = rect_ring_contact(ra, ring) {
                out.push(Contact {
                    bodies: (id_a, BodyId::Ring),
                    ..c
                });
            }
            for (j, lj) in links.iter().enumerate().skip(i + 1) {
                for (b, rb) in lj.iter().enumerate() {
                    let id_b = BodyId::Link { smarticle: j, link: b };
                    for c in rect_rect_contacts(ra, rb) {
                        out.push(Contact {
                            bodies: (id_a, id_b),
                            ..c
                        });
                    }
                }
            }
        }
    }
    sort_contacts(&mut out);
    out
}

pub fn sort_contacts(contacts: &mut [Contact]) {
    contacts.sort_by(|p, q| {
        p.bodies
            .cmp(&q.bodies)
            .then_with(|| p.point.x.total_cmp(&q.point.x))
            .then_with(|| p.point.y.total_cmp(&q.point.y))
    });
}

/// Contact between a link and the inside of the ring wall.
///
/// One contact per link: depth is the deepest corner's distance past the
/// wall, located at the penetration-weighted centroid of the corners that
/// are outside, with the normal pointing back toward the ring center.
pub fn rect_ring_contact(r: &OrientedRect, ring: &RingState) -> Option<Contact> {
    if (r.center - ring.center).norm() + r.bounding_radius() <= ring.radius {
        return None;
    }
    let mut depth = 0.0_f64;
    let mut weight = 0.0;
    let mut acc = Vec2::ZERO;
    for c in r.corners() {
        let pen = (c - ring.center).norm() - ring.radius;
        if pen > 0.0 {
            depth = depth.max(pen);
            weight += pen;
            acc += c * pen;
        }
    }
    if depth <= 0.0 {
        return None;
    }
    let point = acc * (1.0 / weight);
    let normal = (ring.center - point).normalized();
    Some(Contact {
        point,
        normal,
        depth,
        bodies: (BodyId::Ring, BodyId::Ring),
    })
}

struct Face {
    normal: Vec2,
    v1: Vec2,
    v2: Vec2,
}

/// The four outward faces of `r`, each with endpoints ordered
/// counter-clockwise.
fn faces(r: &OrientedRect) -> [Face; 4] {
    let c = r.corners();
    let n = r.axis.perp();
    [
        Face { normal: -n, v1: c[0], v2: c[1] },
        Face { normal: r.axis, v1: c[1], v2: c[2] },
        Face { normal: n, v1: c[2], v2: c[3] },
        Face { normal: -r.axis, v1: c[3], v2: c[0] },
    ]
}

/// Largest signed separation of `other` from any face of `r`, with the face
/// index. Positive means a separating axis exists.
fn max_separation(r: &OrientedRect, other: &OrientedRect) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for (k, f) in faces(r).iter().enumerate() {
        let (lo, _) = other.project(f.normal);
        let sep = lo - f.v1.dot(f.normal);
        if sep > best.0 {
            best = (sep, k);
        }
    }
    best
}

/// Contacts pushing `a` away from `b`. Empty when they are disjoint or only
/// touching.
pub fn rect_rect_contacts(a: &OrientedRect, b: &OrientedRect) -> Vec<Contact> {
    let reach = a.bounding_radius() + b.bounding_radius();
    if (a.center - b.center).norm_sq() >= reach * reach {
        return Vec::new();
    }
    let (sep_a, face_a) = max_separation(a, b);
    if sep_a >= 0.0 {
        return Vec::new();
    }
    let (sep_b, face_b) = max_separation(b, a);
    if sep_b >= 0.0 {
        return Vec::new();
    }
    // Prefer `a` as the reference body unless `b` is clearly better, so the
    // choice does not flicker on near ties.
    let (reference, incident, face_idx, flip) = if sep_b > sep_a + 1e-9 {
        (b, a, face_b, true)
    } else {
        (a, b, face_a, false)
    };
    let ref_face = &faces(reference)[face_idx];
    let n = ref_face.normal;

    let inc_face = faces(incident)
        .into_iter()
        .min_by(|p, q| p.normal.dot(n).partial_cmp(&q.normal.dot(n)).unwrap_or(Ordering::Equal))
        .expect("four faces");

    let tangent = (ref_face.v2 - ref_face.v1).normalized();
    let mut pts = [inc_face.v1, inc_face.v2];
    let lo = ref_face.v1.dot(tangent);
    let hi = ref_face.v2.dot(tangent);
    let mut clipped = clip_segment(&mut pts, tangent, lo, true);
    if clipped {
        clipped = clip_segment(&mut pts, tangent, hi, false);
    }

    let offset = ref_face.v1.dot(n);
    // Force on `a`: when `a` is the reference its outward face normal points
    // at `b`, so `a` is pushed along −n.
    let push_a = if flip { n } else { -n };
    let mut out = Vec::with_capacity(2);
    if clipped {
        for p in pts {
            let sep = p.dot(n) - offset;
            if sep < 0.0 {
                out.push(Contact {
                    point: p - n * (0.5 * sep),
                    normal: push_a,
                    depth: -sep,
                    bodies: (BodyId::Ring, BodyId::Ring),
                });
            }
        }
    }
    if out.is_empty() {
        let depth = -sep_a.max(sep_b);
        out.push(Contact {
            point: (a.center + b.center) * 0.5,
            normal: push_a,
            depth,
            bodies: (BodyId::Ring, BodyId::Ring),
        });
    }
    out
}

/// Clips segment `pts` to the half-line `p·t ≥ bound` (`lower`) or
/// `p·t ≤ bound`. Returns false if nothing remains.
fn clip_segment(pts: &mut [Vec2; 2], t: Vec2, bound: f64, lower: bool) -> bool {
    let sign = if lower { 1.0 } else { -1.0 };
    let d0 = sign * (pts[0].dot(t) - bound);
    let d1 = sign * (pts[1].dot(t) - bound);
    match (d0 >= 0.0, d1 >= 0.0) {
        (true, true) => true,
        (false, false) => false,
        (inside0, _) => {
            let f = d0 / (d0 - d1);
            let x = pts[0] + (pts[1] - pts[0]) * f;
            if inside0 {
                pts[1] = x;
            } else {
                pts[0] = x;
            }
            true
        }
    }
}

/// Exact overlap test for two rectangles (positive-area intersection).
pub fn rects_overlap(a: &OrientedRect, b: &OrientedRect) -> bool {
    max_separation(a, b).0 < 0.0 && max_separation(b, a).0 < 0.0
}

/// Penetration depth along the minimum-overlap axis; negative when apart.
pub fn overlap_depth(a: &OrientedRect, b: &OrientedRect) -> f64 {
    -max_separation(a, b).0.max(max_separation(b, a).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{BodyVariant, SmarticleState};

    fn ring(radius: f64) -> RingState {
        RingState::new(Vec2::ZERO, radius)
    }

    #[test]
    fn disjoint_straight_smarticles_have_no_contacts() {
        let g = SmarticleGeometry::default();
        let e = EnsembleState::new(
            vec![
                SmarticleState::new(0, Vec2::new(-0.08, 0.0), 0.0, BodyVariant::exposed()),
                SmarticleState::new(1, Vec2::new(0.08, 0.0), 0.0, BodyVariant::exposed()),
            ],
            ring(10.0),
        );
        assert!(detect_contacts(&e, &g).is_empty());
    }

    #[test]
    fn radial_smarticle_against_wall() {
        let g = SmarticleGeometry::default();
        let r = 0.095;
        let delta = 1e-3;
        let s = SmarticleState::new(0, Vec2::new(r - 0.07 + delta, 0.0), 0.0, BodyVariant::exposed());
        let e = EnsembleState::new(vec![s], ring(r));
        let cs = detect_contacts(&e, &g);
        assert_eq!(cs.len(), 1);
        let c = cs[0];
        assert_eq!(c.bodies, (BodyId::Link { smarticle: 0, link: 2 }, BodyId::Ring));
        // Far corners sit at (r + δ, ±w/2).
        let w = g.link_width;
        let expected = ((r + delta).powi(2) + (w / 2.0).powi(2)).sqrt() - r;
        assert!((c.depth - expected).abs() < 1e-12, "{} vs {}", c.depth, expected);
        assert!((c.normal.x + 1.0).abs() < 1e-12 && c.normal.y.abs() < 1e-12);
    }

    #[test]
    fn face_on_face_gives_two_points() {
        let a = OrientedRect::new(Vec2::ZERO, 0.0, 0.04, 0.02);
        let b = OrientedRect::new(Vec2::new(0.005, 0.019), 0.0, 0.02, 0.02);
        let cs = rect_rect_contacts(&a, &b);
        assert_eq!(cs.len(), 2);
        for c in &cs {
            assert!((c.depth - 0.001).abs() < 1e-12);
            assert!((c.normal.y + 1.0).abs() < 1e-12, "a must be pushed toward −y");
        }
    }

    #[test]
    fn corner_into_face_gives_one_point() {
        let a = OrientedRect::new(Vec2::ZERO, 0.0, 0.04, 0.02);
        let diag = (0.01f64.powi(2) * 2.0).sqrt();
        let b = OrientedRect::new(Vec2::new(0.0, 0.01 + diag - 0.002), std::f64::consts::FRAC_PI_4, 0.02, 0.02);
        let cs = rect_rect_contacts(&a, &b);
        assert_eq!(cs.len(), 1);
        assert!((cs[0].depth - 0.002).abs() < 1e-12);
        assert!(cs[0].normal.y < -0.999);
        // Swapped roles push the other way.
        let cs = rect_rect_contacts(&b, &a);
        assert!(cs[0].normal.y > 0.999);
    }

    #[test]
    fn detection_agrees_with_exact_overlap() {
        let mut k = 0u64;
        let mut next = || {
            k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (k >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..2000 {
            let a = OrientedRect::new(Vec2::new(next() * 0.05, next() * 0.05), next() * 6.3, 0.0467, 0.025);
            let b = OrientedRect::new(Vec2::new(next() * 0.05, next() * 0.05), next() * 6.3, 0.0467, 0.025);
            let cs = rect_rect_contacts(&a, &b);
            assert_eq!(!cs.is_empty(), rects_overlap(&a, &b));
            assert!(cs.iter().all(|c| c.depth > 0.0));
        }
    }
}
