//! Trial protocol: seeded initialization, the per-step sense → switch →
//! gait → physics loop, edge/timeout termination, scripted light cues and
//! batch sweeps.

use crate::config::ScenarioConfig;
use crate::contact::{detect_contacts, detect_from_links, BodyId};
use crate::error::{Error, PhysicsError, Result};
use crate::geom::{wrap_angle, OrientedRect, Vec2};
use crate::kinematics::{advance_gait, approach_pose, forward_kinematics, skip_waypoint, SmarticleGeometry, SmarticleState};
use crate::physics::{servo_stalled, step_with_report, EnsembleState, RingState, StepReport};
use crate::record::{Sample, TerminationReason, TrajectoryMeta, TrajectoryRecord};
use crate::sensing::{compute_readings, update_activity, InactivePolicy, LightSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Independent placements tried before giving up.
const PLACEMENT_ATTEMPTS: usize = 100;
/// Relaxation sweeps per placement attempt.
const RELAX_ITERATIONS: usize = 10_000;
/// Candidate poses drawn per smarticle before relaxation.
const CANDIDATES: usize = 200;
/// Overlap tolerated between bodies at t = 0, m. Kept below the contact
/// slop so the first steps only nudge bodies apart.
const PLACEMENT_OVERLAP: f64 = 3e-4;
/// Body scale at which placement starts growing.
const GROWTH_START: f64 = 0.5;
const GROWTH_STEP: f64 = 0.02;
/// Relaxation sweeps between random perturbations of a jammed arrangement.
const SHAKE_EVERY: usize = 300;
const SHAKE_STEP: f64 = 1e-3;
/// Extra separation per push so relaxation terminates instead of converging asymptotically.
const RELAX_OVERSHOOT: f64 = 1e-5;

pub fn trial_rng(cfg: &ScenarioConfig) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(cfg.rng_stream);
    rng
}

fn placement_links(states: &[SmarticleState], g: &SmarticleGeometry) -> Vec<[OrientedRect; 3]> {
    states
        .iter()
        .map(|s| {
            forward_kinematics(s, g).map(|r| OrientedRect {
                length: r.length - 2.0 * PLACEMENT_OVERLAP,
                width: r.width - 2.0 * PLACEMENT_OVERLAP,
                ..r
            })
        })
        .collect()
}

fn total_overlap(states: &[SmarticleState], ring: &RingState, g: &SmarticleGeometry) -> f64 {
    detect_from_links(&placement_links(states, g), ring).iter().map(|c| c.depth).sum()
}

fn scaled(g: &SmarticleGeometry, f: f64) -> SmarticleGeometry {
    SmarticleGeometry {
        link_length: g.link_length * f,
        link_width: g.link_width * f,
        ..*g
    }
}

/// Pushes overlapping bodies apart along their contact normals until the
/// trimmed footprints are disjoint. Returns false if it does not converge
/// within `iterations` sweeps.
fn relax(
    states: &mut [SmarticleState],
    ring: &RingState,
    g: &SmarticleGeometry,
    iterations: usize,
    rng: &mut ChaCha8Rng,
) -> bool {
    let gyration_sq = (0.5 * g.total_length()).powi(2) / 3.0;
    let max_move = 0.1 * g.link_width;
    for it in 1..=iterations {
        let contacts = detect_from_links(&placement_links(states, g), ring);
        if contacts.is_empty() {
            return true;
        }
        if it % SHAKE_EVERY == 0 {
            for s in states.iter_mut() {
                s.center_pos += Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * SHAKE_STEP;
                s.heading = wrap_angle(s.heading + rng.gen_range(-1.0..1.0) * SHAKE_STEP / g.link_length);
            }
            continue;
        }
        let mut shift = vec![Vec2::ZERO; states.len()];
        let mut turn = vec![0.0; states.len()];
        for c in &contacts {
            let (share, other) = match c.bodies.1 {
                BodyId::Ring => (1.0, None),
                b => (0.5, b.smarticle()),
            };
            let push = c.normal * ((c.depth + RELAX_OVERSHOOT) * share);
            if let Some(i) = c.bodies.0.smarticle() {
                shift[i] += push;
                turn[i] += (c.point - states[i].center_pos).cross(push) / gyration_sq;
            }
            if let Some(j) = other {
                shift[j] -= push;
                turn[j] -= (c.point - states[j].center_pos).cross(push) / gyration_sq;
            }
        }
        for (i, s) in states.iter_mut().enumerate() {
            let mut d = shift[i] * 0.6;
            let n = d.norm();
            if n > max_move {
                d = d * (max_move / n);
            }
            s.center_pos += d;
            s.heading = wrap_angle(s.heading + (0.6 * turn[i]).clamp(-0.05, 0.05));
        }
    }
    false
}

/// Builds the t = 0 ensemble: ring at the plate center, smarticles at
/// seeded random poses inside it, each already in the gait pose for its
/// seeded phase, all active.
///
/// Dense ensembles cannot be drawn by rejection alone, so bodies are drawn
/// at reduced scale (least-overlapping of a batch of uniform candidates),
/// then grown back to full size with overlap relaxation after each growth
/// stage. A fresh draw is made if a stage stalls.
pub fn initialize_trial(cfg: &ScenarioConfig) -> Result<EnsembleState> {
    cfg.validate()?;
    let n = cfg.ensemble.count;
    let g = &cfg.geometry;
    let ring = RingState {
        center: Vec2::ZERO,
        radius: cfg.ring.radius,
        mass: cfg.ring.mass,
        heading: 0.0,
        drag: cfg.ring.drag,
        velocity: Vec2::ZERO,
    };
    let footprint = 3.0 * g.link_area() * n as f64;
    let disc = PI * ring.radius * ring.radius;
    if footprint >= disc {
        return Err(Error::PlacementFailure(format!(
            "{n} smarticles cover {footprint:.4} m², more than the ring's {disc:.4} m²"
        )));
    }

    let mut rng = trial_rng(cfg);
    let variant = cfg.ensemble.body_variant();
    'attempt: for _ in 0..PLACEMENT_ATTEMPTS {
        let phases: Vec<f64> = (0..n)
            .map(|_| if cfg.ensemble.synchronized_phases { 0.0 } else { rng.gen::<f64>() })
            .collect();
        let small = scaled(g, GROWTH_START);
        let mut placed: Vec<SmarticleState> = Vec::with_capacity(n);
        for (i, &phase) in phases.iter().enumerate() {
            let (pose, target) = cfg.gait.pose_at_phase(phase);
            let mut best: Option<(f64, SmarticleState)> = None;
            for _ in 0..CANDIDATES {
                let r = ring.radius * rng.gen::<f64>().sqrt();
                let t = rng.gen::<f64>() * 2.0 * PI;
                let heading = rng.gen::<f64>() * 2.0 * PI - PI;
                let mut s = SmarticleState::new(i, Vec2::from_angle(t) * r, heading, variant)
                    .with_joints(pose[0], pose[1]);
                s.gait_phase = phase;
                s.gait_target = target;
                s.active = !cfg.ensemble.force_inactive;
                placed.push(s);
                let overlap = total_overlap(&placed, &ring, &small);
                placed.pop();
                if best.as_ref().map_or(true, |(b, _)| overlap < *b) {
                    best = Some((overlap, s));
                }
                if overlap == 0.0 {
                    break;
                }
            }
            placed.push(best.expect("at least one candidate").1);
        }
        let steps = ((1.0 - GROWTH_START) / GROWTH_STEP).round() as usize;
        for k in 0..=steps {
            let f = (GROWTH_START + k as f64 * GROWTH_STEP).min(1.0);
            let iterations = if k == steps { RELAX_ITERATIONS } else { RELAX_ITERATIONS / 10 };
            if !relax(&mut placed, &ring, &scaled(g, f), iterations, &mut rng) {
                continue 'attempt;
            }
        }
        return Ok(EnsembleState::new(placed, ring));
    }
    Err(Error::PlacementFailure(format!(
        "no overlap-free arrangement of {n} smarticles in a ring of radius {} after {PLACEMENT_ATTEMPTS} attempts",
        ring.radius
    )))
}

/// Light command used by scripts and the steering session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum LightAction {
    On { id: u32 },
    Off { id: u32 },
    Toggle { id: u32 },
    Place { id: u32, x: f64, y: f64 },
    Remove { id: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trigger {
    /// First step boundary at or after `t` seconds.
    AtTime { t: f64 },
    /// Exactly at the boundary before physics step `step`.
    AtStep { step: u64 },
    /// First step boundary at which the ring center is within `radius` of (x, y).
    EnterRegion { x: f64, y: f64, radius: f64 },
}

impl Trigger {
    fn fires(&self, e: &EnsembleState) -> bool {
        match *self {
            Trigger::AtTime { t } => e.time >= t - 1e-12,
            Trigger::AtStep { step } => e.step >= step,
            Trigger::EnterRegion { x, y, radius } => e.ring.center.distance(Vec2::new(x, y)) <= radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cue {
    pub trigger: Trigger,
    pub actions: Vec<LightAction>,
}

/// A cue list: cue `k` is armed only after cue `k − 1` has fired, and all
/// actions of a cue apply together at one step boundary.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Script {
    pub cues: Vec<Cue>,
}

impl Script {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Script(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scripts are representable as TOML")
    }

    /// Replays the light states through the cue list and rejects it if any
    /// cue would leave more lights on than `cfg` allows.
    pub fn validate(&self, cfg: &ScenarioConfig) -> Result<()> {
        let mut lights: Vec<LightSource> = cfg.lights.iter().map(|l| l.to_source()).collect();
        for (k, cue) in self.cues.iter().enumerate() {
            for a in &cue.actions {
                apply_action(&mut lights, a, cfg).map_err(|e| Error::Script(format!("cue {k}: {e}")))?;
            }
            let on = lights.iter().filter(|l| l.on).count();
            if on > cfg.sensors.max_lights_on {
                return Err(Error::Script(format!(
                    "cue {k}: exclusive-light violation ({on} lights on, at most {} allowed)",
                    cfg.sensors.max_lights_on
                )));
            }
        }
        Ok(())
    }
}

/// Applies one action without checking the on-count.
fn apply_action(lights: &mut Vec<LightSource>, a: &LightAction, cfg: &ScenarioConfig) -> std::result::Result<(), String> {
    let find = |lights: &mut Vec<LightSource>, id: u32| {
        lights
            .iter()
            .position(|l| l.id == id)
            .ok_or_else(|| format!("no light with id {id}"))
    };
    match *a {
        LightAction::On { id } => {
            let i = find(lights, id)?;
            lights[i].on = true;
        }
        LightAction::Off { id } => {
            let i = find(lights, id)?;
            lights[i].on = false;
        }
        LightAction::Toggle { id } => {
            let i = find(lights, id)?;
            lights[i].on = !lights[i].on;
        }
        LightAction::Place { id, x, y } => {
            let h = cfg.plate_half_extent;
            if x.abs() < h - 1e-12 && y.abs() < h - 1e-12 {
                return Err(format!("light position ({x}, {y}) is inside the plate"));
            }
            if lights.iter().any(|l| l.id == id) {
                return Err(format!("light id {id} already exists"));
            }
            let template = cfg.lights.first().map(|l| l.to_source());
            let mut l = LightSource::point(id, Vec2::new(x, y));
            if let Some(t) = template {
                l.intensity = t.intensity;
                l.emitters = t.emitters;
                l.emitter_spacing = t.emitter_spacing;
            }
            l.on = false;
            lights.push(l);
        }
        LightAction::Remove { id } => {
            let i = find(lights, id)?;
            lights.remove(i);
        }
    }
    Ok(())
}

/// One running trial: the single writer of the ensemble state.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub cfg: ScenarioConfig,
    pub state: EnsembleState,
    pub lights: Vec<LightSource>,
}

impl Simulation {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        let state = initialize_trial(cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            state,
            lights: cfg.lights.iter().map(|l| l.to_source()).collect(),
        })
    }

    pub fn lights_on(&self) -> usize {
        self.lights.iter().filter(|l| l.on).count()
    }

    /// Applies a light command, refusing it if it would break the
    /// exclusive-light limit. On refusal no light changes.
    pub fn apply(&mut self, action: &LightAction) -> std::result::Result<(), String> {
        let mut next = self.lights.clone();
        apply_action(&mut next, action, &self.cfg)?;
        let on = next.iter().filter(|l| l.on).count();
        if on > self.cfg.sensors.max_lights_on {
            return Err("exclusive-light violation".into());
        }
        self.lights = next;
        Ok(())
    }

    fn apply_schedules(&mut self) {
        let t = self.state.time;
        for lc in &self.cfg.lights {
            if lc.schedule.is_some() {
                if let Some(l) = self.lights.iter_mut().find(|l| l.id == lc.id) {
                    l.on = lc.on_at(t);
                }
            }
        }
    }

    /// Sense, switch activity, and drive the joints for the coming step.
    pub fn control(&mut self) -> std::result::Result<(), PhysicsError> {
        let cfg = &self.cfg;
        if !cfg.ensemble.force_inactive {
            let readings = compute_readings(&self.state, &self.lights, &cfg.geometry, &cfg.sensors);
            self.state = update_activity(&self.state, &readings, &cfg.sensors);
        }
        let dt = cfg.physics.dt;
        let contacts = detect_contacts(&self.state, &cfg.geometry);
        for (i, s) in self.state.smarticles.iter_mut().enumerate() {
            let next = if s.active {
                advance_gait(s, &cfg.gait, dt)?
            } else {
                match cfg.sensors.inactive_policy {
                    InactivePolicy::FreezeCurrent => SmarticleState { joint_rate: [0.0; 2], ..*s },
                    InactivePolicy::Straighten => approach_pose(s, [0.0, 0.0], cfg.gait.max_joint_speed, dt),
                }
            };
            *s = if servo_stalled(i, s, &next, &contacts, &cfg.geometry, cfg.physics.servo_stall_depth) {
                let held = SmarticleState {
                    joint_rate: [0.0; 2],
                    stall_time: s.stall_time + dt,
                    ..*s
                };
                if s.active && held.stall_time >= cfg.physics.servo_stall_timeout - 1e-12 {
                    SmarticleState { stall_time: 0.0, ..skip_waypoint(&held, &cfg.gait) }
                } else {
                    held
                }
            } else {
                SmarticleState { stall_time: 0.0, ..next }
            };
        }
        Ok(())
    }

    /// One full step of the protocol loop.
    pub fn advance(&mut self) -> std::result::Result<StepReport, PhysicsError> {
        self.apply_schedules();
        self.control()?;
        let (next, report) = step_with_report(&self.state, &self.cfg.physics, &self.cfg.geometry)?;
        self.state = next;
        Ok(report)
    }

    /// Ring boundary tangent to or past a plate edge.
    pub fn touches_edge(&self) -> bool {
        let c = self.state.ring.center;
        let reach = self.cfg.plate_half_extent - self.state.ring.radius;
        c.x.abs() >= reach || c.y.abs() >= reach
    }

    pub fn sample(&self) -> Sample {
        Sample {
            time: self.state.step as f64 * self.cfg.physics.dt,
            ring_center: self.state.ring.center,
        }
    }
}

/// Sampling and termination bookkeeping for one trial. Samples are taken
/// every `record_interval`, and the edge rule is checked on those samples.
#[derive(Debug, Clone)]
pub struct Recorder {
    every: u64,
    max_steps: u64,
    light_positions: Vec<Vec2>,
    samples: Vec<Sample>,
    frames: Vec<EnsembleState>,
    reason: Option<TerminationReason>,
}

impl Recorder {
    pub fn start(sim: &Simulation) -> Self {
        let mut r = Self {
            every: sim.cfg.record_every(),
            max_steps: sim.cfg.max_steps(),
            light_positions: sim.lights.iter().map(|l| l.position).collect(),
            samples: vec![sim.sample()],
            frames: Vec::new(),
            reason: None,
        };
        if sim.cfg.record_poses {
            r.frames.push(sim.state.clone());
        }
        if sim.touches_edge() {
            r.reason = Some(TerminationReason::ReachedEdge);
        }
        r
    }

    pub fn finished(&self) -> Option<TerminationReason> {
        self.reason
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Call after every physics step.
    pub fn observe(&mut self, sim: &Simulation) {
        let k = sim.state.step;
        if k % self.every == 0 {
            self.samples.push(sim.sample());
            if sim.cfg.record_poses {
                self.frames.push(sim.state.clone());
            }
            if sim.touches_edge() {
                self.reason = Some(TerminationReason::ReachedEdge);
            }
        }
        if self.reason.is_none() && k >= self.max_steps {
            self.reason = Some(TerminationReason::TimedOut);
        }
    }

    /// The record so far; an unfinished trial is reported as timed out.
    pub fn record(&self, cfg: &ScenarioConfig) -> TrajectoryRecord {
        TrajectoryRecord {
            samples: self.samples.clone(),
            frames: self.frames.clone(),
            meta: TrajectoryMeta {
                seed: cfg.rng_seed,
                rng_stream: cfg.rng_stream,
                config_hash: cfg.hash(),
                termination_reason: self.reason.unwrap_or(TerminationReason::TimedOut),
                variant: cfg.ensemble.variant,
                light_positions: self.light_positions.clone(),
                record_interval: cfg.record_interval,
                ring_radius: cfg.ring.radius,
                plate_half_extent: cfg.plate_half_extent,
            },
        }
    }
}

/// Drives `sim` under the protocol's termination rules, calling
/// `before_step` at every step boundary.
pub fn run_protocol<F>(sim: &mut Simulation, mut before_step: F) -> Result<TrajectoryRecord>
where
    F: FnMut(&mut Simulation) -> Result<()>,
{
    let mut rec = Recorder::start(sim);
    while rec.finished().is_none() {
        before_step(sim)?;
        let time = sim.state.time;
        sim.advance().map_err(|source| Error::Trial { time, source })?;
        rec.observe(sim);
    }
    Ok(rec.record(&sim.cfg))
}

pub fn run_trial(cfg: &ScenarioConfig) -> Result<TrajectoryRecord> {
    let mut sim = Simulation::new(cfg)?;
    run_protocol(&mut sim, |_| Ok(()))
}

/// Runs `cfg` with the cue list applied at step boundaries.
pub fn run_scripted(cfg: &ScenarioConfig, script: &Script) -> Result<TrajectoryRecord> {
    script.validate(cfg)?;
    let mut sim = Simulation::new(cfg)?;
    let mut next_cue = 0;
    run_protocol(&mut sim, |sim| {
        while let Some(cue) = script.cues.get(next_cue) {
            if !cue.trigger.fires(&sim.state) {
                break;
            }
            for a in &cue.actions {
                sim.apply(a).map_err(|e| Error::Script(format!("cue {next_cue} at t={}: {e}", sim.state.time)))?;
            }
            next_cue += 1;
        }
        Ok(())
    })
}

/// One trial of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTrial {
    pub seed: u64,
    /// Index into the placement list.
    pub placement: usize,
    /// Reference light position for the trial (whether or not it is lit).
    pub light_position: Vec2,
    pub outcome: std::result::Result<TrajectoryRecord, String>,
}

/// Per-trial config for a batch cell. The first light moves to `placement`
/// and the others are dropped. A dark template gets a light that stays off,
/// so `placement` only fixes the reference direction recorded in the
/// metadata. Each placement draws from its own random stream so no two
/// cells share initial conditions.
pub fn batch_config(template: &ScenarioConfig, seed: u64, placement_index: usize, placement: Vec2) -> ScenarioConfig {
    let mut cfg = template.clone();
    cfg.rng_seed = seed;
    cfg.rng_stream = placement_index as u64;
    let mut l = cfg.lights.first().cloned().unwrap_or_else(|| crate::config::LightConfig {
        on: false,
        schedule: None,
        ..Default::default()
    });
    l.position = [placement.x, placement.y];
    cfg.lights = vec![l];
    cfg
}

/// Seeds × placements, run in parallel, returned seed-major regardless of
/// scheduling. Failed trials are kept as errors.
pub fn run_batch(template: &ScenarioConfig, seeds: &[u64], placements: &[Vec2]) -> Result<Vec<BatchTrial>> {
    if seeds.is_empty() || placements.is_empty() {
        return Err(Error::Config("a batch needs at least one seed and one placement".into()));
    }
    let cells: Vec<(u64, usize, Vec2)> = seeds
        .iter()
        .flat_map(|&s| placements.iter().enumerate().map(move |(k, &p)| (s, k, p)))
        .collect();
    Ok(cells
        .into_par_iter()
        .map(|(seed, k, p)| BatchTrial {
            seed,
            placement: k,
            light_position: p,
            outcome: run_trial(&batch_config(template, seed, k, p)).map_err(|e| e.to_string()),
        })
        .collect())
}
