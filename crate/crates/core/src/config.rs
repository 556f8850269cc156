//! Scenario configuration, loaded from TOML. Every field has a default and
//! unknown keys are rejected.

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::kinematics::{BodyVariant, GaitProgram, SmarticleGeometry, VariantKind};
use crate::physics::PhysicsParams;
use crate::sensing::{LightSource, SensorParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RingConfig {
    pub radius: f64,
    /// N·s/m
    pub drag: f64,
    pub mass: f64,
}

impl Default for RingConfig {
    fn default() -> Self {
        Self {
            radius: 0.095,
            drag: 40.0,
            mass: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub count: usize,
    pub variant: VariantKind,
    /// Per-smarticle variants. Must agree with each other and with `variant`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variants: Option<Vec<VariantKind>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acceptance_half_angle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub saturation_reading: Option<f64>,
    /// Start every gait at phase 0 instead of a seeded random phase.
    pub synchronized_phases: bool,
    /// Hold every smarticle inactive for the whole trial.
    pub force_inactive: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            count: 5,
            variant: VariantKind::Exposed,
            variants: None,
            acceptance_half_angle: None,
            saturation_reading: None,
            synchronized_phases: false,
            force_inactive: false,
        }
    }
}

impl EnsembleConfig {
    pub fn body_variant(&self) -> BodyVariant {
        let mut v = BodyVariant::of_kind(self.variant);
        if let Some(a) = self.acceptance_half_angle {
            v.acceptance_half_angle = a;
        }
        if let Some(s) = self.saturation_reading {
            v.saturation_reading = s;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LightConfig {
    pub id: u32,
    pub position: [f64; 2],
    pub on: bool,
    pub intensity: f64,
    pub emitters: usize,
    pub emitter_spacing: f64,
    /// Half-open `[start, end)` intervals in seconds during which the light
    /// is on. When present it overrides `on`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<[f64; 2]>>,
}

impl Default for LightConfig {
    fn default() -> Self {
        Self {
            id: 1,
            position: [0.1, 0.0],
            on: true,
            intensity: 1.0,
            emitters: 1,
            emitter_spacing: 0.01,
            schedule: None,
        }
    }
}

impl LightConfig {
    pub fn to_source(&self) -> LightSource {
        LightSource {
            id: self.id,
            position: Vec2::new(self.position[0], self.position[1]),
            on: self.on_at(0.0),
            intensity: self.intensity,
            emitters: self.emitters,
            emitter_spacing: self.emitter_spacing,
        }
    }

    pub fn on_at(&self, t: f64) -> bool {
        match &self.schedule {
            Some(iv) => iv.iter().any(|w| t >= w[0] && t < w[1]),
            None => self.on,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Half the side of the square plate, m. The plate is centered at the origin.
    pub plate_half_extent: f64,
    pub rng_seed: u64,
    /// Independent random stream for the same seed; batches use one per
    /// light placement.
    pub rng_stream: u64,
    pub max_duration: f64,
    pub record_interval: f64,
    /// Store every smarticle pose alongside the ring center.
    pub record_poses: bool,
    pub ring: RingConfig,
    pub ensemble: EnsembleConfig,
    pub geometry: SmarticleGeometry,
    pub gait: GaitProgram,
    pub physics: PhysicsParams,
    pub sensors: SensorParams,
    pub lights: Vec<LightConfig>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            plate_half_extent: 0.1,
            rng_seed: 42,
            rng_stream: 0,
            max_duration: 600.0,
            record_interval: 0.1,
            record_poses: false,
            ring: RingConfig::default(),
            ensemble: EnsembleConfig::default(),
            geometry: SmarticleGeometry::default(),
            gait: GaitProgram::default(),
            physics: PhysicsParams::default(),
            sensors: SensorParams::default(),
            lights: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Short content hash of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.plate_half_extent > 0.0) {
            return bad("plate_half_extent must be positive".into());
        }
        if !(self.max_duration > 0.0) || !(self.record_interval > 0.0) {
            return bad("max_duration and record_interval must be positive".into());
        }
        if self.record_interval < self.physics.dt {
            return bad("record_interval cannot be shorter than the physics dt".into());
        }
        let ratio = self.record_interval / self.physics.dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return bad("record_interval must be a whole number of physics steps".into());
        }
        if !(self.ring.radius > 0.0) || !(self.ring.drag > 0.0) || !(self.ring.mass > 0.0) {
            return bad("ring radius, drag and mass must be positive".into());
        }
        if self.ring.radius >= self.plate_half_extent {
            return bad(format!(
                "ring radius {} does not fit on a plate of half extent {}",
                self.ring.radius, self.plate_half_extent
            ));
        }
        if self.geometry.link_length <= 0.0 || self.geometry.link_width <= 0.0 {
            return bad("link dimensions must be positive".into());
        }
        if let Some(vs) = &self.ensemble.variants {
            if vs.len() != self.ensemble.count {
                return bad(format!("{} variants listed for {} smarticles", vs.len(), self.ensemble.count));
            }
            if vs.iter().any(|v| *v != self.ensemble.variant) {
                return bad("ensemble mixes exposed and shrouded smarticles; populations must be homogeneous".into());
            }
        }
        let v = self.ensemble.body_variant();
        if !(v.saturation_reading > 0.0 && v.saturation_reading <= 1.0) {
            return bad("saturation_reading must lie in (0, 1]".into());
        }
        if !(v.acceptance_half_angle > 0.0) {
            return bad("acceptance_half_angle must be positive".into());
        }
        self.gait.validate(&self.geometry).map_err(|e| Error::Config(e.to_string()))?;
        self.physics.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.sensors.validate().map_err(Error::Config)?;
        let mut ids = std::collections::BTreeSet::new();
        for l in &self.lights {
            if !ids.insert(l.id) {
                return bad(format!("duplicate light id {}", l.id));
            }
            let h = self.plate_half_extent;
            let inside = l.position[0].abs() < h - 1e-12 && l.position[1].abs() < h - 1e-12;
            if inside {
                return bad(format!("light {} sits inside the plate; lights belong on or beyond the edge", l.id));
            }
            if l.emitters == 0 || !(l.intensity >= 0.0) {
                return bad(format!("light {} needs at least one emitter and non-negative intensity", l.id));
            }
        }
        let on = self.lights.iter().filter(|l| l.on_at(0.0)).count();
        if on > self.sensors.max_lights_on {
            return bad(format!("{on} lights on at t=0 but at most {} allowed", self.sensors.max_lights_on));
        }
        Ok(())
    }

    /// Midpoints of the four plate edges: +x, +y, −x, −y.
    pub fn edge_midpoints(&self) -> [Vec2; 4] {
        let h = self.plate_half_extent;
        [Vec2::new(h, 0.0), Vec2::new(0.0, h), Vec2::new(-h, 0.0), Vec2::new(0.0, -h)]
    }

    pub fn record_every(&self) -> u64 {
        (self.record_interval / self.physics.dt).round() as u64
    }

    pub fn max_steps(&self) -> u64 {
        (self.max_duration / self.physics.dt).round() as u64
    }
}
