//! Trajectory records and their on-disk forms: a `time,x,y` CSV, a JSON
//! metadata sidecar, and a binary log of full ensemble states.

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::kinematics::{BodyVariant, SmarticleState, VariantKind};
use crate::physics::{EnsembleState, RingState};
use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    ReachedEdge,
    TimedOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub time: f64,
    pub ring_center: Vec2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub seed: u64,
    pub rng_stream: u64,
    pub config_hash: String,
    pub termination_reason: TerminationReason,
    pub variant: VariantKind,
    /// Configured light positions at t = 0, lit or not. The first is the
    /// reference direction for bias analysis.
    pub light_positions: Vec<Vec2>,
    pub record_interval: f64,
    pub ring_radius: f64,
    pub plate_half_extent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub samples: Vec<Sample>,
    pub meta: TrajectoryMeta,
    /// Full ensemble snapshots at each sample, when pose recording is enabled.
    pub frames: Vec<EnsembleState>,
}

impl TrajectoryRecord {
    pub fn start(&self) -> Option<Vec2> {
        self.samples.first().map(|s| s.ring_center)
    }

    pub fn end(&self) -> Option<Vec2> {
        self.samples.last().map(|s| s.ring_center)
    }

    pub fn net_displacement(&self) -> Vec2 {
        match (self.start(), self.end()) {
            (Some(a), Some(b)) => b - a,
            _ => Vec2::ZERO,
        }
    }

    pub fn duration(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.time)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,x,y\n");
        for s in &self.samples {
            out.push_str(&format!("{},{},{}\n", sig9(s.time), sig9(s.ring_center.x), sig9(s.ring_center.y)));
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.meta.json` (and `<stem>.states.bin`
    /// when frames were recorded) into `dir`. Returns the CSV path.
    pub fn write_files(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv())?;
        let meta = serde_json::to_string_pretty(&self.meta).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(dir.join(format!("{stem}.meta.json")), meta + "\n")?;
        if !self.frames.is_empty() {
            let mut w = BufWriter::new(File::create(dir.join(format!("{stem}.states.bin")))?);
            write_state_log(&mut w, &self.frames)?;
            w.flush()?;
        }
        Ok(csv_path)
    }
}

/// Formats like C's `%.9g`.
pub fn sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    // Rounding can carry into the next decade (9.9999999999 → 10.0000000).
    let sci = format!("{:.8e}", v);
    let (mantissa, e) = sci.split_once('e').expect("scientific format");
    let e: i32 = e.parse().expect("exponent");
    let exp = if e != exp { e } else { exp };
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, v);
        trim_zeros(&s)
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// Reads any CSV with `time,x,y` columns (extra columns are ignored).
pub fn read_samples_csv(path: &Path) -> Result<Vec<Sample>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Parse(format!("{}: missing `{name}` column", path.display())))
    };
    let (ct, cx, cy) = (col("time")?, col("x")?, col("y")?);
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> Result<f64> {
            rec.get(c)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Parse(format!("{}: bad number on row {}", path.display(), line + 2)))
        };
        out.push(Sample {
            time: num(ct)?,
            ring_center: Vec2::new(num(cx)?, num(cy)?),
        });
    }
    Ok(out)
}

pub fn read_meta(path: &Path) -> Result<TrajectoryMeta> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Loads a trajectory from its CSV, picking up the sidecar metadata when it
/// sits next to it.
pub fn load_trajectory(csv_path: &Path) -> Result<(Vec<Sample>, Option<TrajectoryMeta>)> {
    let samples = read_samples_csv(csv_path)?;
    let name = csv_path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let stem = name.strip_suffix(".csv").unwrap_or(name);
    let meta_path = csv_path.with_file_name(format!("{stem}.meta.json"));
    let meta = if meta_path.exists() { Some(read_meta(&meta_path)?) } else { None };
    Ok((samples, meta))
}

const LOG_MAGIC: &[u8; 8] = b"SSIMLOG1";

fn kind_code(k: VariantKind) -> u8 {
    match k {
        VariantKind::Exposed => 0,
        VariantKind::Shrouded => 1,
    }
}

fn write_vec2<W: Write>(w: &mut W, v: Vec2) -> std::io::Result<()> {
    w.write_f64::<LE>(v.x)?;
    w.write_f64::<LE>(v.y)
}

fn read_vec2<R: Read>(r: &mut R) -> std::io::Result<Vec2> {
    Ok(Vec2::new(r.read_f64::<LE>()?, r.read_f64::<LE>()?))
}

/// Little-endian log: magic, frame count, then per frame the step, time,
/// ring state and every smarticle state. Lossless, so replaying from any
/// frame continues bit for bit.
pub fn write_state_log<W: Write>(w: &mut W, frames: &[EnsembleState]) -> std::io::Result<()> {
    w.write_all(LOG_MAGIC)?;
    w.write_u64::<LE>(frames.len() as u64)?;
    for f in frames {
        w.write_u64::<LE>(f.step)?;
        w.write_f64::<LE>(f.time)?;
        let r = &f.ring;
        write_vec2(w, r.center)?;
        w.write_f64::<LE>(r.radius)?;
        w.write_f64::<LE>(r.mass)?;
        w.write_f64::<LE>(r.heading)?;
        w.write_f64::<LE>(r.drag)?;
        write_vec2(w, r.velocity)?;
        w.write_u32::<LE>(f.smarticles.len() as u32)?;
        for s in &f.smarticles {
            w.write_u64::<LE>(s.id as u64)?;
            write_vec2(w, s.center_pos)?;
            w.write_f64::<LE>(s.heading)?;
            w.write_f64::<LE>(s.alpha1)?;
            w.write_f64::<LE>(s.alpha2)?;
            w.write_u8(u8::from(s.active))?;
            w.write_u8(kind_code(s.variant.kind))?;
            w.write_f64::<LE>(s.variant.acceptance_half_angle)?;
            w.write_f64::<LE>(s.variant.saturation_reading)?;
            w.write_f64::<LE>(s.gait_phase)?;
            w.write_u64::<LE>(s.gait_target as u64)?;
            w.write_f64::<LE>(s.joint_rate[0])?;
            w.write_f64::<LE>(s.joint_rate[1])?;
            write_vec2(w, s.velocity)?;
            w.write_f64::<LE>(s.angular_velocity)?;
            w.write_f64::<LE>(s.stall_time)?;
        }
    }
    Ok(())
}

pub fn read_state_log<R: Read>(r: &mut R) -> Result<Vec<EnsembleState>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != LOG_MAGIC {
        return Err(Error::Parse("not a state log".into()));
    }
    let n = r.read_u64::<LE>()?;
    let mut frames = Vec::with_capacity(n.min(1 << 20) as usize);
    for _ in 0..n {
        let step = r.read_u64::<LE>()?;
        let time = r.read_f64::<LE>()?;
        let ring = RingState {
            center: read_vec2(r)?,
            radius: r.read_f64::<LE>()?,
            mass: r.read_f64::<LE>()?,
            heading: r.read_f64::<LE>()?,
            drag: r.read_f64::<LE>()?,
            velocity: read_vec2(r)?,
        };
        let count = r.read_u32::<LE>()?;
        let mut smarticles = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let id = r.read_u64::<LE>()? as usize;
            let center_pos = read_vec2(r)?;
            let heading = r.read_f64::<LE>()?;
            let alpha1 = r.read_f64::<LE>()?;
            let alpha2 = r.read_f64::<LE>()?;
            let active = r.read_u8()? != 0;
            let kind = match r.read_u8()? {
                0 => VariantKind::Exposed,
                1 => VariantKind::Shrouded,
                k => return Err(Error::Parse(format!("unknown variant code {k}"))),
            };
            let variant = BodyVariant {
                kind,
                acceptance_half_angle: r.read_f64::<LE>()?,
                saturation_reading: r.read_f64::<LE>()?,
            };
            smarticles.push(SmarticleState {
                id,
                center_pos,
                heading,
                alpha1,
                alpha2,
                active,
                variant,
                gait_phase: r.read_f64::<LE>()?,
                gait_target: r.read_u64::<LE>()? as usize,
                joint_rate: [r.read_f64::<LE>()?, r.read_f64::<LE>()?],
                velocity: read_vec2(r)?,
                angular_velocity: r.read_f64::<LE>()?,
                stall_time: r.read_f64::<LE>()?,
            });
        }
        frames.push(EnsembleState { smarticles, ring, time, step });
    }
    Ok(frames)
}

pub fn read_state_log_file(path: &Path) -> Result<Vec<EnsembleState>> {
    read_state_log(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sig9_formats() {
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(0.1), "0.1");
        assert_eq!(sig9(600.0), "600");
        assert_eq!(sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(sig9(-0.0012345678912), "-0.00123456789");
        assert_eq!(sig9(1.5e-7), "1.5e-07");
        assert_eq!(sig9(123456789.4), "123456789");
        assert_eq!(sig9(9.9999999999), "10");
        assert_eq!(sig9(2.5e12), "2.5e+12");
    }

    proptest! {
        #[test]
        fn sig9_keeps_nine_digits(v in -1.0e3f64..1.0e3) {
            let back: f64 = sig9(v).parse().unwrap();
            prop_assert!((back - v).abs() <= 1e-8 * v.abs().max(1e-300) * 10.0);
        }

        #[test]
        fn state_log_is_lossless(
            xs in proptest::collection::vec((-1.0f64..1.0, -3.0f64..3.0, any::<bool>(), 0u64..1000), 0..6),
            t in 0.0f64..600.0,
        ) {
            let smarticles: Vec<SmarticleState> = xs
                .iter()
                .enumerate()
                .map(|(i, &(x, h, active, k))| {
                    let mut s = SmarticleState::new(i, Vec2::new(x, -x * 0.5), h, BodyVariant::shrouded())
                        .with_joints(h * 0.3, -h * 0.2);
                    s.active = active;
                    s.gait_target = k as usize % 4;
                    s.gait_phase = x.abs() * 0.9;
                    s.velocity = Vec2::new(h * 1e-3, x * 1e-4);
                    s
                })
                .collect();
            let mut e = EnsembleState::new(smarticles, RingState::new(Vec2::new(t * 1e-4, -t * 1e-5), 0.095));
            e.time = t;
            e.step = (t * 1000.0) as u64;
            let frames = vec![e.clone(), e];
            let mut buf = Vec::new();
            write_state_log(&mut buf, &frames).unwrap();
            let back = read_state_log(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, frames);
        }
    }

    #[test]
    fn csv_reader_accepts_foreign_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mocap.csv");
        std::fs::write(&p, "frame,time,x,y,z\n0,0.0,0.001,0.002,0\n1,0.01,0.0011,0.0021,0\n").unwrap();
        let s = read_samples_csv(&p).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].ring_center, Vec2::new(0.0011, 0.0021));
        std::fs::write(&p, "t,x,y\n0,0,0\n").unwrap();
        assert!(read_samples_csv(&p).is_err());
    }
}
