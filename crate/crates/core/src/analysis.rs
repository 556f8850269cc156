//! Trajectory statistics: mean squared displacement, biased-diffusion fits,
//! light-relative displacement angles and batch-level bias tests.
//!
//! Angles are measured from the away-from-light axis: 0 is straight away
//! from the light, ±π straight toward it.

use crate::error::{AnalysisError, Result};
use crate::geom::{wrap_angle, Vec2};
use crate::record::{Sample, TrajectoryRecord};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, Discrete};
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

pub const DEFAULT_MAX_LAG_FRACTION: f64 = 0.25;
pub const HISTOGRAM_BINS: usize = 12;
/// Net displacements shorter than this have no meaningful direction, m.
pub const DEGENERATE_DISPLACEMENT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsdCurve {
    /// s, starting at 0.
    pub lags: Vec<f64>,
    /// m²
    pub msd: Vec<f64>,
    /// Displacement pairs averaged at each lag.
    pub counts: Vec<usize>,
}

impl MsdCurve {
    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["lag", "msd", "count"])?;
        for i in 0..self.len() {
            w.write_record([
                crate::record::sig9(self.lags[i]),
                crate::record::sig9(self.msd[i]),
                self.counts[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn sampling_interval(samples: &[Sample]) -> std::result::Result<f64, AnalysisError> {
    if samples.len() < 2 {
        return Err(AnalysisError::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let n = samples.len();
    let step = (samples[n - 1].time - samples[0].time) / (n - 1) as f64;
    if !(step > 0.0) {
        return Err(AnalysisError::NonUniformSampling(samples[0].time));
    }
    for w in samples.windows(2) {
        let d = w[1].time - w[0].time;
        if (d - step).abs() > 1e-6 * step {
            return Err(AnalysisError::NonUniformSampling(w[0].time));
        }
    }
    Ok(step)
}

/// Overlapping-window MSD over lags 0, Δ, …, up to `max_lag_fraction` of
/// the trajectory duration (at least one nonzero lag).
pub fn compute_msd(samples: &[Sample], max_lag_fraction: f64) -> std::result::Result<MsdCurve, AnalysisError> {
    let step = sampling_interval(samples)?;
    let n = samples.len();
    let max_k = ((max_lag_fraction * (n - 1) as f64 + 1e-9).floor() as usize).clamp(1, n - 1);
    let mut curve = MsdCurve {
        lags: Vec::with_capacity(max_k + 1),
        msd: Vec::with_capacity(max_k + 1),
        counts: Vec::with_capacity(max_k + 1),
    };
    for k in 0..=max_k {
        let pairs = n - k;
        let sum: f64 = (0..pairs)
            .map(|i| (samples[i + k].ring_center - samples[i].ring_center).norm_sq())
            .sum();
        curve.lags.push(k as f64 * step);
        curve.msd.push(sum / pairs as f64);
        curve.counts.push(pairs);
    }
    Ok(curve)
}

pub fn trajectory_msd(traj: &TrajectoryRecord, max_lag_fraction: f64) -> std::result::Result<MsdCurve, AnalysisError> {
    compute_msd(&traj.samples, max_lag_fraction)
}

/// Ensemble mean of curves sharing a lag step; each lag averages the
/// curves long enough to have it.
pub fn mean_msd(curves: &[MsdCurve]) -> std::result::Result<MsdCurve, AnalysisError> {
    let first = curves.iter().find(|c| c.len() > 1).ok_or(AnalysisError::Empty)?;
    let step = first.lags[1];
    let longest = curves.iter().map(|c| c.len()).max().unwrap_or(0);
    let mut out = MsdCurve {
        lags: Vec::new(),
        msd: Vec::new(),
        counts: Vec::new(),
    };
    for c in curves.iter().filter(|c| c.len() > 1) {
        if (c.lags[1] - step).abs() > 1e-6 * step {
            return Err(AnalysisError::NonUniformSampling(c.lags[1]));
        }
    }
    for k in 0..longest {
        let have: Vec<&MsdCurve> = curves.iter().filter(|c| c.len() > k).collect();
        out.lags.push(k as f64 * step);
        out.msd.push(have.iter().map(|c| c.msd[k]).sum::<f64>() / have.len() as f64);
        out.counts.push(have.iter().map(|c| c.counts[k]).sum());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionFit {
    /// m²/s
    pub d: f64,
    /// m/s
    pub v: f64,
    /// Root-mean-square residual over the fitted lags, m².
    pub residual_rms: f64,
}

impl DiffusionFit {
    pub fn model(&self, lag: f64) -> f64 {
        4.0 * self.d * lag + self.v * self.v * lag * lag
    }

    /// Share of the model MSD at `lag` carried by the drift term.
    pub fn drift_share(&self, lag: f64) -> f64 {
        let total = self.model(lag);
        if total > 0.0 {
            self.v * self.v * lag * lag / total
        } else {
            0.0
        }
    }
}

/// Non-negative least squares of msd(τ) = 4Dτ + v²τ² over the nonzero lags.
///
/// Overlapping-window MSD points are strongly correlated and their spread
/// grows like τ^(3/2), so each lag is weighted by τ^-3; unweighted fits are
/// dominated by the noisy long-lag tail.
pub fn fit_biased_diffusion(curve: &MsdCurve) -> std::result::Result<DiffusionFit, AnalysisError> {
    fit_weighted(curve, |t| t.powi(-3))
}

fn fit_weighted(curve: &MsdCurve, weight: impl Fn(f64) -> f64) -> std::result::Result<DiffusionFit, AnalysisError> {
    if curve.len() < 4 {
        return Err(AnalysisError::TooFewSamples {
            needed: 4,
            got: curve.len(),
        });
    }
    if let Some(i) = curve.msd.iter().position(|&m| m < 0.0 || !m.is_finite()) {
        return Err(AnalysisError::NegativeMsd(curve.lags[i]));
    }
    let pts: Vec<(f64, f64, f64)> = curve
        .lags
        .iter()
        .zip(&curve.msd)
        .filter(|(t, _)| **t > 0.0)
        .map(|(&t, &m)| (t, m, weight(t)))
        .collect();
    let (mut s11, mut s12, mut s22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(t, m, w) in &pts {
        let (x1, x2) = (t, t * t);
        s11 += w * x1 * x1;
        s12 += w * x1 * x2;
        s22 += w * x2 * x2;
        b1 += w * x1 * m;
        b2 += w * x2 * m;
    }
    let sse = |a: f64, b: f64| pts.iter().map(|&(t, m, w)| w * (a * t + b * t * t - m).powi(2)).sum::<f64>();
    let mut candidates = vec![(0.0, 0.0), ((b1 / s11).max(0.0), 0.0), (0.0, (b2 / s22).max(0.0))];
    let det = s11 * s22 - s12 * s12;
    if det.abs() > 1e-300 {
        let a = (b1 * s22 - b2 * s12) / det;
        let b = (s11 * b2 - s12 * b1) / det;
        if a >= 0.0 && b >= 0.0 {
            candidates.push((a, b));
        }
    }
    let (a, b) = candidates
        .into_iter()
        .min_by(|p, q| sse(p.0, p.1).total_cmp(&sse(q.0, q.1)))
        .expect("candidates are never empty");
    let rms = (pts.iter().map(|&(t, m, _)| (a * t + b * t * t - m).powi(2)).sum::<f64>() / pts.len() as f64).sqrt();
    Ok(DiffusionFit {
        d: a / 4.0,
        v: b.sqrt(),
        residual_rms: rms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub net_displacement: Vec2,
    /// Signed angle from the away-from-light axis, in (−π, π].
    pub displacement_angle_rel_light: f64,
    pub toward_light: bool,
}

/// Direction of `displacement` relative to the axis pointing from `light`
/// through `start`.
pub fn summarize_displacement(start: Vec2, displacement: Vec2, light: Vec2) -> std::result::Result<TrialSummary, AnalysisError> {
    let len = displacement.norm();
    if len < DEGENERATE_DISPLACEMENT {
        return Err(AnalysisError::UndefinedAngle(len));
    }
    let away = (start - light).normalized();
    let angle = wrap_angle(away.cross(displacement).atan2(away.dot(displacement)));
    Ok(TrialSummary {
        net_displacement: displacement,
        displacement_angle_rel_light: angle,
        toward_light: angle.abs() > PI / 2.0,
    })
}

pub fn summarize_trial(traj: &TrajectoryRecord, light: Vec2) -> std::result::Result<TrialSummary, AnalysisError> {
    let start = traj.samples.first().ok_or(AnalysisError::Empty)?.ring_center;
    summarize_displacement(start, traj.net_displacement(), light)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    /// Non-degenerate trials.
    pub total: usize,
    pub toward_count: usize,
    pub toward_fraction: f64,
    /// Two-sided exact binomial test of the toward fraction against 1/2.
    pub binomial_p: f64,
    /// Counts over equal bins of (−π, π]; bin k covers (−π + kw, −π + (k+1)w].
    pub polar_histogram: Vec<usize>,
    pub mean_resultant_length: f64,
    /// Direction of the mean resultant, (−π, π].
    pub mean_resultant_angle: f64,
    /// Rayleigh test of angular uniformity.
    pub rayleigh_p: f64,
    /// Trials excluded for near-zero displacement.
    pub degenerate: usize,
    pub fitted_d: Option<f64>,
    pub fitted_v: Option<f64>,
}

impl BatchStats {
    pub fn bin_edges(&self) -> Vec<f64> {
        let n = self.polar_histogram.len();
        (0..=n).map(|k| -PI + 2.0 * PI * k as f64 / n as f64).collect()
    }

    pub fn write_histogram_csv(&self, path: &Path) -> Result<()> {
        let edges = self.bin_edges();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_start", "bin_end", "count"])?;
        for (k, c) in self.polar_histogram.iter().enumerate() {
            w.write_record([
                crate::record::sig9(edges[k]),
                crate::record::sig9(edges[k + 1]),
                c.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_report(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(serde_json::to_string_pretty(self).expect("stats serialize").as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

pub fn histogram_bin(angle: f64, bins: usize) -> usize {
    let w = 2.0 * PI / bins as f64;
    let k = ((wrap_angle(angle) + PI) / w).ceil() as usize;
    k.clamp(1, bins) - 1
}

/// Two-sided exact binomial test against p = 1/2: total probability of
/// outcomes no more likely than `k`.
pub fn binomial_two_sided(k: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let dist = Binomial::new(0.5, n as u64).expect("p = 1/2 is valid");
    let pk = dist.pmf(k as u64);
    let p: f64 = (0..=n as u64)
        .map(|i| dist.pmf(i))
        .filter(|&pi| pi <= pk * (1.0 + 1e-7))
        .sum();
    p.min(1.0)
}

/// Rayleigh test p-value for `n` angles with mean resultant length `r`.
pub fn rayleigh_p(n: usize, r: f64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let n = n as f64;
    let rn = n * r;
    let p = ((1.0 + 4.0 * n + 4.0 * (n * n - rn * rn)).sqrt() - (1.0 + 2.0 * n)).exp();
    p.clamp(0.0, 1.0)
}

pub fn aggregate(summaries: &[TrialSummary]) -> std::result::Result<BatchStats, AnalysisError> {
    aggregate_binned(summaries, HISTOGRAM_BINS)
}

pub fn aggregate_binned(summaries: &[TrialSummary], bins: usize) -> std::result::Result<BatchStats, AnalysisError> {
    if summaries.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let n = summaries.len();
    let toward = summaries.iter().filter(|s| s.toward_light).count();
    let mut hist = vec![0; bins];
    let mut resultant = Vec2::ZERO;
    for s in summaries {
        hist[histogram_bin(s.displacement_angle_rel_light, bins)] += 1;
        resultant += Vec2::from_angle(s.displacement_angle_rel_light);
    }
    let mean = resultant * (1.0 / n as f64);
    let r = mean.norm().min(1.0);
    Ok(BatchStats {
        total: n,
        toward_count: toward,
        toward_fraction: toward as f64 / n as f64,
        binomial_p: binomial_two_sided(toward, n),
        polar_histogram: hist,
        mean_resultant_length: r,
        mean_resultant_angle: if r > 1e-12 { mean.angle() } else { 0.0 },
        rayleigh_p: rayleigh_p(n, r),
        degenerate: 0,
        fitted_d: None,
        fitted_v: None,
    })
}

/// Everything derived from a set of trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchAnalysis {
    pub stats: BatchStats,
    /// Per input trajectory; `None` for a degenerate one.
    pub trials: Vec<Option<TrialSummary>>,
    pub mean_msd: MsdCurve,
    pub fit: Option<DiffusionFit>,
}

/// Like [`summarize_trial`] for a bare sample sequence.
pub fn summarize_samples(samples: &[Sample], light: Vec2) -> std::result::Result<TrialSummary, AnalysisError> {
    let (first, last) = match (samples.first(), samples.last()) {
        (Some(a), Some(b)) => (a.ring_center, b.ring_center),
        _ => return Err(AnalysisError::Empty),
    };
    summarize_displacement(first, last - first, light)
}

/// Summaries, bias statistics and the ensemble MSD of `trajectories`, each
/// paired with its reference light position.
pub fn analyze_trajectories(
    trajectories: &[(&[Sample], Vec2)],
    max_lag_fraction: f64,
) -> std::result::Result<BatchAnalysis, AnalysisError> {
    let mut summaries = Vec::new();
    let mut trials = Vec::new();
    let mut curves = Vec::new();
    for &(samples, light) in trajectories {
        match summarize_samples(samples, light) {
            Ok(s) => {
                summaries.push(s);
                trials.push(Some(s));
            }
            Err(AnalysisError::UndefinedAngle(_)) => trials.push(None),
            Err(e) => return Err(e),
        }
        if samples.len() >= 2 {
            curves.push(compute_msd(samples, max_lag_fraction)?);
        }
    }
    let mut stats = if summaries.is_empty() {
        BatchStats {
            total: 0,
            toward_count: 0,
            toward_fraction: 0.0,
            binomial_p: 1.0,
            polar_histogram: vec![0; HISTOGRAM_BINS],
            mean_resultant_length: 0.0,
            mean_resultant_angle: 0.0,
            rayleigh_p: 1.0,
            degenerate: 0,
            fitted_d: None,
            fitted_v: None,
        }
    } else {
        aggregate(&summaries)?
    };
    stats.degenerate = trials.len() - summaries.len();
    let mean = mean_msd(&curves)?;
    let fit = fit_biased_diffusion(&mean).ok();
    stats.fitted_d = fit.map(|f| f.d);
    stats.fitted_v = fit.map(|f| f.v);
    Ok(BatchAnalysis {
        stats,
        trials,
        mean_msd: mean,
        fit,
    })
}
