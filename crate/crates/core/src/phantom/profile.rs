//! Piecewise-cosine LV volume profile over one cardiac cycle.
//!
//! Phases, in cycle fractions `s ∈ [0, 1)`:
//!
//! ```text
//! [0, es)                ejection        1 → 1-ef         half-cosine ramp
//! [es, rapid_end)        rapid filling   +(1-a)·ef        half-cosine ramp
//! [rapid_end, kick)      diastasis       flat
//! [kick, 1)              atrial kick     +a·ef            half-cosine ramp
//! ```
//!
//! The filling window after end-systole, minus diastasis, is shared 60/40
//! between rapid filling and the atrial kick. Every ramp starts and ends with
//! zero slope so the curve is C¹ and closes cyclically at `s = 1`.

use std::f64::consts::PI;

use super::PhantomParams;
use crate::error::{Error, Result};

/// Share of the non-diastasis filling window taken by rapid filling.
pub const RAPID_SHARE: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeProfile {
    pub ef: f64,
    pub es: f64,
    pub rapid_end: f64,
    pub kick_start: f64,
    pub a_wave: f64,
}

/// Peak rates of the normalized profile, in ED-volume fractions per cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakRates {
    pub per: f64,
    pub pfr: f64,
    pub pafr: f64,
}

fn ramp(u: f64) -> f64 {
    0.5 * (1.0 - (PI * u).cos())
}

fn ramp_slope(u: f64) -> f64 {
    0.5 * PI * (PI * u).sin()
}

fn ramp_curvature(u: f64) -> f64 {
    0.5 * PI * PI * (PI * u).cos()
}

impl VolumeProfile {
    /// Continuous profile with end-systole exactly at `params.es_fraction`.
    pub fn new(params: &PhantomParams) -> Result<Self> {
        params.validate()?;
        Self::with_es(params, params.es_fraction)
    }

    /// Profile sampled on `frames` frames: end-systole is snapped to the
    /// nearest frame so the sampled minimum is exactly `1 - ef`.
    pub fn for_frames(params: &PhantomParams, frames: usize) -> Result<Self> {
        params.validate()?;
        if frames < 8 {
            return Err(Error::Parameter(format!("need at least 8 frames, got {frames}")));
        }
        let es_frame = (params.es_fraction * frames as f64).round().max(1.0);
        Self::with_es(params, es_frame / frames as f64)
    }

    fn with_es(params: &PhantomParams, es: f64) -> Result<Self> {
        let fill = 1.0 - es - params.diastasis_fraction;
        if fill <= 0.0 {
            return Err(Error::Parameter(format!(
                "es_fraction + diastasis_fraction must be < 1 (got {es} + {})",
                params.diastasis_fraction
            )));
        }
        let rapid_end = es + RAPID_SHARE * fill;
        Ok(Self {
            ef: params.ef_target,
            es,
            rapid_end,
            kick_start: rapid_end + params.diastasis_fraction,
            a_wave: params.a_wave_fraction,
        })
    }

    fn rapid_len(&self) -> f64 {
        self.rapid_end - self.es
    }

    fn kick_len(&self) -> f64 {
        1.0 - self.kick_start
    }

    /// Normalized volume at cycle fraction `s` (wrapped into `[0, 1)`).
    pub fn value(&self, s: f64) -> f64 {
        let s = s.rem_euclid(1.0);
        let floor = 1.0 - self.ef;
        let rapid_gain = (1.0 - self.a_wave) * self.ef;
        if s < self.es {
            1.0 - self.ef * ramp(s / self.es)
        } else if s < self.rapid_end {
            floor + rapid_gain * ramp((s - self.es) / self.rapid_len())
        } else if s < self.kick_start {
            floor + rapid_gain
        } else {
            floor + rapid_gain + self.a_wave * self.ef * ramp((s - self.kick_start) / self.kick_len())
        }
    }

    /// dv/ds in ED fractions per cycle.
    pub fn slope(&self, s: f64) -> f64 {
        let s = s.rem_euclid(1.0);
        if s < self.es {
            -self.ef * ramp_slope(s / self.es) / self.es
        } else if s < self.rapid_end {
            (1.0 - self.a_wave) * self.ef * ramp_slope((s - self.es) / self.rapid_len()) / self.rapid_len()
        } else if s < self.kick_start {
            0.0
        } else {
            self.a_wave * self.ef * ramp_slope((s - self.kick_start) / self.kick_len()) / self.kick_len()
        }
    }

    /// d²v/ds².
    pub fn curvature(&self, s: f64) -> f64 {
        let s = s.rem_euclid(1.0);
        if s < self.es {
            -self.ef * ramp_curvature(s / self.es) / (self.es * self.es)
        } else if s < self.rapid_end {
            let len = self.rapid_len();
            (1.0 - self.a_wave) * self.ef * ramp_curvature((s - self.es) / len) / (len * len)
        } else if s < self.kick_start {
            0.0
        } else {
            let len = self.kick_len();
            self.a_wave * self.ef * ramp_curvature((s - self.kick_start) / len) / (len * len)
        }
    }

    pub fn peak_rates(&self) -> PeakRates {
        let half_pi = 0.5 * PI;
        PeakRates {
            per: self.ef * half_pi / self.es,
            pfr: (1.0 - self.a_wave) * self.ef * half_pi / self.rapid_len(),
            pafr: self.a_wave * self.ef * half_pi / self.kick_len(),
        }
    }

    /// Cycle fraction of the curvature sign change that separates rapid
    /// filling from the atrial kick. The diastasis plateau has zero
    /// curvature, so the change is placed at its midpoint.
    pub fn atrial_inflection(&self) -> Option<f64> {
        (self.a_wave > 0.0).then(|| 0.5 * (self.rapid_end + self.kick_start))
    }

    pub fn sample(&self, frames: usize) -> Vec<f64> {
        (0..frames).map(|t| self.value(t as f64 / frames as f64)).collect()
    }
}

/// Normalized volume sequence of `frames` samples; `v[0] = 1` is end-diastole.
pub fn synthesize_volume_profile(params: &PhantomParams, frames: usize) -> Result<Vec<f64>> {
    Ok(VolumeProfile::for_frames(params, frames)?.sample(frames))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(ef: f64, es: f64, dias: f64, a: f64) -> PhantomParams {
        PhantomParams {
            ef_target: ef,
            es_fraction: es,
            diastasis_fraction: dias,
            a_wave_fraction: a,
            ..PhantomParams::default()
        }
    }

    /// Sign-change scan on sampled values, independent of the closed-form
    /// phase boundaries. Zero runs between a negative and a positive second
    /// difference resolve to their midpoint.
    fn scan_inflection(v: &[f64], start: usize) -> Option<f64> {
        let n = v.len();
        let d2: Vec<f64> = (0..n).map(|k| v[(k + 1) % n] - 2.0 * v[k] + v[(k + n - 1) % n]).collect();
        let tol = 1e-12;
        let mut last_neg = None;
        for k in start..n - 1 {
            if d2[k] < -tol {
                last_neg = Some(k);
            } else if d2[k] > tol {
                if let Some(neg) = last_neg {
                    return Some(0.5 * (neg + k) as f64);
                }
            }
        }
        None
    }

    #[test]
    fn ed_is_one_and_es_is_the_floor() {
        let v = synthesize_volume_profile(&params(0.6, 0.35, 0.15, 0.2), 50).unwrap();
        assert_eq!(v[0], 1.0);
        let (argmin, min) = v
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &x)| if x < acc.1 { (i, x) } else { acc });
        assert!((min - 0.4).abs() < 1e-12, "min {min}");
        assert_eq!(argmin, 18); // 0.35 * 50 = 17.5 rounds to 18
    }

    #[test]
    fn no_atrial_kick_means_monotone_filling() {
        let v = synthesize_volume_profile(&params(0.55, 0.3, 0.1, 0.0), 50).unwrap();
        for t in 15..49 {
            assert!(v[t + 1] >= v[t], "decrease at {t}");
        }
        assert_eq!(VolumeProfile::new(&params(0.55, 0.3, 0.1, 0.0)).unwrap().atrial_inflection(), None);
    }

    #[test]
    fn atrial_inflection_matches_second_difference_scan() {
        // ef=0.5, es=0.3, a=0.2, T=50; diastasis 0.1.
        let p = params(0.5, 0.3, 0.1, 0.2);
        let profile = VolumeProfile::for_frames(&p, 50).unwrap();
        let v = profile.sample(50);
        // Start after the rapid-filling peak rate.
        let peak = ((profile.es + 0.5 * (profile.rapid_end - profile.es)) * 50.0).ceil() as usize;
        let scanned = scan_inflection(&v, peak).expect("inflection present");
        let analytic = profile.atrial_inflection().unwrap() * 50.0;
        assert!((scanned - analytic).abs() <= 1.0, "scan {scanned} vs analytic {analytic}");
    }

    #[test]
    fn cyclic_closure_and_phase_monotonicity() {
        let p = params(0.62, 0.33, 0.12, 0.25);
        let prof = VolumeProfile::new(&p).unwrap();
        assert!((prof.value(1.0) - prof.value(0.0)).abs() < 1e-15);
        assert!((prof.value(1.0 - 1e-12) - 1.0).abs() < 1e-9);
        let n = 2000;
        for i in 1..n {
            let (s0, s1) = ((i - 1) as f64 / n as f64, i as f64 / n as f64);
            if s1 < prof.es {
                assert!(prof.value(s1) < prof.value(s0));
            } else if s0 > prof.es && s1 < prof.rapid_end {
                assert!(prof.value(s1) > prof.value(s0));
            } else if s0 > prof.kick_start {
                assert!(prof.value(s1) > prof.value(s0));
            }
        }
    }

    #[test]
    fn slope_and_curvature_match_finite_differences() {
        let prof = VolumeProfile::new(&params(0.6, 0.35, 0.12, 0.3)).unwrap();
        let h = 1e-6;
        for i in 1..200 {
            let s = i as f64 / 200.0 + 1.3e-3;
            let fd = (prof.value(s + h) - prof.value(s - h)) / (2.0 * h);
            assert!((fd - prof.slope(s)).abs() < 1e-6, "slope at {s}");
            let fd2 = (prof.slope(s + h) - prof.slope(s - h)) / (2.0 * h);
            assert!((fd2 - prof.curvature(s)).abs() < 1e-3 * (1.0 + fd2.abs()), "curv at {s}");
        }
    }

    #[test]
    fn peak_rates_are_slope_extremes() {
        let prof = VolumeProfile::new(&params(0.6, 0.35, 0.12, 0.3)).unwrap();
        let grid: Vec<f64> = (0..100_000).map(|i| i as f64 / 100_000.0).collect();
        let per = grid.iter().map(|&s| -prof.slope(s)).fold(0.0, f64::max);
        let pfr = grid
            .iter()
            .filter(|&&s| s > prof.es && s < prof.rapid_end)
            .map(|&s| prof.slope(s))
            .fold(0.0, f64::max);
        let pafr = grid.iter().filter(|&&s| s > prof.kick_start).map(|&s| prof.slope(s)).fold(0.0, f64::max);
        let r = prof.peak_rates();
        assert!((per - r.per).abs() < 1e-6 * r.per);
        assert!((pfr - r.pfr).abs() < 1e-6 * r.pfr);
        assert!((pafr - r.pafr).abs() < 1e-6 * r.pafr);
    }

    #[test]
    fn rejects_bad_fractions() {
        assert!(synthesize_volume_profile(&params(1.2, 0.3, 0.1, 0.2), 20).is_err());
        assert!(synthesize_volume_profile(&params(0.6, 0.0, 0.1, 0.2), 20).is_err());
        assert!(synthesize_volume_profile(&params(0.6, 0.3, 0.1, 1.0), 20).is_err());
        assert!(synthesize_volume_profile(&params(0.6, 0.6, 0.5, 0.2), 20).is_err());
        assert!(synthesize_volume_profile(&params(0.6, 0.3, 0.1, 0.2), 7).is_err());
    }
}
