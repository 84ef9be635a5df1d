//! Clinical biomarkers from LV segmentation sequences.
//!
//! The blood-pool area curve is smoothed with a cyclic Savitzky-Golay filter,
//! cycle landmarks are located on the smoothed curve, and EF, peak ejection,
//! filling and atrial filling rates are read from it. Wall-thickening
//! variance comes from ray casting through the myocardium at ED and ES.
//!
//! Rates are magnitudes in volume units per cycle (per-frame gradient × T)
//! and are not normalized by the end-diastolic volume.

use std::io::Write;

use crate::error::{Error, Result};
use crate::phantom::{LabelFrame, SegSequence, BLOOD_POOL, MYOCARDIUM, RV};

pub const SEGMENT_COUNT: usize = 6;
pub const SEGMENT_SPAN_DEG: f64 = 60.0;
/// QC rejects a sequence whose first and last volumes differ by more than
/// this fraction of the ED volume.
pub const QC_CLOSURE_LIMIT: f64 = 0.10;
/// A candidate atrial inflection must be followed by a gradient rise of at
/// least this fraction of the early filling peak.
pub const AC_PROMINENCE: f64 = 0.05;

/// LV blood-pool volume per frame, covering one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeCurve {
    values: Vec<f64>,
}

impl VolumeCurve {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Parameter("empty volume curve".into()));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Parameter("volumes must be finite and nonnegative".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Frame interval as a fraction of the cycle.
    pub fn dt(&self) -> f64 {
        1.0 / self.values.len() as f64
    }

    fn at(&self, k: isize) -> f64 {
        self.values[k.rem_euclid(self.values.len() as isize) as usize]
    }

    /// Central-difference gradient per frame, cyclic.
    pub fn gradient(&self) -> Vec<f64> {
        (0..self.len() as isize).map(|k| 0.5 * (self.at(k + 1) - self.at(k - 1))).collect()
    }

    pub fn second_difference(&self) -> Vec<f64> {
        (0..self.len() as isize).map(|k| self.at(k + 1) - 2.0 * self.at(k) + self.at(k - 1)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CycleLandmarks {
    pub ed_frame: usize,
    pub es_frame: usize,
    pub ac_frame: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiomarkerSet {
    pub ef: f64,
    pub per: f64,
    pub pfr: f64,
    pub pafr: f64,
    pub lvt: f64,
    pub qc_pass: bool,
    /// Lateral RV-to-LV centroid distance, pixels. Carries no disease
    /// information in phantom cohorts; used as a placebo concept.
    pub rv_offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub per: f64,
    pub pfr: f64,
    pub pafr: f64,
}

pub fn lv_volume_curve(seq: &SegSequence) -> Result<VolumeCurve> {
    if seq.frames.is_empty() {
        return Err(Error::Parameter("empty sequence".into()));
    }
    let values = seq
        .frames
        .iter()
        .enumerate()
        .map(|(t, f)| match f.count(BLOOD_POOL) {
            0 => Err(Error::Degenerate(format!("subject {}: frame {t} has no blood pool", seq.subject_id))),
            n => Ok(n as f64),
        })
        .collect::<Result<Vec<_>>>()?;
    VolumeCurve::new(values)
}

/// Generalized factorial `a (a-1) … (a-b+1)`.
fn falling(a: f64, b: usize) -> f64 {
    (0..b).map(|j| a - j as f64).product()
}

/// Gram polynomial of degree `k` on the points `-m..=m`.
fn gram(i: f64, m: f64, k: usize) -> f64 {
    let (mut prev, mut cur) = (0.0, 1.0);
    for j in 1..=k {
        let jf = j as f64;
        let next = 2.0 * (2.0 * jf - 1.0) / (jf * (2.0 * m - jf + 1.0)) * i * cur
            - ((jf - 1.0) * (2.0 * m + jf)) / (jf * (2.0 * m - jf + 1.0)) * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Central-point least-squares smoothing weights for a window of `window`
/// samples and a polynomial of degree `order`, via Gram polynomials.
pub fn savgol_coefficients(window: usize, order: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 {
        return Err(Error::Parameter(format!("window must be odd, got {window}")));
    }
    if order >= window {
        return Err(Error::Parameter(format!("order {order} must be below window {window}")));
    }
    let m = (window / 2) as f64;
    Ok((0..window)
        .map(|idx| {
            let i = idx as f64 - m;
            (0..=order)
                .map(|k| {
                    let kf = k as f64;
                    (2.0 * kf + 1.0) * falling(2.0 * m, k) / falling(2.0 * m + kf + 1.0, k + 1)
                        * gram(i, m, k)
                        * gram(0.0, m, k)
                })
                .sum()
        })
        .collect())
}

/// `min(11, largest odd ≤ T/2)` with cubic order, reduced where the window
/// is too short for it.
pub fn default_savgol(frames: usize) -> (usize, usize) {
    let half = (frames / 2).max(1);
    let window = 11.min(if half % 2 == 1 { half } else { half - 1 }).max(1);
    (window, 3.min(window - 1))
}

/// Cyclic Savitzky-Golay smoothing.
pub fn savgol_smooth(curve: &VolumeCurve, window: usize, order: usize) -> Result<VolumeCurve> {
    let coeffs = savgol_coefficients(window, order)?;
    if curve.len() < window {
        return Err(Error::Parameter(format!("curve of {} frames shorter than window {window}", curve.len())));
    }
    let m = (window / 2) as isize;
    let values = (0..curve.len() as isize)
        .map(|t| coeffs.iter().enumerate().map(|(j, c)| c * curve.at(t + j as isize - m)).sum::<f64>())
        .collect();
    Ok(VolumeCurve { values })
}

fn argmax_first(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

fn argmin_first(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x < v[best] { i } else { best })
}

/// Frames strictly between `from` and `to`, walking forward cyclically.
fn cyclic_open(from: usize, to: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut k = (from + 1) % n;
    while k != to {
        out.push(k);
        k = (k + 1) % n;
    }
    out
}

/// ED and ES are the first maximum and minimum. The atrial inflection is the
/// first second-difference sign change (negative to positive) on the filling
/// limb after the early peak filling rate that is followed by a real second
/// filling wave; a zero run between the two signs resolves to its midpoint.
pub fn detect_landmarks(smoothed: &VolumeCurve) -> Result<CycleLandmarks> {
    let v = smoothed.values();
    let n = v.len();
    let ed = argmax_first(v);
    let es = argmin_first(v);
    let range = v[ed] - v[es];
    if !(range > 0.0) || n < 3 {
        return Err(Error::Landmark("volume curve is constant".into()));
    }
    let g = smoothed.gradient();
    let d2 = smoothed.second_difference();
    let limb = cyclic_open(es, ed, n);
    let ac_frame = find_atrial_inflection(&limb, &g, &d2, 1e-12 * range);
    Ok(CycleLandmarks { ed_frame: ed, es_frame: es, ac_frame })
}

fn find_atrial_inflection(limb: &[usize], g: &[f64], d2: &[f64], tol: f64) -> Option<usize> {
    let gl: Vec<f64> = limb.iter().map(|&k| g[k]).collect();
    let gmax = gl.iter().cloned().fold(f64::MIN, f64::max);
    if limb.len() < 3 || !(gmax > 0.0) {
        return None;
    }
    // Early filling peak: the first local maximum in the upper half of the
    // filling rates.
    let peak = (0..gl.len())
        .find(|&i| gl[i] >= 0.5 * gmax && (i + 1 == gl.len() || gl[i + 1] < gl[i]))
        .unwrap_or_else(|| argmax_first(&gl));
    let mut last_neg = None;
    for j in peak + 1..limb.len() {
        let c = d2[limb[j]];
        if c < -tol {
            last_neg = Some(j);
        } else if c > tol {
            if let Some(neg) = last_neg.take() {
                let at = (neg + j) / 2;
                let rise = gl[at + 1..].iter().cloned().fold(f64::MIN, f64::max) - gl[at];
                if at + 1 < gl.len() && rise >= AC_PROMINENCE * gl[peak] {
                    return Some(limb[at]);
                }
            }
        }
    }
    None
}

/// Peak ejection, filling and atrial filling rates in volume units per cycle.
pub fn compute_rates(smoothed: &VolumeCurve, lm: &CycleLandmarks) -> Rates {
    let n = smoothed.len();
    let per_cycle = n as f64;
    let g = smoothed.gradient();
    let max_over = |frames: &[usize], sign: f64| {
        frames.iter().map(|&k| sign * g[k]).fold(0.0, f64::max) * per_cycle
    };
    let mut ejection = vec![lm.ed_frame];
    ejection.extend(cyclic_open(lm.ed_frame, lm.es_frame, n));
    ejection.push(lm.es_frame);
    let per = max_over(&ejection, -1.0);
    let (pfr, pafr) = match lm.ac_frame {
        Some(ac) => {
            let mut early = cyclic_open(lm.es_frame, ac, n);
            early.push(ac);
            (max_over(&early, 1.0), max_over(&cyclic_open(ac, lm.ed_frame, n), 1.0))
        }
        None => (max_over(&cyclic_open(lm.es_frame, lm.ed_frame, n), 1.0), 0.0),
    };
    Rates { per, pfr, pafr }
}

pub fn ejection_fraction(smoothed: &VolumeCurve, lm: &CycleLandmarks) -> Result<f64> {
    let v = smoothed.values();
    let ved = v[lm.ed_frame];
    if !(ved > 0.0) {
        return Err(Error::Degenerate("end-diastolic volume is zero".into()));
    }
    Ok((ved - v[lm.es_frame]) / ved)
}

/// Passes unless the first and last volumes differ by more than 10% of the
/// ED (maximum) volume.
pub fn qc_volume_closure(curve: &VolumeCurve) -> bool {
    let v = curve.values();
    let ved = v.iter().cloned().fold(f64::MIN, f64::max);
    if ved <= 0.0 {
        return false;
    }
    (v[0] - v[v.len() - 1]).abs() / ved <= QC_CLOSURE_LIMIT
}

pub fn population_variance(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64
}

fn centroid(frame: &LabelFrame, slice: usize, label: u8) -> Option<(f64, f64)> {
    let d = frame.dims();
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for y in 0..d.height {
        for x in 0..d.width {
            if frame.get(slice, y, x) == label {
                sx += x as f64 + 0.5;
                sy += y as f64 + 0.5;
                n += 1;
            }
        }
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

/// Horizontal distance from the blood-pool centroid to the RV centroid on
/// the first slice, in pixels.
pub fn rv_offset(frame: &LabelFrame) -> Option<f64> {
    let lv = centroid(frame, 0, BLOOD_POOL)?;
    let rv = centroid(frame, 0, RV)?;
    Some(lv.0 - rv.0)
}

/// Width of the Gaussian applied to label masks before locating boundaries.
/// Sub-pixel boundaries of a blurred mask follow the underlying contour far
/// more closely than the pixel staircase does.
pub const BOUNDARY_SIGMA: f64 = 1.0;
const RAY_STEP: f64 = 0.05;

/// A blurred binary mask of one slice, sampled bilinearly between pixel
/// centers.
struct SoftMask {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl SoftMask {
    fn new(frame: &LabelFrame, slice: usize, member: impl Fn(u8) -> bool) -> Self {
        let d = frame.dims();
        let (w, h) = (d.width, d.height);
        let radius = (3.0 * BOUNDARY_SIGMA).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-0.5 * (i as f64 / BOUNDARY_SIGMA).powi(2)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
        let raw: Vec<f64> = frame.slice(slice).iter().map(|&l| if member(l) { 1.0 } else { 0.0 }).collect();
        let blur = |src: &[f64], horizontal: bool| -> Vec<f64> {
            let mut out = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, c) in kernel.iter().enumerate() {
                        let off = k as isize - radius;
                        let (sx, sy) = if horizontal { (x as isize + off, y as isize) } else { (x as isize, y as isize + off) };
                        if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                            acc += c * src[sy as usize * w + sx as usize];
                        }
                    }
                    out[y * w + x] = acc;
                }
            }
            out
        };
        let values = blur(&blur(&raw, true), false);
        Self { width: w, height: h, values }
    }

    fn at(&self, px: f64, py: f64) -> f64 {
        let fx = px - 0.5;
        let fy = py - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let (tx, ty) = (fx - x0, fy - y0);
        let get = |x: f64, y: f64| -> f64 {
            if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
                0.0
            } else {
                self.values[y as usize * self.width + x as usize]
            }
        };
        get(x0, y0) * (1.0 - tx) * (1.0 - ty)
            + get(x0 + 1.0, y0) * tx * (1.0 - ty)
            + get(x0, y0 + 1.0) * (1.0 - tx) * ty
            + get(x0 + 1.0, y0 + 1.0) * tx * ty
    }

    /// Outermost radius along the ray at which the mask is still at or
    /// above the 0.5 level, with linear refinement between samples.
    fn outer_extent(&self, origin: (f64, f64), theta_deg: f64) -> Option<f64> {
        let (c, s) = (theta_deg.to_radians().cos(), theta_deg.to_radians().sin());
        let reach = (self.width as f64).hypot(self.height as f64);
        let steps = (reach / RAY_STEP) as usize;
        let mut prev = self.at(origin.0, origin.1);
        let mut extent = None;
        for i in 1..=steps {
            let rho = i as f64 * RAY_STEP;
            let cur = self.at(origin.0 + rho * c, origin.1 - rho * s);
            if prev >= 0.5 && cur < 0.5 {
                extent = Some(rho - RAY_STEP + (prev - 0.5) / (prev - cur) * RAY_STEP);
            }
            prev = cur;
        }
        extent
    }
}

/// Masks of one slice: the cavity and the whole LV (cavity plus wall).
struct LvMasks {
    cavity: SoftMask,
    lv: SoftMask,
    has_wall: bool,
}

impl LvMasks {
    fn new(frame: &LabelFrame, slice: usize) -> Self {
        Self {
            cavity: SoftMask::new(frame, slice, |l| l == BLOOD_POOL),
            lv: SoftMask::new(frame, slice, |l| l == BLOOD_POOL || l == MYOCARDIUM),
            has_wall: frame.slice(slice).contains(&MYOCARDIUM),
        }
    }

    /// Radial extent of the wall along one ray: LV boundary minus cavity
    /// boundary.
    fn ray_thickness(&self, origin: (f64, f64), theta_deg: f64) -> Option<f64> {
        if !self.has_wall {
            return None;
        }
        let outer = self.lv.outer_extent(origin, theta_deg)?;
        let inner = self.cavity.outer_extent(origin, theta_deg).unwrap_or(0.0);
        (outer > inner).then(|| outer - inner)
    }
}

/// Mean ray thickness per angular segment; `None` where no ray meets the wall.
fn segment_thickness(frame: &LabelFrame, slice: usize, origin: (f64, f64), anchor_deg: f64) -> Vec<Option<f64>> {
    let masks = LvMasks::new(frame, slice);
    (0..SEGMENT_COUNT)
        .map(|seg| {
            let hits: Vec<f64> = (0..SEGMENT_SPAN_DEG as usize)
                .filter_map(|j| {
                    let th = anchor_deg + seg as f64 * SEGMENT_SPAN_DEG + j as f64 + 0.5;
                    masks.ray_thickness(origin, th)
                })
                .collect();
            (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64)
        })
        .collect()
}

/// Population variance of fractional wall thickening from ED to ES over six
/// 60° segments per slice. Segments start at `anchor_deg` (0 = image
/// x-axis) and run counterclockwise about the ED blood-pool centroid.
pub fn wall_thickening_variance(seq: &SegSequence, lm: &CycleLandmarks, anchor_deg: f64) -> Result<f64> {
    let ed = &seq.frames[lm.ed_frame];
    let es = &seq.frames[lm.es_frame];
    let mut thickening = Vec::new();
    for slice in 0..seq.dims().slices {
        let Some(origin) = centroid(ed, slice, BLOOD_POOL) else { continue };
        let at_ed = segment_thickness(ed, slice, origin, anchor_deg);
        let at_es = segment_thickness(es, slice, origin, anchor_deg);
        for (a, b) in at_ed.into_iter().zip(at_es) {
            if let (Some(a), Some(b)) = (a, b) {
                thickening.push((b - a) / a);
            }
        }
    }
    if thickening.is_empty() {
        return Err(Error::Degenerate(format!("subject {}: no myocardium in any segment", seq.subject_id)));
    }
    Ok(population_variance(&thickening))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiomarkerConfig {
    /// Savitzky-Golay window; `None` picks [`default_savgol`].
    pub window: Option<usize>,
    pub order: Option<usize>,
    pub anchor_deg: f64,
}

impl Default for BiomarkerConfig {
    fn default() -> Self {
        Self { window: None, order: None, anchor_deg: 0.0 }
    }
}

impl BiomarkerConfig {
    pub fn savgol(&self, frames: usize) -> (usize, usize) {
        let (w, o) = default_savgol(frames);
        let w = self.window.unwrap_or(w);
        (w, self.order.unwrap_or(o.min(w.saturating_sub(1))))
    }
}

/// Full measurement of one subject.
pub fn measure(seq: &SegSequence, config: &BiomarkerConfig) -> Result<BiomarkerSet> {
    let curve = lv_volume_curve(seq)?;
    let (window, order) = config.savgol(curve.len());
    let smoothed = savgol_smooth(&curve, window, order)?;
    let lm = detect_landmarks(&smoothed)?;
    let rates = compute_rates(&smoothed, &lm);
    Ok(BiomarkerSet {
        ef: ejection_fraction(&smoothed, &lm)?,
        per: rates.per,
        pfr: rates.pfr,
        pafr: rates.pafr,
        lvt: wall_thickening_variance(seq, &lm, config.anchor_deg)?,
        qc_pass: qc_volume_closure(&curve),
        rv_offset: rv_offset(&seq.frames[0]).unwrap_or(f64::NAN),
    })
}

/// `subject_id,ef,per,pfr,pafr,lvt,qc_pass`
/// Measures every subject in parallel; results keep input order.
pub fn measure_all(subjects: &[SegSequence], config: &BiomarkerConfig) -> Vec<Result<BiomarkerSet>> {
    use rayon::prelude::*;
    subjects.par_iter().map(|s| measure(s, config)).collect()
}

/// Subjects whose biomarkers could be measured and pass QC.
pub fn qc_passing(subjects: &[SegSequence], config: &BiomarkerConfig) -> Vec<(u32, BiomarkerSet)> {
    subjects
        .iter()
        .zip(measure_all(subjects, config))
        .filter_map(|(s, b)| b.ok().filter(|b| b.qc_pass).map(|b| (s.subject_id, b)))
        .collect()
}

pub fn write_biomarker_csv<W: Write>(mut w: W, rows: &[(u32, BiomarkerSet)]) -> Result<()> {
    writeln!(w, "subject_id,ef,per,pfr,pafr,lvt,qc_pass")?;
    for (id, b) in rows {
        writeln!(w, "{id},{},{},{},{},{},{}", b.ef, b.per, b.pfr, b.pafr, b.lvt, u8::from(b.qc_pass))?;
    }
    w.flush()?;
    Ok(())
}
