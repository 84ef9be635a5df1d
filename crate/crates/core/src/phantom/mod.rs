//! Synthetic cardiac-cycle segmentation phantoms.
//!
//! A subject is a stack of short-axis label maps over one cycle. The LV blood
//! pool follows a [`VolumeProfile`]; its radius is solved per frame so that
//! the summed slice area is exactly `v(t) · V_ed`, even when a hypokinetic arc
//! contracts less than the rest of the wall. Myocardium conserves area along
//! each ray, so it thickens where the cavity contracts. Every biomarker is
//! therefore known in closed form and returned alongside the rendered frames.
//!
//! "Volume" throughout means blood-pool area summed over slices with unit
//! slice weighting.

mod io;
mod profile;

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;

pub use io::{read_dataset, read_dataset_file, write_dataset, write_dataset_file, write_truth_csv};
pub use profile::{synthesize_volume_profile, PeakRates, VolumeProfile, RAPID_SHARE};

use crate::biomarkers::{self, BiomarkerSet, SEGMENT_COUNT, SEGMENT_SPAN_DEG};
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

pub const BACKGROUND: u8 = 0;
pub const BLOOD_POOL: u8 = 1;
pub const MYOCARDIUM: u8 = 2;
pub const RV: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub width: usize,
    pub height: usize,
    pub slices: usize,
}

impl Dims {
    pub const DESK: Dims = Dims { width: 32, height: 32, slices: 1 };
    pub const PAPER: Dims = Dims { width: 80, height: 80, slices: 3 };

    pub fn new(width: usize, height: usize, slices: usize) -> Result<Self> {
        if width == 0 || height == 0 || !(1..=3).contains(&slices) {
            return Err(Error::Parameter(format!("bad frame dims {width}x{height}x{slices}")));
        }
        Ok(Self { width, height, slices })
    }

    pub fn slice_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn pixels(&self) -> usize {
        self.slice_pixels() * self.slices
    }

    /// Geometry scale relative to the 32-pixel desk frame.
    pub fn scale(&self) -> f64 {
        self.width.min(self.height) as f64 / 32.0
    }
}

/// One time point: per-pixel class identifiers, slice-major then row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelFrame {
    dims: Dims,
    labels: Vec<u8>,
}

impl LabelFrame {
    pub fn new(dims: Dims) -> Self {
        Self { dims, labels: vec![BACKGROUND; dims.pixels()] }
    }

    pub fn from_labels(dims: Dims, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != dims.pixels() {
            return Err(Error::Parameter(format!(
                "expected {} labels, got {}",
                dims.pixels(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= crate::N_LABELS) {
            return Err(Error::Parameter(format!("invalid class identifier {bad}")));
        }
        Ok(Self { dims, labels })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn slice(&self, slice: usize) -> &[u8] {
        let n = self.dims.slice_pixels();
        &self.labels[slice * n..(slice + 1) * n]
    }

    #[inline]
    pub fn get(&self, slice: usize, y: usize, x: usize) -> u8 {
        self.labels[(slice * self.dims.height + y) * self.dims.width + x]
    }

    #[inline]
    pub fn set(&mut self, slice: usize, y: usize, x: usize, label: u8) {
        let w = self.dims.width;
        let h = self.dims.height;
        self.labels[(slice * h + y) * w + x] = label;
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// A subject's frames over one cycle plus its disease label, if known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegSequence {
    pub subject_id: u32,
    pub frames: Vec<LabelFrame>,
    pub label: Option<bool>,
}

impl SegSequence {
    pub fn new(subject_id: u32, frames: Vec<LabelFrame>, label: Option<bool>) -> Result<Self> {
        if frames.len() < 3 {
            return Err(Error::Parameter(format!("need at least 3 frames, got {}", frames.len())));
        }
        let dims = frames[0].dims();
        if frames.iter().any(|f| f.dims() != dims) {
            return Err(Error::Parameter("frames differ in dimensions".into()));
        }
        Ok(Self { subject_id, frames, label })
    }

    pub fn dims(&self) -> Dims {
        self.frames[0].dims()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Subjects sharing frame dimensions and cycle length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub dims: Dims,
    pub frames: usize,
    pub subjects: Vec<SegSequence>,
}

impl Dataset {
    pub fn new(dims: Dims, frames: usize, subjects: Vec<SegSequence>) -> Result<Self> {
        for s in &subjects {
            if s.dims() != dims || s.len() != frames {
                return Err(Error::Data(format!(
                    "subject {} does not match dataset shape {}x{}x{} T={}",
                    s.subject_id, dims.width, dims.height, dims.slices, frames
                )));
            }
        }
        Ok(Self { dims, frames, subjects })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// First `n` subjects and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head = Dataset { dims: self.dims, frames: self.frames, subjects: self.subjects[..n].to_vec() };
        let tail = Dataset { dims: self.dims, frames: self.frames, subjects: self.subjects[n..].to_vec() };
        (head, tail)
    }

    pub fn labels(&self) -> Vec<Option<bool>> {
        self.subjects.iter().map(|s| s.label).collect()
    }
}

/// Regional contraction deficit over `[start_deg, start_deg + width_deg)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypoArc {
    pub start_deg: f64,
    pub width_deg: f64,
    pub severity: f64,
}

impl HypoArc {
    pub const NONE: HypoArc = HypoArc { start_deg: 0.0, width_deg: 0.0, severity: 0.0 };

    pub fn contains(&self, theta_deg: f64) -> bool {
        (theta_deg - self.start_deg).rem_euclid(360.0) < self.width_deg
    }

    fn weight(&self, theta_deg: f64) -> f64 {
        if self.contains(theta_deg) {
            self.severity
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomParams {
    /// LV blood-pool radius at end-diastole, pixels.
    pub base_radius: f64,
    /// Myocardial wall thickness at end-diastole, pixels.
    pub myo_thickness: f64,
    pub ef_target: f64,
    pub es_fraction: f64,
    pub diastasis_fraction: f64,
    pub a_wave_fraction: f64,
    pub hypo_arc: HypoArc,
    /// Lateral displacement of the RV relative to its nominal placement, pixels.
    pub rv_offset: f64,
    pub slice_scales: [f64; 3],
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self::for_dims(Dims::DESK)
    }
}

impl PhantomParams {
    /// Nominal healthy subject with geometry scaled to `dims`.
    pub fn for_dims(dims: Dims) -> Self {
        let g = dims.scale();
        Self {
            base_radius: 7.5 * g,
            myo_thickness: 3.0 * g,
            ef_target: 0.6,
            es_fraction: 0.35,
            diastasis_fraction: 0.15,
            a_wave_fraction: 0.2,
            hypo_arc: HypoArc::NONE,
            rv_offset: 0.0,
            slice_scales: [1.0, 0.9, 0.8],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Parameter(what.to_string()));
        if !(self.ef_target > 0.0 && self.ef_target < 1.0) {
            return bad("ef_target must lie in (0, 1)");
        }
        if !(self.es_fraction > 0.0 && self.es_fraction < 1.0) {
            return bad("es_fraction must lie in (0, 1)");
        }
        if !(self.a_wave_fraction >= 0.0 && self.a_wave_fraction < 1.0) {
            return bad("a_wave_fraction must lie in [0, 1)");
        }
        if !(self.diastasis_fraction >= 0.0 && self.es_fraction + self.diastasis_fraction < 1.0) {
            return bad("diastasis_fraction must be >= 0 and leave room for filling");
        }
        let arc = &self.hypo_arc;
        if !(0.0..=1.0).contains(&arc.severity) || !(0.0..=360.0).contains(&arc.width_deg) {
            return bad("hypokinesia severity must lie in [0, 1] and width in [0, 360]");
        }
        if !(self.base_radius > 0.0 && self.myo_thickness >= 0.0) {
            return bad("radii must be positive");
        }
        if self.slice_scales.iter().any(|&s| !(s > 0.0)) {
            return bad("slice scales must be positive");
        }
        Ok(())
    }

    fn center(&self, dims: Dims) -> (f64, f64) {
        let mut rng = rng::stream(self.seed, Domain::Subject, u64::MAX);
        let jx: f64 = rng.random_range(-0.25..0.25);
        let jy: f64 = rng.random_range(-0.25..0.25);
        (0.56 * dims.width as f64 + jx, 0.5 * dims.height as f64 + jy)
    }

    fn geometry(&self, slice: usize) -> LvGeometry {
        let s = self.slice_scales[slice];
        LvGeometry { r_ed: self.base_radius * s, myo: self.myo_thickness * s, arc: self.hypo_arc }
    }

    fn rv_spec(&self, slice: usize, volume: f64) -> RvSpec {
        let geo = self.geometry(slice);
        let s = self.slice_scales[slice];
        RvSpec {
            dx: -(geo.r_ed + geo.myo) - 0.45 * geo.r_ed + self.rv_offset * s,
            dy: 0.0,
            radius: 0.9 * geo.r_ed * (1.0 - 0.1 * (1.0 - volume)),
            exclusion: geo.r_ed + geo.myo + 1.0,
        }
    }

    /// Renders one frame at normalized volume `volume` (1 = end-diastole).
    pub fn render_at_volume(&self, dims: Dims, volume: f64) -> Result<LabelFrame> {
        self.validate()?;
        if dims.slices > 3 {
            return Err(Error::Parameter("at most 3 slices are supported".into()));
        }
        let center = self.center(dims);
        let mut frame = LabelFrame::new(dims);
        for slice in 0..dims.slices {
            let geo = self.geometry(slice);
            let e = geo.excursion(volume)?;
            let rv = self.rv_spec(slice, volume);
            rasterize_slice(
                &mut frame,
                slice,
                center,
                |th| geo.blood_radius(th, e),
                |th| geo.thickness(geo.blood_radius(th, e)),
                Some(&rv),
            )?;
        }
        Ok(frame)
    }
}

/// Per-slice LV geometry. The cavity radius along angle θ is
/// `r_ed - e·(1 - severity·[θ in arc])`, with the excursion `e` solved so the
/// cavity area equals `v·π·r_ed²`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LvGeometry {
    r_ed: f64,
    myo: f64,
    arc: HypoArc,
}

impl LvGeometry {
    pub(crate) fn excursion(&self, volume: f64) -> Result<f64> {
        let sev = self.arc.severity;
        let w = self.arc.width_deg.to_radians();
        let tau = 2.0 * PI;
        let i1 = tau - sev * w;
        let i2 = tau - 2.0 * sev * w + sev * sev * w;
        let disc = i1 * i1 - 2.0 * PI * i2 * (1.0 - volume);
        if disc < 0.0 || i2 <= 0.0 {
            return Err(Error::Parameter(format!(
                "hypokinetic arc too large to reach volume fraction {volume}"
            )));
        }
        let e = self.r_ed * (i1 - disc.sqrt()) / i2;
        if e >= self.r_ed {
            return Err(Error::Parameter(format!("cavity collapses at volume fraction {volume}")));
        }
        Ok(e)
    }

    pub(crate) fn blood_radius(&self, theta_deg: f64, excursion: f64) -> f64 {
        self.r_ed - excursion * (1.0 - self.arc.weight(theta_deg))
    }

    /// Wall thickness over a cavity radius `r`, conserving myocardial area
    /// along the ray.
    pub(crate) fn thickness(&self, r: f64) -> f64 {
        let outer = self.r_ed + self.myo;
        (r * r + outer * outer - self.r_ed * self.r_ed).sqrt() - r
    }
}

/// RV crescent: the disc of `radius` around `(dx, dy)` relative to the LV
/// center, minus the disc of radius `exclusion` around the LV center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RvSpec {
    pub dx: f64,
    pub dy: f64,
    pub radius: f64,
    pub exclusion: f64,
}

/// Angle of the pixel center `(x, y)` around `center`, in degrees within
/// `[0, 360)`, counterclockwise from the image x-axis with y pointing up.
pub fn pixel_angle(center: (f64, f64), x: usize, y: usize) -> f64 {
    let dx = x as f64 + 0.5 - center.0;
    let dy = center.1 - (y as f64 + 0.5);
    dy.atan2(dx).to_degrees().rem_euclid(360.0)
}

/// Labels one slice. A pixel center at distance `d` and angle `θ` from
/// `center` is blood pool iff `d < r(θ)` and myocardium iff
/// `r(θ) <= d < r(θ) + thickness(θ)`. RV pixels never overwrite LV labels.
pub fn rasterize_slice(
    frame: &mut LabelFrame,
    slice: usize,
    center: (f64, f64),
    radius_by_angle: impl Fn(f64) -> f64,
    thickness_by_angle: impl Fn(f64) -> f64,
    rv: Option<&RvSpec>,
) -> Result<()> {
    let dims = frame.dims();
    for step in 0..720 {
        let th = step as f64 * 0.5;
        let r = radius_by_angle(th);
        let ext = r + thickness_by_angle(th);
        if !(r > 0.0) {
            return Err(Error::Parameter(format!("nonpositive radius at {th} degrees")));
        }
        let (px, py) = (center.0 + ext * th.to_radians().cos(), center.1 - ext * th.to_radians().sin());
        if px < 0.0 || py < 0.0 || px > dims.width as f64 || py > dims.height as f64 {
            return Err(Error::Parameter(format!("LV geometry leaves the frame at {th} degrees")));
        }
    }
    for y in 0..dims.height {
        for x in 0..dims.width {
            let dx = x as f64 + 0.5 - center.0;
            let dy = y as f64 + 0.5 - center.1;
            let d = dx.hypot(dy);
            let th = pixel_angle(center, x, y);
            let r = radius_by_angle(th);
            let label = if d < r {
                BLOOD_POOL
            } else if d < r + thickness_by_angle(th) {
                MYOCARDIUM
            } else if let Some(rv) = rv {
                let rd = (dx - rv.dx).hypot(dy - rv.dy);
                if rd < rv.radius && d >= rv.exclusion {
                    RV
                } else {
                    BACKGROUND
                }
            } else {
                BACKGROUND
            };
            frame.set(slice, y, x, label);
        }
    }
    Ok(())
}

/// Single-slice convenience over [`rasterize_slice`], replicated on every slice.
pub fn rasterize_frame(
    dims: Dims,
    center: (f64, f64),
    radius_by_angle: impl Fn(f64) -> f64,
    thickness_by_angle: impl Fn(f64) -> f64,
    rv: Option<&RvSpec>,
) -> Result<LabelFrame> {
    let mut frame = LabelFrame::new(dims);
    for s in 0..dims.slices {
        rasterize_slice(&mut frame, s, center, &radius_by_angle, &thickness_by_angle, rv)?;
    }
    Ok(frame)
}

/// Ground-truth wall-thickening variance of the analytic geometry, sampled
/// on the same 1° rays and six segments as the measurement.
fn analytic_lvt(params: &PhantomParams, profile: &VolumeProfile) -> Result<f64> {
    let geo = params.geometry(0);
    let e_es = geo.excursion(1.0 - profile.ef)?;
    let rays = SEGMENT_SPAN_DEG as usize;
    let thickening: Vec<f64> = (0..SEGMENT_COUNT)
        .map(|seg| {
            let mean_es = (0..rays)
                .map(|j| {
                    let th = seg as f64 * SEGMENT_SPAN_DEG + j as f64 + 0.5;
                    geo.thickness(geo.blood_radius(th, e_es))
                })
                .sum::<f64>()
                / rays as f64;
            (mean_es - geo.myo) / geo.myo
        })
        .collect();
    Ok(biomarkers::population_variance(&thickening))
}

/// Renders a subject and returns its frames with analytic ground truth.
/// Rates are in volume units per cycle.
pub fn generate_subject(
    subject_id: u32,
    params: &PhantomParams,
    frames: usize,
    dims: Dims,
    label: Option<bool>,
) -> Result<(SegSequence, BiomarkerSet)> {
    let profile = VolumeProfile::for_frames(params, frames)?;
    let rendered = profile
        .sample(frames)
        .into_iter()
        .map(|v| params.render_at_volume(dims, v))
        .collect::<Result<Vec<_>>>()?;
    let seq = SegSequence::new(subject_id, rendered, label)?;

    let v_ed: f64 = (0..dims.slices).map(|s| PI * (params.base_radius * params.slice_scales[s]).powi(2)).sum();
    let rates = profile.peak_rates();
    let lvt = if params.myo_thickness > 0.0 { analytic_lvt(params, &profile)? } else { 0.0 };
    let truth = BiomarkerSet {
        ef: profile.ef,
        per: rates.per * v_ed,
        pfr: rates.pfr * v_ed,
        pafr: rates.pafr * v_ed,
        lvt,
        qc_pass: true,
        rv_offset: biomarkers::rv_offset(&seq.frames[0]).unwrap_or(f64::NAN),
    };
    Ok((seq, truth))
}

/// Parameter shifts applied to diseased subjects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiseaseEffect {
    /// Subtracted from the healthy ejection fraction.
    pub ef_shift: f64,
    /// Hypokinesia severity range.
    pub severity: (f64, f64),
    /// Hypokinetic arc width range, degrees.
    pub arc_width_deg: (f64, f64),
    /// Multiplies the diastasis plateau; a shorter plateau stretches rapid
    /// filling and lowers the peak filling rate.
    pub diastasis_scale: f64,
    /// Added to the atrial share of filling.
    pub a_wave_shift: f64,
}

impl Default for DiseaseEffect {
    fn default() -> Self {
        Self {
            ef_shift: 0.2,
            severity: (0.4, 0.8),
            arc_width_deg: (60.0, 120.0),
            diastasis_scale: 0.3,
            a_wave_shift: 0.05,
        }
    }
}

/// Healthy sampling ranges.
pub const HEALTHY_EF: (f64, f64) = (0.55, 0.70);
pub const HEALTHY_ES: (f64, f64) = (0.30, 0.40);
pub const HEALTHY_DIASTASIS: (f64, f64) = (0.10, 0.20);
pub const HEALTHY_A_WAVE: (f64, f64) = (0.15, 0.30);
/// Relative jitter of radius and wall thickness.
pub const GEOMETRY_JITTER: f64 = 0.1;
/// RV offset range at desk scale, pixels.
pub const RV_OFFSET_RANGE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortSpec {
    pub n: usize,
    pub prevalence: f64,
    pub effect: DiseaseEffect,
    pub dims: Dims,
    pub frames: usize,
    pub seed: u64,
    /// Subject identifiers are `first_id..first_id + n`; each subject's
    /// stream is keyed by its identifier, so disjoint id ranges under one
    /// seed give independent subjects.
    pub first_id: u32,
}

impl CohortSpec {
    pub fn new(n: usize, prevalence: f64, seed: u64) -> Self {
        Self {
            n,
            prevalence,
            effect: DiseaseEffect::default(),
            dims: Dims::DESK,
            frames: 20,
            seed,
            first_id: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub dataset: Dataset,
    pub truth: Vec<BiomarkerSet>,
    pub params: Vec<PhantomParams>,
}

/// Draws a subject's parameters from the healthy ranges, then applies the
/// disease shifts when `diseased`.
pub fn sample_params(rng: &mut impl Rng, dims: Dims, diseased: bool, effect: &DiseaseEffect) -> PhantomParams {
    let nominal = PhantomParams::for_dims(dims);
    let mut u = |(lo, hi): (f64, f64)| rng.random_range(lo..hi);
    let j = GEOMETRY_JITTER;
    let mut p = PhantomParams {
        base_radius: nominal.base_radius * u((1.0 - j, 1.0 + j)),
        myo_thickness: nominal.myo_thickness * u((1.0 - j, 1.0 + j)),
        ef_target: u(HEALTHY_EF),
        es_fraction: u(HEALTHY_ES),
        diastasis_fraction: u(HEALTHY_DIASTASIS),
        a_wave_fraction: u(HEALTHY_A_WAVE),
        hypo_arc: HypoArc::NONE,
        rv_offset: RV_OFFSET_RANGE * dims.scale() * u((-1.0, 1.0)),
        slice_scales: [1.0, 0.9, 0.8],
        seed: 0,
    };
    for s in p.slice_scales.iter_mut() {
        *s *= u((0.97, 1.03));
    }
    p.slice_scales[0] = p.slice_scales[0].min(1.0);
    let arc_start = u((0.0, 360.0));
    let arc_width = u(effect.arc_width_deg);
    let severity = u(effect.severity);
    p.seed = rng.random();
    if diseased {
        p.ef_target -= effect.ef_shift;
        p.diastasis_fraction *= effect.diastasis_scale;
        p.a_wave_fraction += effect.a_wave_shift;
        p.hypo_arc = HypoArc { start_deg: arc_start, width_deg: arc_width, severity };
    }
    p
}

/// Generates `n` subjects; exactly `ceil(prevalence·n)` are diseased. The
/// result is a pure function of the cohort spec, independent of thread count.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    if spec.n == 0 {
        return Err(Error::Parameter("cohort size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.prevalence) {
        return Err(Error::Parameter(format!("prevalence {} outside [0, 1]", spec.prevalence)));
    }
    let positives = ((spec.prevalence * spec.n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..spec.n).collect();
    let mut label_rng = rng::stream(spec.seed, Domain::Labels, spec.first_id as u64);
    for i in (1..order.len()).rev() {
        let j = label_rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut diseased = vec![false; spec.n];
    for &i in &order[..positives] {
        diseased[i] = true;
    }

    let generated: Vec<(SegSequence, BiomarkerSet, PhantomParams)> = (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let id = spec.first_id + i as u32;
            let mut rng = rng::stream(spec.seed, Domain::Subject, id as u64);
            let params = sample_params(&mut rng, spec.dims, diseased[i], &spec.effect);
            let (seq, truth) = generate_subject(id, &params, spec.frames, spec.dims, Some(diseased[i]))?;
            Ok((seq, truth, params))
        })
        .collect::<Result<_>>()?;

    let mut subjects = Vec::with_capacity(spec.n);
    let mut truth = Vec::with_capacity(spec.n);
    let mut params = Vec::with_capacity(spec.n);
    for (s, t, p) in generated {
        subjects.push(s);
        truth.push(t);
        params.push(p);
    }
    Ok(Cohort { dataset: Dataset::new(spec.dims, spec.frames, subjects)?, truth, params })
}
