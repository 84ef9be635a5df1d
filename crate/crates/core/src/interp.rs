//! Latent-space explanations.
//!
//! Concept directions are fitted on frame-averaged latent means so that they
//! live where the decoder can consume them. Walking a subject's means along
//! such a direction and decoding shows what the concept looks like as a
//! segmentation. PCA of the averaged means, with the projected logit
//! gradient of each subject, gives a global picture of the latent space.

use crate::cav::{self, Layer, LogisticConfig};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::phantom::{LabelFrame, SegSequence};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

/// Unit direction in latent space. `v` has either `d` components, added to
/// every frame's mean, or `T·d` components (frame-major), one block per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDirection {
    pub v: Vec<f64>,
    pub concept: String,
    pub method: &'static str,
}

pub const LATENT_CAV_METHOD: &str = "logistic CAV on concatenated per-frame latent means";

/// Fits the concept classifier on the concatenated per-frame latent means of
/// the two sets and returns its unit normal (`T·d` components), pointing
/// toward the positives. Temporal concepts such as filling rates need the
/// per-frame form: one vector added to every frame cannot change the shape
/// of the volume curve.
pub fn latent_concept_direction(
    model: &ModelParams,
    concept: &str,
    pos: &[SegSequence],
    neg: &[SegSequence],
    cfg: &LogisticConfig,
) -> Result<LatentDirection> {
    let read = |s: &[SegSequence]| -> Result<Vec<Vec<f64>>> {
        Ok(cav::record_activations(model, s, Layer::Latent)?.into_iter().map(|r| r.z).collect())
    };
    let cv = cav::train_cav(concept, Layer::Latent, &read(pos)?, &read(neg)?, cfg)?;
    Ok(LatentDirection { v: cv.v, concept: concept.to_string(), method: LATENT_CAV_METHOD })
}

pub const GRADIENT_METHOD: &str = "mean frame-averaged logit gradient";

/// The latent direction the classifier itself associates with disease: the
/// normalized mean, over a reference set, of the frame-averaged gradient of
/// the logit wrt the latent means.
pub fn classifier_direction(model: &ModelParams, reference: &[SegSequence]) -> Result<LatentDirection> {
    if reference.is_empty() {
        return Err(Error::Data("empty reference set".into()));
    }
    let grads = reference
        .par_iter()
        .map(|s| cav::logit_gradient(model, &model.encode_sequence(s)?.mus, Layer::LatentMean))
        .collect::<Result<Vec<_>>>()?;
    let mut v = vec![0.0; model.latent];
    for g in &grads {
        for (a, b) in v.iter_mut().zip(g) {
            *a += b;
        }
    }
    if normalize(&mut v) == 0.0 {
        return Err(Error::Degenerate("the logit does not depend on the latent means".into()));
    }
    Ok(LatentDirection { v, concept: "disease".to_string(), method: GRADIENT_METHOD })
}

/// Adds `alpha * v` to the means: the same `v` to every frame when it has
/// one frame's width, otherwise frame `t` gets the `t`-th block of `v`.
pub fn shift_means(mus: &[Vec<f64>], v: &[f64], alpha: f64) -> Vec<Vec<f64>> {
    let d = mus.first().map_or(0, |m| m.len());
    mus.iter()
        .enumerate()
        .map(|(t, m)| {
            let block = if v.len() == d { v } else { &v[t * d..(t + 1) * d] };
            m.iter().zip(block).map(|(a, b)| a + alpha * b).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationStep {
    pub alpha: f64,
    pub frames: Vec<LabelFrame>,
    pub logit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationResult {
    pub subject_id: u32,
    pub steps: Vec<InterpolationStep>,
}

/// Decodes and classifies the subject's means shifted by each `alpha`.
/// Every step starts from the unshifted means.
pub fn interpolate_decode(
    model: &ModelParams,
    seq: &SegSequence,
    direction: &LatentDirection,
    alphas: &[f64],
) -> Result<InterpolationResult> {
    if alphas.is_empty() {
        return Err(Error::Parameter("need at least one alpha".into()));
    }
    if direction.v.len() != model.latent && direction.v.len() != model.latent * model.frames {
        return Err(Error::Config(format!(
            "direction has {} components, latent space has {} per frame over {} frames",
            direction.v.len(),
            model.latent,
            model.frames
        )));
    }
    let mus = model.encode_sequence(seq)?.mus;
    let steps = alphas
        .iter()
        .map(|&alpha| {
            let shifted = shift_means(&mus, &direction.v, alpha);
            Ok(InterpolationStep { alpha, frames: model.decode_frames(&shifted)?, logit: model.classify(&shifted)?.logit })
        })
        .collect::<Result<_>>()?;
    Ok(InterpolationResult { subject_id: seq.subject_id, steps })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit axes, by descending eigenvalue.
    pub axes: Vec<Vec<f64>>,
    /// Eigenvalues of the sample covariance (divisor `n - 1`).
    pub explained: Vec<f64>,
    pub projections: Vec<Vec<f64>>,
}

pub const PCA_TOL: f64 = 1e-10;
pub const PCA_MAX_ITER: usize = 10_000;

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Flips `v` so its largest-magnitude component (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut k = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[k].abs() {
            k = i;
        }
    }
    if v[k] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn mat_vec(c: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    c.iter().map(|row| cav::dot(row, v)).collect()
}

/// Leading eigenpairs of a symmetric positive semidefinite matrix by power
/// iteration with deflation.
pub fn power_eigen(matrix: &[Vec<f64>], components: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = matrix.len();
    let mut c: Vec<Vec<f64>> = matrix.to_vec();
    let mut values = Vec::with_capacity(components);
    let mut vectors = Vec::with_capacity(components);
    for _ in 0..components {
        // Start from the largest column; fall back to e_0 for a null matrix.
        let start = (0..d)
            .max_by(|&a, &b| cav::dot(&c[a], &c[a]).total_cmp(&cav::dot(&c[b], &c[b])))
            .unwrap_or(0);
        let mut v = c[start].clone();
        if normalize(&mut v) == 0.0 {
            v = (0..d).map(|i| if i == vectors.len() % d { 1.0 } else { 0.0 }).collect();
        }
        fix_sign(&mut v);
        for _ in 0..PCA_MAX_ITER {
            let mut next = mat_vec(&c, &v);
            if normalize(&mut next) == 0.0 {
                break;
            }
            fix_sign(&mut next);
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            v = next;
            if delta < PCA_TOL {
                break;
            }
        }
        let lambda = cav::dot(&v, &mat_vec(&c, &v));
        for i in 0..d {
            for j in 0..d {
                c[i][j] -= lambda * v[i] * v[j];
            }
        }
        values.push(lambda);
        vectors.push(v);
    }
    (values, vectors)
}

pub fn covariance(points: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = points.len() as f64;
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / n;
        }
    }
    let mut c = vec![vec![0.0; d]; d];
    for p in points {
        let centered: Vec<f64> = p.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in 0..d {
                c[i][j] += centered[i] * centered[j] / (n - 1.0);
            }
        }
    }
    (mean, c)
}

pub fn pca_project(points: &[Vec<f64>], components: usize) -> Result<Pca> {
    if components == 0 || points.len() < components + 1 {
        return Err(Error::Parameter(format!(
            "{} components need at least {} points, got {}",
            components,
            components + 1,
            points.len()
        )));
    }
    let d = points[0].len();
    if components > d || points.iter().any(|p| p.len() != d) {
        return Err(Error::Parameter("points must share a dimension no smaller than the component count".into()));
    }
    let (mean, c) = covariance(points);
    let (explained, axes) = power_eigen(&c, components);
    let projections = points
        .iter()
        .map(|p| {
            let centered: Vec<f64> = p.iter().zip(&mean).map(|(x, m)| x - m).collect();
            axes.iter().map(|a| cav::dot(&centered, a)).collect()
        })
        .collect();
    Ok(Pca { mean, axes, explained, projections })
}

/// Per subject, the frame-averaged gradient of the logit wrt the latent
/// means, projected onto each PCA axis.
pub fn gradient_arrows(model: &ModelParams, subjects: &[SegSequence], axes: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    subjects
        .par_iter()
        .map(|s| {
            let mus = model.encode_sequence(s)?.mus;
            let g = cav::logit_gradient(model, &mus, Layer::LatentMean)?;
            Ok(axes.iter().map(|a| cav::dot(&g, a)).collect())
        })
        .collect()
}

/// Binary PGM of a frame with slices stacked vertically and labels scaled by
/// 85.
pub fn write_pgm<W: Write>(mut w: W, frame: &LabelFrame) -> Result<()> {
    let d = frame.dims();
    write!(w, "P5\n{} {}\n255\n", d.width, d.height * d.slices)?;
    let bytes: Vec<u8> = frame.labels().iter().map(|&l| l.saturating_mul(85)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Writes one PGM per step and frame into `dir` plus `manifest.csv`.
/// Returns the written file names, manifest last.
pub fn write_interpolation(dir: &Path, result: &InterpolationResult) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("alpha,frame,logit,file\n");
    let mut files = Vec::new();
    for (k, step) in result.steps.iter().enumerate() {
        for (t, frame) in step.frames.iter().enumerate() {
            let name = format!("s{}_a{k}_t{t:03}.pgm", result.subject_id);
            write_pgm(std::io::BufWriter::new(std::fs::File::create(dir.join(&name))?), frame)?;
            writeln!(manifest, "{},{},{},{}", step.alpha, t, step.logit, name).unwrap();
            files.push(name);
        }
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    files.push("manifest.csv".to_string());
    Ok(files)
}

/// One scatter point of the PCA figure.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaPoint {
    pub subject_id: u32,
    pub pc: [f64; 2],
    pub grad: [f64; 2],
    pub label: Option<bool>,
}

pub fn write_pca_csv<W: Write>(mut w: W, points: &[PcaPoint]) -> Result<()> {
    writeln!(w, "subject_id,pc1,pc2,grad1,grad2,label")?;
    for p in points {
        let label = match p.label {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        writeln!(w, "{},{},{},{},{},{}", p.subject_id, p.pc[0], p.pc[1], p.grad[0], p.grad[1], label)?;
    }
    Ok(())
}

/// Scatter of the projections coloured by label, each point with its
/// gradient arrow; `direction` (already projected onto the two axes) is
/// drawn from the centroid when given.
pub fn pca_svg(points: &[PcaPoint], direction: Option<[f64; 2]>) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 30.0;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p.pc[a]);
            hi[a] = hi[a].max(p.pc[a]);
        }
    }
    let span = |a: usize| if hi[a] > lo[a] { hi[a] - lo[a] } else { 1.0 };
    let sx = |x: f64| PAD + (x - lo[0]) / span(0) * (SIZE - 2.0 * PAD);
    let sy = |y: f64| SIZE - PAD - (y - lo[1]) / span(1) * (SIZE - 2.0 * PAD);
    let gmax = points.iter().map(|p| p.grad[0].hypot(p.grad[1])).fold(0.0, f64::max);
    let arrow_scale = if gmax > 0.0 { 0.06 * SIZE / gmax } else { 0.0 };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for p in points {
        let (x, y) = (sx(p.pc[0]), sy(p.pc[1]));
        let colour = match p.label {
            Some(true) => "#c0392b",
            Some(false) => "#2471a3",
            None => "#7f8c8d",
        };
        let (ex, ey) = (x + arrow_scale * p.grad[0], y - arrow_scale * p.grad[1]);
        writeln!(s, "<line x1=\"{x:.2}\" y1=\"{y:.2}\" x2=\"{ex:.2}\" y2=\"{ey:.2}\" stroke=\"{colour}\" stroke-opacity=\"0.5\"/>").unwrap();
        writeln!(s, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2.5\" fill=\"{colour}\"/>").unwrap();
    }
    if let Some(dir) = direction {
        let n = points.len().max(1) as f64;
        let cx = points.iter().map(|p| p.pc[0]).sum::<f64>() / n;
        let cy = points.iter().map(|p| p.pc[1]).sum::<f64>() / n;
        let (x, y) = (sx(cx), sy(cy));
        let len = 0.25 * SIZE / dir[0].hypot(dir[1]).max(1e-12);
        writeln!(
            s,
            "<line x1=\"{x:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\" stroke-width=\"2\"/>",
            x + len * dir[0],
            y - len * dir[1]
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{Dims, BLOOD_POOL, RV};

    #[test]
    fn line_data_has_one_axis() {
        let u = [0.6, 0.0, -0.8];
        let pts: Vec<Vec<f64>> = (0..7).map(|i| u.iter().map(|c| c * (i as f64 - 2.0)).collect()).collect();
        let pca = pca_project(&pts, 2).unwrap();
        let a = &pca.axes[0];
        assert!((cav::dot(a, &u).abs() - 1.0).abs() < 1e-12);
        assert_eq!(a[2], 0.8f64.max(a[2]));
        assert!(pca.explained[1].abs() < 1e-9);
        assert!(pca_project(&pts[..2], 2).is_err());
    }

    #[test]
    fn rank_two_projection_keeps_distances() {
        let pts: Vec<Vec<f64>> = vec![
            vec![1.0, 2.0, 3.0, 0.5],
            vec![-1.0, 0.0, 2.0, 1.5],
            vec![0.5, 1.0, 3.5, 0.0],
            vec![2.0, 3.0, 3.0, 0.25],
            vec![0.0, -1.0, 1.0, 2.0],
        ];
        // Rank 2: build from two generators.
        let g1 = [1.0, 0.5, -0.25, 0.0];
        let g2 = [0.0, 1.0, 1.0, -1.0];
        let pts: Vec<Vec<f64>> = pts.iter().map(|p| (0..4).map(|i| p[0] * g1[i] + p[1] * g2[i] + 3.0).collect()).collect();
        let pca = pca_project(&pts, 2).unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d: f64 = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let e = (pca.projections[i][0] - pca.projections[j][0]).hypot(pca.projections[i][1] - pca.projections[j][1]);
                assert!((d - e).abs() < 1e-8, "{d} vs {e}");
            }
        }
        let a = &pca.axes;
        assert!((cav::dot(&a[0], &a[1])).abs() < 1e-9);
        assert!(pca.explained[0] >= pca.explained[1]);
    }

    #[test]
    fn pgm_layout() {
        let dims = Dims::new(2, 1, 2).unwrap();
        let mut f = LabelFrame::new(dims);
        f.set(0, 0, 1, BLOOD_POOL);
        f.set(1, 0, 0, RV);
        let mut buf = Vec::new();
        write_pgm(&mut buf, &f).unwrap();
        assert_eq!(buf, b"P5\n2 2\n255\n\x00\x55\xff\x00".to_vec());
    }

    #[test]
    fn shift_and_undo() {
        let mus = vec![vec![0.1, -0.7, 3.3], vec![1e-3, 2.0, -4.5]];
        let v = [0.6, 0.0, 0.8];
        assert_eq!(shift_means(&mus, &v, 0.0), mus);
        let back = shift_means(&shift_means(&mus, &v, 1.7), &v, -1.7);
        for (a, b) in back.iter().flatten().zip(mus.iter().flatten()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
        let per_frame = [1.0, 0.0, 0.0, 0.0, 0.0, 2.0];
        assert_eq!(shift_means(&mus, &per_frame, 1.0), vec![vec![1.1, -0.7, 3.3], vec![1e-3, 2.0, -2.5]]);
    }
}
