//! Concept activation vectors.
//!
//! A concept is defined by the extremes of one biomarker over a pool of
//! subjects. Both extremes are passed through the trained classifier, a
//! logistic regression separates their recorded activations, and the unit
//! normal of that regression is the concept vector. Sensitivity of a subject
//! is the gradient of the disease logit wrt those activations dotted with
//! the concept vector.

use crate::biomarkers::BiomarkerSet;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::phantom::SegSequence;
use rayon::prelude::*;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiomarkerField {
    Ef,
    Per,
    Pfr,
    Pafr,
    Lvt,
    RvOffset,
}

impl BiomarkerField {
    pub fn get(self, b: &BiomarkerSet) -> f64 {
        match self {
            BiomarkerField::Ef => b.ef,
            BiomarkerField::Per => b.per,
            BiomarkerField::Pfr => b.pfr,
            BiomarkerField::Pafr => b.pafr,
            BiomarkerField::Lvt => b.lvt,
            BiomarkerField::RvOffset => b.rv_offset,
        }
    }
}

/// Which extreme of the biomarker counts as concept-positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSpec {
    pub name: String,
    pub field: BiomarkerField,
    pub polarity: Polarity,
    pub k: usize,
}

pub const DEFAULT_K: usize = 100;

/// Names of the clinical concepts, in report order.
pub const CLINICAL_CONCEPTS: [&str; 5] = ["low_ef", "low_per", "low_pfr", "low_pafr", "high_lvt"];

/// The concept with no causal link to the phantom label.
pub const PLACEBO_CONCEPT: &str = "rv_offset";

impl ConceptSpec {
    pub fn named(name: &str, k: usize) -> Result<Self> {
        use BiomarkerField::*;
        let (field, polarity) = match name {
            "low_ef" => (Ef, Polarity::Low),
            "low_per" => (Per, Polarity::Low),
            "low_pfr" => (Pfr, Polarity::Low),
            "low_pafr" => (Pafr, Polarity::Low),
            "high_lvt" => (Lvt, Polarity::High),
            "rv_offset" => (RvOffset, Polarity::High),
            other => return Err(Error::Parameter(format!("unknown concept {other:?}"))),
        };
        if k < 2 {
            return Err(Error::Parameter(format!("concept sets need k >= 2, got {k}")));
        }
        Ok(ConceptSpec { name: name.to_string(), field, polarity, k })
    }
}

/// Picks the `k` most concept-positive and `k` most concept-negative subjects
/// of the pool. Ties are broken by ascending subject id.
pub fn select_concept_sets(pool: &[(u32, BiomarkerSet)], spec: &ConceptSpec) -> Result<(Vec<u32>, Vec<u32>)> {
    if spec.k < 2 {
        return Err(Error::Parameter(format!("concept sets need k >= 2, got {}", spec.k)));
    }
    if pool.len() < 2 * spec.k {
        return Err(Error::Data(format!(
            "pool of {} cannot supply two disjoint sets of {}",
            pool.len(),
            spec.k
        )));
    }
    let mut ranked: Vec<(f64, u32)> = pool.iter().map(|(id, b)| (spec.field.get(b), *id)).collect();
    if ranked.iter().any(|(v, _)| v.is_nan()) {
        return Err(Error::Data(format!("{} is undefined for some pool subject", spec.name)));
    }
    // Order from most to least concept-positive, ids ascending within ties.
    ranked.sort_by(|a, b| {
        let by_value = match spec.polarity {
            Polarity::Low => a.0.total_cmp(&b.0),
            Polarity::High => b.0.total_cmp(&a.0),
        };
        by_value.then(a.1.cmp(&b.1))
    });
    let pos = ranked[..spec.k].iter().map(|r| r.1).collect();
    let neg = ranked[ranked.len() - spec.k..].iter().map(|r| r.1).collect();
    Ok((pos, neg))
}

/// Where activations are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    /// The designated hidden layer of the classifier.
    Cav,
    /// All per-frame latent means, concatenated (`T·d`).
    Latent,
    /// The frame-averaged latent mean (`d`).
    LatentMean,
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layer::Cav => "cav",
            Layer::Latent => "latent",
            Layer::LatentMean => "latent_mean",
        })
    }
}

impl FromStr for Layer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cav" => Ok(Layer::Cav),
            "latent" => Ok(Layer::Latent),
            "latent_mean" => Ok(Layer::LatentMean),
            other => Err(Error::Parameter(format!("unknown layer {other:?}"))),
        }
    }
}

impl Layer {
    pub fn width(self, model: &ModelParams) -> usize {
        match self {
            Layer::Cav => model.cav_width(),
            Layer::Latent => model.frames * model.latent,
            Layer::LatentMean => model.latent,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub subject_id: u32,
    pub layer: Layer,
    pub z: Vec<f64>,
}

fn activation(model: &ModelParams, seq: &SegSequence, layer: Layer) -> Result<Vec<f64>> {
    let lat = model.encode_sequence(seq)?;
    Ok(match layer {
        Layer::Cav => model.classify(&lat.mus)?.cav_activations,
        Layer::Latent => lat.concatenated(),
        Layer::LatentMean => lat.mean(),
    })
}

/// Inference-mode activations, one record per subject in input order.
pub fn record_activations(model: &ModelParams, subjects: &[SegSequence], layer: Layer) -> Result<Vec<ActivationRecord>> {
    subjects
        .par_iter()
        .map(|s| Ok(ActivationRecord { subject_id: s.subject_id, layer, z: activation(model, s, layer)? }))
        .collect()
}

/// Logistic-regression fitting controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticConfig {
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig { lambda: 1e-3, tol: 1e-6, max_iter: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptVector {
    pub concept: String,
    pub layer: Layer,
    pub v: Vec<f64>,
    /// Accuracy of the fitted regression on the held-out fifth of each set.
    pub accuracy: f64,
}

/// Fits `p(pos | x) = sigmoid(w·x + b)` by full-batch gradient descent on
/// the mean log loss plus `lambda/2 |w|^2`, with step `1/L` from the
/// Lipschitz bound `L = max|x~|^2 / 4 + lambda` (`x~` is `x` with a 1
/// appended). Returns `(w, b)`.
///
/// Rows are centered on their mean before descent. The bias is not
/// penalized, so this leaves the optimum unchanged, but it removes the
/// near-flat valley between `b` and the component of `w` along the mean
/// that otherwise stalls descent on data far from the origin.
pub fn fit_logistic(x: &[Vec<f64>], y: &[bool], cfg: &LogisticConfig) -> (Vec<f64>, f64) {
    let dim = x[0].len();
    let n = x.len() as f64;
    let mut mean = vec![0.0; dim];
    for row in x {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let centered: Vec<Vec<f64>> = x.iter().map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
    let x = &centered;
    let max_sq = x.iter().map(|r| 1.0 + r.iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max);
    let step = 1.0 / (0.25 * max_sq + cfg.lambda);
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..cfg.max_iter {
        let mut gw: Vec<f64> = w.iter().map(|wi| cfg.lambda * wi).collect();
        let mut gb = 0.0;
        for (row, &label) in x.iter().zip(y) {
            let s = b + row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let r = (crate::model::sigmoid(s) - if label { 1.0 } else { 0.0 }) / n;
            gb += r;
            for (g, a) in gw.iter_mut().zip(row) {
                *g += r * a;
            }
        }
        let norm = (gb * gb + gw.iter().map(|g| g * g).sum::<f64>()).sqrt();
        if norm < cfg.tol {
            break;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= step * g;
        }
        b -= step * gb;
    }
    let shift = w.iter().zip(&mean).map(|(a, m)| a * m).sum::<f64>();
    (w, b - shift)
}

/// Fits the concept classifier on four fifths of each set (every fifth item,
/// index `% 5 == 4`, is held out) and returns its unit normal, oriented
/// toward the positives. With fewer than five items per set nothing is
/// held out and the accuracy is measured on the training data.
pub fn train_cav(
    concept: &str,
    layer: Layer,
    pos: &[Vec<f64>],
    neg: &[Vec<f64>],
    cfg: &LogisticConfig,
) -> Result<ConceptVector> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Data("concept sets must be nonempty".into()));
    }
    let dim = pos[0].len();
    if pos.iter().chain(neg).any(|r| r.len() != dim) || dim == 0 {
        return Err(Error::Parameter("activation vectors differ in dimension".into()));
    }
    let mut sp: Vec<&Vec<f64>> = pos.iter().collect();
    let mut sn: Vec<&Vec<f64>> = neg.iter().collect();
    let cmp = |a: &&Vec<f64>, b: &&Vec<f64>| a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal);
    sp.sort_by(cmp);
    sn.sort_by(cmp);
    if sp == sn {
        return Err(Error::Degenerate("positive and negative activation sets are identical".into()));
    }
    let held = |i: usize, len: usize| len >= 5 && i % 5 == 4;
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut test = Vec::new();
    for (set, label) in [(pos, true), (neg, false)] {
        for (i, r) in set.iter().enumerate() {
            if held(i, set.len()) {
                test.push((r, label));
            } else {
                x.push(r.clone());
                y.push(label);
            }
        }
    }
    let (w, b) = fit_logistic(&x, &y, cfg);
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate("concept classifier has no direction".into()));
    }
    let v: Vec<f64> = w.iter().map(|wi| wi / norm).collect();
    let eval: Vec<(&Vec<f64>, bool)> = if test.is_empty() { x.iter().zip(y.iter().copied()).collect() } else { test };
    let correct = eval
        .iter()
        .filter(|(r, label)| (b + r.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() > 0.0) == *label)
        .count();
    Ok(ConceptVector { concept: concept.to_string(), layer, v, accuracy: correct as f64 / eval.len() as f64 })
}

/// Selects the concept sets from `table` (measured pool biomarkers), records
/// the matching pool subjects' activations and fits the concept vector.
pub fn concept_vector_from_pool(
    model: &ModelParams,
    pool: &[SegSequence],
    table: &[(u32, BiomarkerSet)],
    spec: &ConceptSpec,
    layer: Layer,
    cfg: &LogisticConfig,
) -> Result<ConceptVector> {
    let (pos, neg) = select_concept_sets(table, spec)?;
    let pick = |ids: &[u32]| -> Result<Vec<SegSequence>> {
        ids.iter()
            .map(|id| {
                pool.iter()
                    .find(|s| s.subject_id == *id)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("subject {id} is not in the pool")))
            })
            .collect()
    };
    let read = |s: Vec<SegSequence>| -> Result<Vec<Vec<f64>>> {
        Ok(record_activations(model, &s, layer)?.into_iter().map(|r| r.z).collect())
    };
    train_cav(&spec.name, layer, &read(pick(&pos)?)?, &read(pick(&neg)?)?, cfg)
}

/// Gradient of the logit wrt the activations at `layer`. For the averaged
/// latent layer this is the frame average of the per-frame gradients.
pub fn logit_gradient(model: &ModelParams, mus: &[Vec<f64>], layer: Layer) -> Result<Vec<f64>> {
    Ok(match layer {
        Layer::Cav => model.logit_grad_cav(mus)?,
        Layer::Latent => model.logit_grad_latent(mus)?.concat(),
        Layer::LatentMean => {
            let per_frame = model.logit_grad_latent(mus)?;
            let t = per_frame.len() as f64;
            let mut g = vec![0.0; model.latent];
            for row in &per_frame {
                for (a, b) in g.iter_mut().zip(row) {
                    *a += b / t;
                }
            }
            g
        }
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `grad_z logit · v_c` for one subject, in inference mode.
pub fn sensitivity(model: &ModelParams, seq: &SegSequence, cv: &ConceptVector) -> Result<f64> {
    let width = cv.layer.width(model);
    if cv.v.len() != width {
        return Err(Error::Config(format!(
            "concept vector has {} components but layer {} has {}",
            cv.v.len(),
            cv.layer,
            width
        )));
    }
    let mus = model.encode_sequence(seq)?.mus;
    Ok(dot(&logit_gradient(model, &mus, cv.layer)?, &cv.v))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub dots: Vec<(u32, f64)>,
    /// Share of strictly positive dot products.
    pub fraction_positive: f64,
    pub mean: f64,
}

impl SensitivityReport {
    pub fn from_dots(dots: Vec<(u32, f64)>) -> Result<Self> {
        if dots.is_empty() {
            return Err(Error::Data("no subjects to score".into()));
        }
        let n = dots.len() as f64;
        let fraction_positive = dots.iter().filter(|(_, d)| *d > 0.0).count() as f64 / n;
        let mean = dots.iter().map(|(_, d)| d).sum::<f64>() / n;
        Ok(SensitivityReport { dots, fraction_positive, mean })
    }

    /// Standard error of the mean dot product.
    pub fn standard_error(&self) -> f64 {
        let n = self.dots.len() as f64;
        if n < 2.0 {
            return f64::NAN;
        }
        let var = self.dots.iter().map(|(_, d)| (d - self.mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    }
}

pub fn aggregate_sensitivity(model: &ModelParams, subjects: &[SegSequence], cv: &ConceptVector) -> Result<SensitivityReport> {
    let dots = subjects
        .par_iter()
        .map(|s| Ok((s.subject_id, sensitivity(model, s, cv)?)))
        .collect::<Result<Vec<_>>>()?;
    SensitivityReport::from_dots(dots)
}

pub fn write_cav<W: Write>(mut w: W, cv: &ConceptVector) -> Result<()> {
    writeln!(w, "concept,layer,dim,accuracy")?;
    writeln!(w, "{},{},{},{}", cv.concept, cv.layer, cv.v.len(), cv.accuracy)?;
    for c in &cv.v {
        writeln!(w, "{c}")?;
    }
    Ok(())
}

pub fn read_cav<R: BufRead>(r: R) -> Result<ConceptVector> {
    let bad = |m: &str| Error::Format(format!("CAV file: {m}"));
    let mut lines = r.lines();
    let mut next = || -> Result<Option<String>> { lines.next().transpose().map_err(Error::from) };
    if next()?.as_deref() != Some("concept,layer,dim,accuracy") {
        return Err(bad("missing header"));
    }
    let meta = next()?.ok_or_else(|| bad("missing metadata line"))?;
    let fields: Vec<&str> = meta.split(',').collect();
    if fields.len() != 4 {
        return Err(bad("metadata line needs four fields"));
    }
    let layer: Layer = fields[1].parse().map_err(|_| bad("unknown layer"))?;
    let dim: usize = fields[2].parse().map_err(|_| bad("dim is not an integer"))?;
    let accuracy: f64 = fields[3].parse().map_err(|_| bad("accuracy is not a number"))?;
    let mut v = Vec::with_capacity(dim);
    while let Some(line) = next()? {
        if line.is_empty() {
            continue;
        }
        v.push(line.parse::<f64>().map_err(|_| bad("component is not a number"))?);
    }
    if v.len() != dim {
        return Err(bad(&format!("expected {dim} components, found {}", v.len())));
    }
    Ok(ConceptVector { concept: fields[0].to_string(), layer, v, accuracy })
}

pub fn write_sensitivity<W: Write>(mut w: W, report: &SensitivityReport) -> Result<()> {
    writeln!(w, "subject_id,dot")?;
    for (id, d) in &report.dots {
        writeln!(w, "{id},{d}")?;
    }
    writeln!(w, "fraction_positive,mean")?;
    writeln!(w, "{},{}", report.fraction_positive, report.mean)?;
    Ok(())
}

pub fn read_sensitivity<R: BufRead>(r: R) -> Result<SensitivityReport> {
    let bad = |m: &str| Error::Format(format!("sensitivity file: {m}"));
    let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
    if lines.first().map(String::as_str) != Some("subject_id,dot") {
        return Err(bad("missing header"));
    }
    let split = lines.iter().position(|l| l == "fraction_positive,mean").ok_or_else(|| bad("missing summary"))?;
    let mut dots = Vec::new();
    for l in &lines[1..split] {
        let (id, d) = l.split_once(',').ok_or_else(|| bad("row needs two fields"))?;
        dots.push((id.parse().map_err(|_| bad("bad subject id"))?, d.parse().map_err(|_| bad("bad dot product"))?));
    }
    SensitivityReport::from_dots(dots)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ef: f64) -> BiomarkerSet {
        BiomarkerSet { ef, per: 1.0, pfr: 1.0, pafr: 1.0, lvt: 0.0, qc_pass: true, rv_offset: 0.0 }
    }

    #[test]
    fn selects_extremes_with_id_ties() {
        let pool: Vec<(u32, BiomarkerSet)> = vec![(10, set(0.6)), (11, set(0.3)), (12, set(0.7)), (13, set(0.4))];
        let spec = ConceptSpec::named("low_ef", 2).unwrap();
        assert_eq!(select_concept_sets(&pool, &spec).unwrap(), (vec![11, 13], vec![10, 12]));
        let tied: Vec<(u32, BiomarkerSet)> = vec![(5, set(0.5)), (2, set(0.5)), (9, set(0.5)), (1, set(0.5))];
        assert_eq!(select_concept_sets(&tied, &spec).unwrap(), (vec![1, 2], vec![5, 9]));
        let big = ConceptSpec { k: 3, ..spec };
        assert!(matches!(select_concept_sets(&pool, &big), Err(Error::Data(_))));
        assert!(ConceptSpec::named("low_ef", 1).is_err());
        assert!(ConceptSpec::named("tall", 5).is_err());
    }

    #[test]
    fn axis_separated_clouds_give_the_axis() {
        let pos: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0 + 0.01 * i as f64, 0.0, 0.0]).collect();
        let neg: Vec<Vec<f64>> = (0..10).map(|i| vec![-1.0 - 0.01 * i as f64, 0.0, 0.0]).collect();
        let cv = train_cav("c", Layer::Cav, &pos, &neg, &LogisticConfig::default()).unwrap();
        assert_eq!(cv.v, vec![1.0, 0.0, 0.0]);
        assert_eq!(cv.accuracy, 1.0);
        let swapped = train_cav("c", Layer::Cav, &neg, &pos, &LogisticConfig::default()).unwrap();
        assert_eq!(swapped.v, vec![-1.0, 0.0, 0.0]);
        assert!(matches!(
            train_cav("c", Layer::Cav, &pos, &pos, &LogisticConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn report_counts_strictly_positive() {
        let r = SensitivityReport::from_dots(vec![(1, 2.5), (2, -2.5)]).unwrap();
        assert_eq!((r.fraction_positive, r.mean), (0.5, 0.0));
        let one = SensitivityReport::from_dots(vec![(3, 0.1)]).unwrap();
        assert_eq!(one.fraction_positive, 1.0);
        let zero = SensitivityReport::from_dots(vec![(3, 0.0)]).unwrap();
        assert_eq!(zero.fraction_positive, 0.0);
        assert!(SensitivityReport::from_dots(vec![]).is_err());
    }

    #[test]
    fn csv_round_trips() {
        let cv = ConceptVector { concept: "low_pfr".into(), layer: Layer::Latent, v: vec![0.6, -0.8], accuracy: 0.925 };
        let mut buf = Vec::new();
        write_cav(&mut buf, &cv).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "concept,layer,dim,accuracy\nlow_pfr,latent,2,0.925\n0.6\n-0.8\n");
        assert_eq!(read_cav(&buf[..]).unwrap(), cv);
        let r = SensitivityReport::from_dots(vec![(4, 0.125), (7, -1.0), (9, 3.0)]).unwrap();
        let mut buf = Vec::new();
        write_sensitivity(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.ends_with("fraction_positive,mean\n0.6666666666666666,0.7083333333333334\n"));
        assert_eq!(read_sensitivity(&buf[..]).unwrap(), r);
        assert!(read_cav(&b"concept,layer,dim,accuracy\nx,cav,3,1\n0.5\n"[..]).is_err());
    }
}
