//! Two-stage SGD training and shift augmentation.

use super::{evaluate, Example, LossTerms, LossWeights, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::phantom::{Dataset, LabelFrame, BACKGROUND};
use crate::rng::{self, Domain};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use std::io::Write;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta: f64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    /// Epochs of stage 1 (VAE only, classifier frozen) and stage 2 (all
    /// weights, classification term on).
    pub epochs: (usize, usize),
    pub batch_size: usize,
    pub max_shift: usize,
    /// Minibatch gradients whose global norm (over the layers being
    /// updated) exceeds this are rescaled to it.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { beta: 0.2, lr_stage1: 3e-4, lr_stage2: 3e-4, epochs: (40, 40), batch_size: 8, max_shift: 2, clip_norm: Some(1000.0), seed: 0 }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !(self.lr_stage1 > 0.0) || !(self.lr_stage2 > 0.0) || self.batch_size == 0
            || self.clip_norm.is_some_and(|c| !(c > 0.0))
        {
            return Err(Error::Parameter(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

/// Training-set means of the loss terms over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: u8,
    pub terms: LossTerms,
}

pub fn write_training_log<W: Write>(mut w: W, log: &[EpochLog]) -> Result<()> {
    writeln!(w, "epoch,stage,recon,kl,class,total")?;
    for e in log {
        let t = e.terms;
        writeln!(w, "{},{},{},{},{},{}", e.epoch, e.stage, t.recon, t.kl, t.class, t.total)?;
    }
    Ok(())
}

/// Moves every pixel by `(dx, dy)`; pixels shifted in from outside are
/// background.
pub fn shift_frame(frame: &LabelFrame, dx: isize, dy: isize) -> LabelFrame {
    let dims = frame.dims();
    let mut out = LabelFrame::new(dims);
    for s in 0..dims.slices {
        for y in 0..dims.height {
            let sy = y as isize - dy;
            if sy < 0 || sy >= dims.height as isize {
                continue;
            }
            for x in 0..dims.width {
                let sx = x as isize - dx;
                if sx >= 0 && sx < dims.width as isize {
                    let l = frame.get(s, sy as usize, sx as usize);
                    if l != BACKGROUND {
                        out.set(s, y, x, l);
                    }
                }
            }
        }
    }
    out
}

/// Applies one random integer shift, uniform in `[-max_shift, max_shift]`
/// per axis, to every frame of a subject.
pub fn augment_shift(frames: &[LabelFrame], rng: &mut impl Rng, max_shift: usize) -> Vec<LabelFrame> {
    if max_shift == 0 {
        return frames.to_vec();
    }
    let m = max_shift as i64;
    let dx = rng.random_range(-m..=m) as isize;
    let dy = rng.random_range(-m..=m) as isize;
    frames.iter().map(|f| shift_frame(f, dx, dy)).collect()
}

fn stage_stream(seed: u64, domain: Domain, stage: u8, epoch: usize) -> rand_chacha::ChaCha8Rng {
    rng::stream(seed, domain, ((stage as u64) << 32) | epoch as u64)
}

fn sgd(params: &mut ModelParams, grads: &ModelParams, lr: f64, layers: std::ops::Range<usize>, clip: Option<f64>) {
    let mut lr = lr;
    if let Some(c) = clip {
        let norm = grads.layers[layers.clone()]
            .iter()
            .flat_map(|l| l.w.iter().chain(&l.b))
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > c {
            lr *= c / norm;
        }
    }
    for k in layers {
        let (p, g) = (&mut params.layers[k], &grads.layers[k]);
        for (w, d) in p.w.iter_mut().zip(&g.w) {
            *w -= lr * d;
        }
        for (b, d) in p.b.iter_mut().zip(&g.b) {
            *b -= lr * d;
        }
    }
}

/// Trains from the seeded initialization: stage 1 with `gamma = 0` and the
/// classifier frozen, then stage 2 with `gamma = 1` updating everything.
/// Subjects are visited in a freshly shuffled order each epoch. Returns the
/// model and one log row per epoch.
pub fn train_two_stage(
    dataset: &Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    train_with_progress(dataset, model, config, |_| {})
}

/// As [`train_two_stage`], calling `progress` after every epoch.
pub fn train_with_progress(
    dataset: &Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<(ModelParams, Vec<EpochLog>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    if dataset.dims != model.dims || dataset.frames != model.frames {
        return Err(Error::Config(format!(
            "dataset is {:?} x {} frames, model is {:?} x {}",
            dataset.dims, dataset.frames, model.dims, model.frames
        )));
    }
    if config.epochs.1 > 0 && dataset.subjects.iter().any(|s| s.label.is_none()) {
        return Err(Error::Data("stage 2 needs every subject labelled".into()));
    }
    let mut params = ModelParams::init(model, config.seed)?;
    let mut grads = params.zeros_like();
    let mut log = Vec::new();
    let n_layers = params.layers.len();
    let stages = [
        (1u8, config.epochs.0, 0.0, config.lr_stage1, 0..params.classifier_start()),
        (2u8, config.epochs.1, 1.0, config.lr_stage2, 0..n_layers),
    ];
    let d = params.latent;
    for (stage, epochs, gamma, lr, trainable) in stages {
        let weights = LossWeights { beta: config.beta, gamma };
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut stage_stream(config.seed, Domain::Shuffle, stage, epoch));
            let mut augment = stage_stream(config.seed, Domain::Augment, stage, epoch);
            let mut noise_rng = stage_stream(config.seed, Domain::Noise, stage, epoch);
            let mut sum = LossTerms::default();
            for chunk in order.chunks(config.batch_size) {
                let frames: Vec<Vec<LabelFrame>> = chunk
                    .iter()
                    .map(|&i| augment_shift(&dataset.subjects[i].frames, &mut augment, config.max_shift))
                    .collect();
                let noise: Vec<Vec<Vec<f64>>> = chunk
                    .iter()
                    .map(|_| {
                        (0..dataset.frames)
                            .map(|_| (0..d).map(|_| noise_rng.sample(StandardNormal)).collect())
                            .collect()
                    })
                    .collect();
                let batch: Vec<Example> = chunk
                    .iter()
                    .zip(&frames)
                    .zip(&noise)
                    .map(|((&i, f), n)| Example {
                        frames: f,
                        // Stage 1 never sees labels.
                        label: if stage == 1 { None } else { dataset.subjects[i].label },
                        noise: Some(n),
                    })
                    .collect();
                for l in &mut grads.layers {
                    l.w.iter_mut().for_each(|x| *x = 0.0);
                    l.b.iter_mut().for_each(|x| *x = 0.0);
                }
                let t = evaluate(&params, &batch, weights, Some(&mut grads))?;
                sgd(&mut params, &grads, lr, trainable.clone(), config.clip_norm);
                let share = chunk.len() as f64 / dataset.len() as f64;
                sum.recon += share * t.recon;
                sum.kl += share * t.kl;
                sum.class += share * t.class;
                sum.total += share * t.total;
            }
            let entry = EpochLog { epoch, stage, terms: sum };
            progress(&entry);
            log.push(entry);
        }
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{Dims, BLOOD_POOL};

    fn blob(dims: Dims) -> LabelFrame {
        let mut f = LabelFrame::new(dims);
        for y in 3..6 {
            for x in 2..5 {
                f.set(0, y, x, BLOOD_POOL);
            }
        }
        f
    }

    #[test]
    fn shifts_invert_and_preserve_mass() {
        let dims = Dims::new(10, 10, 1).unwrap();
        let f = blob(dims);
        let moved = shift_frame(&f, 2, 0);
        assert_eq!(moved.count(BLOOD_POOL), 9);
        assert_eq!(moved.get(0, 3, 4), BLOOD_POOL);
        assert_eq!(moved.get(0, 3, 2), BACKGROUND);
        assert_eq!(shift_frame(&moved, -2, 0), f);
        let mut rng = rng::stream(0, Domain::Augment, 0);
        assert_eq!(augment_shift(&[f.clone()], &mut rng, 0), vec![f.clone()]);
        let off = shift_frame(&f, 0, 9);
        assert_eq!(off.count(BLOOD_POOL), 0);
    }

    #[test]
    fn augmentation_uses_one_shift_per_subject() {
        let dims = Dims::new(12, 12, 2).unwrap();
        let mut f = blob(dims);
        f.set(1, 4, 3, BLOOD_POOL);
        let frames = vec![f.clone(), f.clone(), f];
        let mut rng = rng::stream(3, Domain::Augment, 1);
        for _ in 0..20 {
            let out = augment_shift(&frames, &mut rng, 2);
            assert!(out.windows(2).all(|w| w[0] == w[1]));
            assert_eq!(out[0].count(BLOOD_POOL), 10);
        }
    }
}
