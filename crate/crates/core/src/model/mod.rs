//! Joint VAE/classifier over segmentation frames.
//!
//! Each frame is one-hot encoded and passed through a dense encoder to a
//! latent mean and log-variance. The decoder maps a latent vector back to
//! per-pixel label probabilities. The classifier applies a shared head to
//! every frame's latent mean, concatenates the results in frame order and
//! runs a second dense stack down to one logit. One layer of that stack is
//! the designated CAV layer whose activations are recorded for concept
//! analysis.
//!
//! Backpropagation is written out by hand. Weights are stored input-major
//! (`w[i * outputs + o]`) so that both the forward pass and the weight
//! gradient are contiguous row updates; the `CMDL` file stores the usual
//! row-major `outputs × inputs` layout.

mod batch;
mod io;
mod metrics;
mod train;

pub use io::{read_model, read_model_file, write_model, write_model_file};
pub use metrics::{auc, dice, dice_frame};
pub use train::{
    augment_shift, shift_frame, train_two_stage, train_with_progress, write_training_log, EpochLog,
    TrainConfig,
};

use crate::error::{Error, Result};
use crate::phantom::{Dims, LabelFrame, SegSequence};
use crate::rng::{self, Domain};
use crate::N_LABELS;
use batch::Rows;
use rand::Rng;
use rand_distr::StandardNormal;

pub const LEAKY_SLOPE: f64 = 0.01;

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_grad(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// One fully connected layer, stored input-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense { inputs, outputs, w: vec![0.0; inputs * outputs], b: vec![0.0; outputs] }
    }

    /// He-scaled normal weights, zero biases.
    fn random(inputs: usize, outputs: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let scale = (2.0 / fan_in as f64).sqrt();
        let w = (0..inputs * outputs)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Dense { inputs, outputs, w, b: vec![0.0; outputs] }
    }

    /// Weight connecting input `i` to output `o`.
    pub fn weight(&self, o: usize, i: usize) -> f64 {
        self.w[i * self.outputs + o]
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let row = &self.w[i * self.outputs..(i + 1) * self.outputs];
                for (yo, wo) in y.iter_mut().zip(row) {
                    *yo += xi * wo;
                }
            }
        }
        y
    }

    /// Gradient wrt the input.
    fn backward_input(&self, dy: &[f64]) -> Vec<f64> {
        (0..self.inputs)
            .map(|i| {
                let row = &self.w[i * self.outputs..(i + 1) * self.outputs];
                row.iter().zip(dy).map(|(w, d)| w * d).sum()
            })
            .collect()
    }

    fn accumulate(&mut self, x: &[f64], dy: &[f64]) {
        for (bo, d) in self.b.iter_mut().zip(dy) {
            *bo += d;
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let row = &mut self.w[i * self.outputs..(i + 1) * self.outputs];
                for (g, d) in row.iter_mut().zip(dy) {
                    *g += xi * d;
                }
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Layer widths of the network. Hidden layers use leaky ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dims: Dims,
    pub frames: usize,
    pub latent: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Per-frame head widths; the last one is the per-frame output that is
    /// concatenated across frames.
    pub head: Vec<usize>,
    /// Widths of the post-concatenation stack before the final logit.
    pub post_hidden: Vec<usize>,
    /// Index into `post_hidden` of the CAV layer.
    pub cav_layer: usize,
}

impl ModelConfig {
    pub const DESK_LATENT: usize = 16;

    pub fn new(dims: Dims, frames: usize) -> Self {
        ModelConfig {
            dims,
            frames,
            latent: Self::DESK_LATENT,
            encoder_hidden: vec![256, 64],
            decoder_hidden: vec![64, 256],
            head: vec![32],
            post_hidden: vec![64, 16],
            cav_layer: 0,
        }
    }

    /// The small configuration used for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            dims: Dims { width: 8, height: 8, slices: 1 },
            frames: 3,
            latent: 4,
            encoder_hidden: vec![6],
            decoder_hidden: vec![6],
            head: vec![3],
            post_hidden: vec![5, 4],
            cav_layer: 0,
        }
    }

    pub fn input_len(&self) -> usize {
        self.dims.pixels() * N_LABELS
    }

    fn validate(&self) -> Result<()> {
        let widths = self
            .encoder_hidden
            .iter()
            .chain(&self.decoder_hidden)
            .chain(&self.head)
            .chain(&self.post_hidden);
        if self.latent == 0 || self.frames == 0 || self.head.is_empty() || widths.into_iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths, latent size and frame count must be positive".into()));
        }
        if self.cav_layer >= self.post_hidden.len() {
            return Err(Error::Config(format!(
                "CAV layer {} outside a post stack of {} hidden layers",
                self.cav_layer,
                self.post_hidden.len()
            )));
        }
        Ok(())
    }
}

fn chain(input: usize, hidden: &[usize], output: usize) -> Vec<(usize, usize)> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes.windows(2).map(|w| (w[0], w[1])).collect()
}

/// All network weights plus the bookkeeping needed to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: Dims,
    pub frames: usize,
    pub latent: usize,
    pub layers: Vec<Dense>,
    n_enc: usize,
    n_dec: usize,
    n_head: usize,
    /// Global index of the CAV layer.
    pub cav_index: usize,
}

impl ModelParams {
    fn shapes(config: &ModelConfig) -> Vec<(usize, usize)> {
        let d = config.latent;
        let head_out = *config.head.last().unwrap();
        let mut s = chain(config.input_len(), &config.encoder_hidden, 2 * d);
        s.extend(chain(d, &config.decoder_hidden, config.input_len()));
        s.extend(chain(d, &config.head[..config.head.len() - 1], head_out));
        s.extend(chain(config.frames * head_out, &config.post_hidden, 1));
        s
    }

    fn assemble(config: &ModelConfig, layers: Vec<Dense>) -> Self {
        let n_enc = config.encoder_hidden.len() + 1;
        let n_dec = config.decoder_hidden.len() + 1;
        let n_head = config.head.len();
        ModelParams {
            dims: config.dims,
            frames: config.frames,
            latent: config.latent,
            layers,
            n_enc,
            n_dec,
            n_head,
            cav_index: n_enc + n_dec + n_head + config.cav_layer,
        }
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layers = Self::shapes(config).into_iter().map(|(i, o)| Dense::zeros(i, o)).collect();
        Ok(Self::assemble(config, layers))
    }

    /// Seeded initialization. The first encoder layer sees exactly one
    /// active input per pixel, so its fan-in is the pixel count.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Domain::Init, 0);
        let layers = Self::shapes(config)
            .into_iter()
            .enumerate()
            .map(|(k, (i, o))| {
                let fan_in = if k == 0 { config.dims.pixels() } else { i };
                Dense::random(i, o, fan_in, &mut rng)
            })
            .collect();
        let mut params = Self::assemble(config, layers);
        // Start the log-variance half near zero so sigma starts near one
        // without dominating the early reconstructions.
        let enc_out = &mut params.layers[params.n_enc - 1];
        let d = config.latent;
        for i in 0..enc_out.inputs {
            for o in d..2 * d {
                enc_out.w[i * enc_out.outputs + o] *= 0.1;
            }
        }
        Ok(params)
    }

    /// Rebuilds the stack boundaries from raw layers, as read from a file.
    pub fn from_layers(layers: Vec<Dense>, cav_index: usize, latent: usize, frames: usize, dims: Dims) -> Result<Self> {
        let bad = |m: &str| Error::Config(format!("layer stack does not form a model: {m}"));
        let input_len = dims.pixels() * N_LABELS;
        if layers.is_empty() || layers[0].inputs != input_len {
            return Err(bad("first layer does not match the frame size"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.w.len() != l.inputs * l.outputs || l.b.len() != l.outputs {
                return Err(bad(&format!("layer {k} has inconsistent buffers")));
            }
        }
        let chained = |from: usize, to: usize| (from + 1..to).all(|k| layers[k].inputs == layers[k - 1].outputs);
        let n = layers.len();
        let n_enc = (0..n.saturating_sub(1))
            .find(|&k| layers[k].outputs == 2 * latent && layers[k + 1].inputs == latent)
            .ok_or_else(|| bad("no encoder output of width 2d"))?
            + 1;
        let n_dec = (n_enc..n)
            .find(|&k| layers[k].outputs == input_len)
            .ok_or_else(|| bad("no decoder output"))?
            + 1
            - n_enc;
        let head_start = n_enc + n_dec;
        if head_start >= n || layers[head_start].inputs != latent {
            return Err(bad("missing per-frame head"));
        }
        let n_head = (head_start..n.saturating_sub(1))
            .find(|&k| layers[k + 1].inputs == frames * layers[k].outputs)
            .ok_or_else(|| bad("no concatenation boundary"))?
            + 1
            - head_start;
        let post_start = head_start + n_head;
        if !chained(0, n_enc) || !chained(n_enc, head_start) || !chained(head_start, post_start) || !chained(post_start, n) {
            return Err(bad("consecutive widths disagree"));
        }
        if layers[n - 1].outputs != 1 {
            return Err(bad("classifier does not end in one logit"));
        }
        if cav_index < post_start || cav_index + 1 >= n {
            return Err(Error::Config(format!("CAV layer index {cav_index} is not a hidden classifier layer")));
        }
        Ok(ModelParams { dims, frames, latent, layers, n_enc, n_dec, n_head, cav_index })
    }

    pub fn encoder(&self) -> &[Dense] {
        &self.layers[..self.n_enc]
    }

    pub fn decoder(&self) -> &[Dense] {
        &self.layers[self.n_enc..self.n_enc + self.n_dec]
    }

    pub fn head(&self) -> &[Dense] {
        let s = self.n_enc + self.n_dec;
        &self.layers[s..s + self.n_head]
    }

    pub fn post(&self) -> &[Dense] {
        &self.layers[self.n_enc + self.n_dec + self.n_head..]
    }

    fn post_start(&self) -> usize {
        self.n_enc + self.n_dec + self.n_head
    }

    /// Index of the first classifier layer; everything before is the VAE.
    pub fn classifier_start(&self) -> usize {
        self.n_enc + self.n_dec
    }

    pub fn cav_width(&self) -> usize {
        self.layers[self.cav_index].outputs
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Dense::parameter_count).sum()
    }

    /// A zero-valued copy, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for l in &mut g.layers {
            l.w.iter_mut().for_each(|x| *x = 0.0);
            l.b.iter_mut().for_each(|x| *x = 0.0);
        }
        g
    }

    /// Every parameter, layer by layer, weights before biases.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(&l.b))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    fn check_frame(&self, frame: &LabelFrame) -> Result<()> {
        if frame.dims() != self.dims {
            return Err(Error::Config(format!(
                "frame is {:?} but the model expects {:?}",
                frame.dims(),
                self.dims
            )));
        }
        Ok(())
    }

    fn check_sequence(&self, frames: &[LabelFrame]) -> Result<()> {
        if frames.len() != self.frames {
            return Err(Error::Config(format!(
                "sequence has {} frames but the model was built for {}",
                frames.len(),
                self.frames
            )));
        }
        frames.iter().try_for_each(|f| self.check_frame(f))
    }

    /// Encodes one frame to its latent mean and standard deviation.
    pub fn encode(&self, frame: &LabelFrame) -> Result<LatentSample> {
        self.check_frame(frame)?;
        let rows = [frame.labels()];
        let trace = batch::run(self.encoder(), &Rows::Labels(&rows), 1);
        Ok(LatentSample::from_raw(trace.output(), self.latent))
    }

    /// Encodes all frames in one batched pass; row results are identical to
    /// [`ModelParams::encode`] on each frame.
    pub fn encode_sequence(&self, seq: &SegSequence) -> Result<LatentSeq> {
        self.check_sequence(&seq.frames)?;
        let rows: Vec<&[u8]> = seq.frames.iter().map(|f| f.labels()).collect();
        let trace = batch::run(self.encoder(), &Rows::Labels(&rows), rows.len());
        let (mus, sigmas) = trace
            .output()
            .chunks_exact(2 * self.latent)
            .map(|raw| {
                let s = LatentSample::from_raw(raw, self.latent);
                (s.mu, s.sigma)
            })
            .unzip();
        Ok(LatentSeq { mus, sigmas })
    }

    /// Per-pixel label probabilities, laid out like [`one_hot`].
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        let trace = batch::run(self.decoder(), &Rows::Dense(z), 1);
        Ok(softmax_pixels(trace.output()))
    }

    /// Most probable label per pixel; ties go to the lower label.
    pub fn decode_labels(&self, z: &[f64]) -> Result<LabelFrame> {
        Ok(self.decode_frames(std::slice::from_ref(&z.to_vec()))?.remove(0))
    }

    /// Argmax-decodes several latent vectors in one batched pass.
    pub fn decode_frames(&self, zs: &[Vec<f64>]) -> Result<Vec<LabelFrame>> {
        zs.iter().try_for_each(|z| self.check_latent(z))?;
        let flat = zs.concat();
        let trace = batch::run(self.decoder(), &Rows::Dense(&flat), zs.len());
        // Softmax is monotone, so the argmax of the logits is the argmax of
        // the probabilities.
        trace
            .output()
            .chunks_exact(self.dims.pixels() * N_LABELS)
            .map(|frame| {
                let labels = frame
                    .chunks_exact(N_LABELS)
                    .map(|c| {
                        let mut best = 0;
                        for l in 1..N_LABELS {
                            if c[l] > c[best] {
                                best = l;
                            }
                        }
                        best as u8
                    })
                    .collect();
                LabelFrame::from_labels(self.dims, labels)
            })
            .collect()
    }

    /// Decodes every frame from its latent mean.
    pub fn reconstruct(&self, seq: &SegSequence) -> Result<Vec<LabelFrame>> {
        self.decode_frames(&self.encode_sequence(seq)?.mus)
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.latent {
            return Err(Error::Config(format!("latent vector has {} entries, expected {}", z.len(), self.latent)));
        }
        Ok(())
    }

    fn check_means(&self, mus: &[Vec<f64>]) -> Result<()> {
        if mus.len() != self.frames {
            return Err(Error::Config(format!(
                "classifier built for {} frames, got {}",
                self.frames,
                mus.len()
            )));
        }
        mus.iter().try_for_each(|m| self.check_latent(m))
    }

    fn classifier_forward<'a>(&self, mus: &'a [Vec<f64>]) -> (Vec<StackTrace<'a>>, StackTrace<'a>) {
        let heads: Vec<StackTrace> = mus.iter().map(|m| run_stack(self.head(), Input::Dense(m), true)).collect();
        let concat: Vec<f64> = heads.iter().flat_map(|h| h.output().iter().copied()).collect();
        let post = run_stack(self.post(), Input::Owned(concat), false);
        (heads, post)
    }

    /// Runs the classifier on the latent means `M`.
    pub fn classify(&self, mus: &[Vec<f64>]) -> Result<Prediction> {
        self.check_means(mus)?;
        let (_, post) = self.classifier_forward(mus);
        let logit = post.output()[0];
        let k = self.cav_index - self.post_start();
        Ok(Prediction { logit, y_hat: sigmoid(logit), cav_activations: post.outputs[k].clone() })
    }

    pub fn predict(&self, seq: &SegSequence) -> Result<Prediction> {
        self.classify(&self.encode_sequence(seq)?.mus)
    }

    /// Gradient of the logit wrt the CAV-layer activations.
    pub fn logit_grad_cav(&self, mus: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_means(mus)?;
        let (_, post) = self.classifier_forward(mus);
        let k = self.cav_index - self.post_start();
        // Backward through the layers above the CAV layer only.
        let mut dy = vec![1.0];
        for j in (k + 1..self.post().len()).rev() {
            if j + 1 < self.post().len() {
                for (d, &p) in dy.iter_mut().zip(&post.pre[j]) {
                    *d *= leaky_grad(p);
                }
            }
            dy = self.post()[j].backward_input(&dy);
        }
        Ok(dy)
    }

    /// Gradient of the logit wrt each frame's latent mean.
    pub fn logit_grad_latent(&self, mus: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.check_means(mus)?;
        let (heads, post) = self.classifier_forward(mus);
        let dconcat = backward_stack(self.post(), &post, vec![1.0], false, None);
        let w = self.head().last().unwrap().outputs;
        Ok(heads
            .iter()
            .zip(dconcat.chunks_exact(w))
            .map(|(h, d)| backward_stack(self.head(), h, d.to_vec(), true, None))
            .collect())
    }

    /// The logit recomputed from given CAV-layer activations.
    pub fn logit_from_cav(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.cav_width() {
            return Err(Error::Config(format!("CAV activations have {} entries, expected {}", z.len(), self.cav_width())));
        }
        let k = self.cav_index - self.post_start();
        let above = &self.post()[k + 1..];
        let mut x = z.to_vec();
        for (j, l) in above.iter().enumerate() {
            x = l.forward(&x);
            if j + 1 < above.len() {
                x.iter_mut().for_each(|v| *v = leaky(*v));
            }
        }
        Ok(x[0])
    }
}

/// Flattened one-hot encoding: pixel-major, label innermost.
pub fn one_hot(frame: &LabelFrame) -> Vec<f64> {
    let mut v = vec![0.0; frame.labels().len() * N_LABELS];
    for (p, &l) in frame.labels().iter().enumerate() {
        v[p * N_LABELS + l as usize] = 1.0;
    }
    v
}

fn softmax_pixels(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    for c in p.chunks_exact_mut(N_LABELS) {
        let m = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in c.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        c.iter_mut().for_each(|v| *v /= s);
    }
    p
}

/// Per-pixel `-ln p(true label)` summed over the frame, computed from logits
/// through log-sum-exp.
fn frame_cross_entropy(logits: &[f64], labels: &[u8]) -> f64 {
    logits
        .chunks_exact(N_LABELS)
        .zip(labels)
        .map(|(c, &l)| {
            let m = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + c.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - c[l as usize]
        })
        .sum()
}

/// One encoded frame. `nu` and `z` differ from the mean only during training.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub nu: Option<Vec<f64>>,
    pub z: Vec<f64>,
}

impl LatentSample {
    fn from_raw(raw: &[f64], d: usize) -> Self {
        let mu = raw[..d].to_vec();
        let sigma = raw[d..].iter().map(|r| (r / 2.0).exp()).collect();
        LatentSample { z: mu.clone(), mu, sigma, nu: None }
    }
}

/// Draws `z = mu + sigma * nu` with `nu ~ N(0, I)` and records the noise.
pub fn reparameterize(sample: &LatentSample, rng: &mut impl Rng) -> LatentSample {
    let nu: Vec<f64> = (0..sample.mu.len()).map(|_| rng.sample(StandardNormal)).collect();
    reparameterize_with(sample, nu)
}

pub fn reparameterize_with(sample: &LatentSample, nu: Vec<f64>) -> LatentSample {
    let z = sample.mu.iter().zip(&sample.sigma).zip(&nu).map(|((m, s), n)| m + s * n).collect();
    LatentSample { mu: sample.mu.clone(), sigma: sample.sigma.clone(), nu: Some(nu), z }
}

/// Latent means and standard deviations of every frame of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeq {
    pub mus: Vec<Vec<f64>>,
    pub sigmas: Vec<Vec<f64>>,
}

impl LatentSeq {
    /// Frame-averaged latent mean.
    pub fn mean(&self) -> Vec<f64> {
        let t = self.mus.len() as f64;
        let mut m = vec![0.0; self.mus[0].len()];
        for mu in &self.mus {
            for (a, b) in m.iter_mut().zip(mu) {
                *a += b / t;
            }
        }
        m
    }

    /// All frame means concatenated in frame order.
    pub fn concatenated(&self) -> Vec<f64> {
        self.mus.concat()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logit: f64,
    pub y_hat: f64,
    pub cav_activations: Vec<f64>,
}

/// `0.5 * sum(mu^2 + sigma^2 - 1 - ln sigma^2)`.
pub fn kl_divergence(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::Parameter("mu and sigma lengths differ".into()));
    }
    let mut kl = 0.0;
    for (&m, &s) in mu.iter().zip(sigma) {
        if !(s > 0.0) {
            return Err(Error::Domain(format!("sigma must be positive, got {s}")));
        }
        let s2 = s * s;
        kl += m * m + s2 - 1.0 - s2.ln();
    }
    Ok(0.5 * kl)
}

/// KL from the raw log-variance output, as used inside the loss.
fn kl_raw(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu.iter().zip(logvar).map(|(m, r)| m * m + r.exp() - 1.0 - r).sum::<f64>()
}

enum Input<'a> {
    Dense(&'a [f64]),
    Owned(Vec<f64>),
}

/// Inputs, pre-activations and outputs of each layer of a stack.
struct StackTrace<'a> {
    input: Input<'a>,
    pre: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

impl StackTrace<'_> {
    fn output(&self) -> &[f64] {
        self.outputs.last().unwrap()
    }

    fn layer_input(&self, k: usize) -> &[f64] {
        if k > 0 {
            return &self.outputs[k - 1];
        }
        match &self.input {
            Input::Dense(x) => x,
            Input::Owned(x) => x,
        }
    }
}

/// Hidden layers are leaky; the last layer is leaky only if `act_last`.
fn run_stack<'a>(layers: &[Dense], input: Input<'a>, act_last: bool) -> StackTrace<'a> {
    let mut pre = Vec::with_capacity(layers.len());
    let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    for (k, l) in layers.iter().enumerate() {
        let y = match (k, &input) {
            (0, Input::Dense(x)) => l.forward(x),
            (0, Input::Owned(x)) => l.forward(x),
            _ => l.forward(&outputs[k - 1]),
        };
        let out = if k + 1 < layers.len() || act_last { y.iter().map(|&v| leaky(v)).collect() } else { y.clone() };
        pre.push(y);
        outputs.push(out);
    }
    StackTrace { input, pre, outputs }
}

/// Backpropagates `dy` (gradient wrt the stack output) through the stack,
/// accumulating weight gradients into `grads` when given. Returns the
/// gradient wrt the stack input.
fn backward_stack(
    layers: &[Dense],
    trace: &StackTrace,
    mut dy: Vec<f64>,
    act_last: bool,
    mut grads: Option<&mut [Dense]>,
) -> Vec<f64> {
    let n = layers.len();
    for k in (0..n).rev() {
        if k + 1 < n || act_last {
            for (d, &p) in dy.iter_mut().zip(&trace.pre[k]) {
                *d *= leaky_grad(p);
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            g[k].accumulate(trace.layer_input(k), &dy);
        }
        dy = layers[k].backward_input(&dy);
    }
    dy
}

/// Loss weights for one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
}

/// One training example. With `noise` absent every frame uses `z = mu`.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub frames: &'a [LabelFrame],
    pub label: Option<bool>,
    pub noise: Option<&'a [Vec<f64>]>,
}

impl<'a> Example<'a> {
    pub fn from_sequence(seq: &'a SegSequence) -> Self {
        Example { frames: &seq.frames, label: seq.label, noise: None }
    }
}

/// Batch-mean loss terms. `recon` and `kl` are already averaged over frames
/// and `total = recon + beta * kl + gamma * class`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub recon: f64,
    pub kl: f64,
    pub class: f64,
    pub total: f64,
}

/// Evaluates the objective over a batch:
/// `mean_batch[(1/T) sum_t (CE_t + beta KL_t) + gamma BCE]`, where `CE_t` is
/// the per-pixel categorical cross-entropy summed over the frame. The
/// classifier reads the latent means, never the samples. With `gamma = 0`
/// the classifier is not run and labels are not read.
pub fn loss_total(params: &ModelParams, batch: &[Example], w: LossWeights) -> Result<LossTerms> {
    evaluate(params, batch, w, None)
}

/// Loss terms plus exact gradients wrt every parameter.
pub fn gradients(params: &ModelParams, batch: &[Example], w: LossWeights) -> Result<(LossTerms, ModelParams)> {
    let mut g = params.zeros_like();
    let terms = evaluate(params, batch, w, Some(&mut g))?;
    Ok((terms, g))
}

/// Shared forward/backward pass. All frames of the batch go through the
/// encoder and decoder as one matrix; the classifier runs per example in
/// batch order.
pub(crate) fn evaluate(
    params: &ModelParams,
    examples: &[Example],
    w: LossWeights,
    mut grads: Option<&mut ModelParams>,
) -> Result<LossTerms> {
    if examples.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if !(w.beta >= 0.0) || (w.gamma != 0.0 && w.gamma != 1.0) {
        return Err(Error::Parameter(format!("need beta >= 0 and gamma in {{0,1}}, got {w:?}")));
    }
    let d = params.latent;
    let t = params.frames;
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        params.check_sequence(ex.frames)?;
        if let Some(noise) = ex.noise {
            if noise.len() != t || noise.iter().any(|n| n.len() != d) {
                return Err(Error::Parameter("noise must hold one d-vector per frame".into()));
            }
        }
        labels.push(if w.gamma != 0.0 {
            Some(ex.label.ok_or_else(|| Error::Data("classification term needs a known label".into()))?)
        } else {
            None
        });
    }
    let bsz = examples.len() as f64;
    let scale = 1.0 / (t as f64 * bsz);
    let rows: Vec<&[u8]> = examples.iter().flat_map(|ex| ex.frames.iter().map(|f| f.labels())).collect();
    let n = rows.len();
    let input = Rows::Labels(&rows);
    let enc = batch::run(params.encoder(), &input, n);
    let raw = enc.output();
    let mut z = Vec::with_capacity(n * d);
    for (r, ex) in examples.iter().enumerate() {
        for f in 0..t {
            let row = &raw[(r * t + f) * 2 * d..(r * t + f + 1) * 2 * d];
            for i in 0..d {
                let nu = ex.noise.map_or(0.0, |noise| noise[f][i]);
                z.push(if nu == 0.0 { row[i] } else { row[i] + (row[d + i] / 2.0).exp() * nu });
            }
        }
    }
    let z_rows = Rows::Dense(&z);
    let dec = batch::run(params.decoder(), &z_rows, n);
    let logits = dec.output();
    let width = logits.len() / n;
    let mut terms = LossTerms::default();
    for (k, row) in raw.chunks_exact(2 * d).enumerate() {
        terms.recon += frame_cross_entropy(&logits[k * width..(k + 1) * width], rows[k]) * scale;
        terms.kl += kl_raw(&row[..d], &row[d..]) * scale;
    }
    let mut draw = vec![0.0; n * 2 * d];
    let (n_enc, n_dec) = (params.n_enc, params.n_dec);
    if let Some(g) = grads.as_deref_mut() {
        let mut dlogits = softmax_pixels(logits);
        for (k, r) in rows.iter().enumerate() {
            let base = k * width;
            for (p, &l) in r.iter().enumerate() {
                dlogits[base + p * N_LABELS + l as usize] -= 1.0;
            }
        }
        dlogits.iter_mut().for_each(|v| *v *= scale);
        let dz = batch::backward(params.decoder(), &dec, &z_rows, dlogits, &mut g.layers[n_enc..n_enc + n_dec]).unwrap();
        for (r, ex) in examples.iter().enumerate() {
            for f in 0..t {
                let k = r * t + f;
                let row = &raw[k * 2 * d..(k + 1) * 2 * d];
                for i in 0..d {
                    let (mu, logvar) = (row[i], row[d + i]);
                    let nu = ex.noise.map_or(0.0, |noise| noise[f][i]);
                    draw[k * 2 * d + i] = dz[k * d + i] + scale * w.beta * mu;
                    draw[k * 2 * d + d + i] = dz[k * d + i] * nu * (logvar / 2.0).exp() / 2.0
                        + scale * w.beta * 0.5 * (logvar.exp() - 1.0);
                }
            }
        }
    }
    for (r, label) in labels.iter().enumerate() {
        let Some(y) = *label else { continue };
        let mus: Vec<Vec<f64>> = (0..t).map(|f| raw[(r * t + f) * 2 * d..][..d].to_vec()).collect();
        let (heads, post) = params.classifier_forward(&mus);
        let logit = post.output()[0];
        let yv = if y { 1.0 } else { 0.0 };
        terms.class += (softplus(logit) - yv * logit) / bsz;
        if let Some(g) = grads.as_deref_mut() {
            let dlogit = w.gamma * (sigmoid(logit) - yv) / bsz;
            let ps = params.post_start();
            let hs = params.classifier_start();
            let dconcat = backward_stack(params.post(), &post, vec![dlogit], false, Some(&mut g.layers[ps..]));
            let hw = params.head().last().unwrap().outputs;
            for (f, (h, dh)) in heads.iter().zip(dconcat.chunks_exact(hw)).enumerate() {
                let dmu = backward_stack(params.head(), h, dh.to_vec(), true, Some(&mut g.layers[hs..ps]));
                let k = r * t + f;
                for i in 0..d {
                    draw[k * 2 * d + i] += dmu[i];
                }
            }
        }
    }
    if let Some(g) = grads {
        batch::backward(params.encoder(), &enc, &input, draw, &mut g.layers[..n_enc]);
    }
    terms.total = terms.recon + w.beta * terms.kl + w.gamma * terms.class;
    Ok(terms)
}
