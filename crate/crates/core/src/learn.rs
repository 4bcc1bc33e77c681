//! Small fully connected regressors trained from scratch with Adam.
//!
//! Network: pooled image, mapped to [-1, 1], through ReLU hidden layers;
//! the last hidden activation is concatenated with the z-scored pose
//! features and fed to a linear head with three outputs. Labels are
//! z-scored for training and de-normalised on prediction.
//!
//! Training runs in f64; the finished model keeps its weights as f32 so the
//! on-disk form is exact.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::SceneConfig;
use crate::sensors::{jitter_with, shift_columns, Image};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorSpec {
    /// Raw image size before pooling.
    pub image_width: usize,
    pub image_height: usize,
    /// Average-pooling factor applied to the raw image.
    pub pool: usize,
    pub pose_features: usize,
    pub hidden: Vec<usize>,
    pub outputs: usize,
    pub init_scale: f64,
}

impl RegressorSpec {
    pub fn tactile(width: usize, height: usize) -> Self {
        Self { image_width: width, image_height: height, pool: 4, pose_features: 0, hidden: vec![128, 64], outputs: 3, init_scale: 1.0 }
    }

    pub fn vision(width: usize, height: usize, pose_features: usize) -> Self {
        Self { image_width: width, image_height: height, pool: 2, pose_features, hidden: vec![256, 128], outputs: 3, init_scale: 1.0 }
    }

    pub fn input_dim(&self) -> usize {
        let p = self.pool.max(1);
        (self.image_width / p) * (self.image_height / p)
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim();
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev + self.pose_features, self.outputs));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.outputs != 3 {
            return Err(Error::Model(format!("output count must be 3, got {}", self.outputs)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Model("hidden widths must be positive".into()));
        }
        if self.input_dim() == 0 {
            return Err(Error::Model("pooled image is empty".into()));
        }
        Ok(())
    }

    /// Pooled pixels in [0, 1] for an image matching this spec.
    pub fn prepare(&self, img: &Image) -> Result<Vec<f32>> {
        if img.width != self.image_width || img.height != self.image_height {
            return Err(Error::Model(format!(
                "image is {}x{}, model expects {}x{}",
                img.width, img.height, self.image_width, self.image_height
            )));
        }
        Ok(img.pooled(self.pool).data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub augment: bool,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            lr_decay: 0.99,
            decay_every: 100,
            epochs: 30,
            max_steps: None,
            seed: 0,
            augment: true,
            val_fraction: 0.1,
        }
    }
}

/// Per-column z-scoring. Columns with (near) zero spread get unit scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(rows: &[Vec<f64>], dim: usize) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt()).map(|s| if s < 1e-12 { 1.0 } else { s }).collect();
        Self { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn norm(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn denorm(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| x * s + m).collect()
    }
}

/// Training samples with images already pooled.
#[derive(Clone, Debug, Default)]
pub struct TrainSet {
    pub dim: usize,
    pub inputs: Vec<f32>,
    pub feats: Vec<Vec<f64>>,
    pub labels: Vec<[f64; 3]>,
}

impl TrainSet {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, input: &[f32], feats: Vec<f64>, label: [f64; 3]) {
        assert_eq!(input.len(), self.dim, "input dimension mismatch");
        self.inputs.extend_from_slice(input);
        self.feats.push(feats);
        self.labels.push(label);
    }

    pub fn input(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }
}

/// Plain f64 network used during training and gradient checks.
struct Net<'a> {
    spec: &'a RegressorSpec,
    dims: Vec<(usize, usize)>,
}

struct Trace {
    /// Activations per layer input; `acts[0]` is the network input.
    acts: Vec<Vec<f64>>,
    out: Vec<f64>,
}

impl<'a> Net<'a> {
    fn new(spec: &'a RegressorSpec) -> Self {
        Self { spec, dims: spec.layer_dims() }
    }

    fn forward(&self, params: &[f64], input: &[f64], feats: &[f64]) -> Trace {
        let mut acts = vec![input.to_vec()];
        let mut off = 0;
        let last = self.dims.len() - 1;
        for (l, &(din, dout)) in self.dims.iter().enumerate() {
            let w = &params[off..off + din * dout];
            let b = &params[off + din * dout..off + din * dout + dout];
            off += din * dout + dout;
            let a = if l == last {
                let mut head = acts[l].clone();
                head.extend_from_slice(feats);
                acts[l] = head;
                &acts[l]
            } else {
                &acts[l]
            };
            let mut z = vec![0.0; dout];
            for (i, zi) in z.iter_mut().enumerate() {
                *zi = b[i] + dot(&w[i * din..(i + 1) * din], a);
            }
            if l == last {
                return Trace { acts, out: z };
            }
            z.iter_mut().for_each(|v| *v = v.max(0.0));
            acts.push(z);
        }
        unreachable!()
    }

    /// Forward and backward pass over a whole batch, layer by layer, so
    /// each weight row is reused across the batch while it is in cache.
    /// Adds `dL/dparams` of `scale · Σ‖out − y‖²` to `grad` and returns the
    /// summed per-sample loss.
    fn batch_gradient(&self, params: &[f64], xs: &[Vec<f64>], fs: &[Vec<f64>], ys: &[Vec<f64>], scale: f64, grad: &mut [f64]) -> f64 {
        let n = xs.len();
        let last = self.dims.len() - 1;
        let mut offs = Vec::with_capacity(self.dims.len());
        let mut off = 0;
        for &(din, dout) in &self.dims {
            offs.push(off);
            off += din * dout + dout;
        }
        // acts[l][s]: input of layer l for sample s
        let mut acts: Vec<Vec<Vec<f64>>> = vec![xs.to_vec()];
        for (l, &(din, dout)) in self.dims.iter().enumerate() {
            let o = offs[l];
            if l == last {
                for (a, f) in acts[l].iter_mut().zip(fs) {
                    a.extend_from_slice(f);
                }
            }
            let mut z = vec![vec![0.0; dout]; n];
            let w = &params[o..o + din * dout];
            let bias = &params[o + din * dout..o + din * dout + dout];
            let mut i = 0;
            while i + 4 <= dout {
                let rows = [&w[i * din..(i + 1) * din], &w[(i + 1) * din..(i + 2) * din], &w[(i + 2) * din..(i + 3) * din], &w[(i + 3) * din..(i + 4) * din]];
                for s in 0..n {
                    let d = dot4(rows, &acts[l][s]);
                    for k in 0..4 {
                        z[s][i + k] = bias[i + k] + d[k];
                    }
                }
                i += 4;
            }
            for i in i..dout {
                for s in 0..n {
                    z[s][i] = bias[i] + dot(&w[i * din..(i + 1) * din], &acts[l][s]);
                }
            }
            if l != last {
                z.iter_mut().flatten().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        let outs = acts.pop().expect("network has layers");
        let mut loss = 0.0;
        let mut delta: Vec<Vec<f64>> = outs
            .iter()
            .zip(ys)
            .map(|(o, y)| {
                loss += sample_loss(o, y);
                o.iter().zip(y).map(|(oo, yy)| 2.0 * (oo - yy) * scale).collect()
            })
            .collect();
        for l in (0..self.dims.len()).rev() {
            let (din, dout) = self.dims[l];
            let o = offs[l];
            for i in 0..dout {
                let row = &mut grad[o + i * din..o + (i + 1) * din];
                let mut db = 0.0;
                let live: Vec<usize> = (0..n).filter(|&s| delta[s][i] != 0.0).collect();
                let mut quads = live.chunks_exact(4);
                for q in quads.by_ref() {
                    let d = [delta[q[0]][i], delta[q[1]][i], delta[q[2]][i], delta[q[3]][i]];
                    axpy4(row, d, [&acts[l][q[0]], &acts[l][q[1]], &acts[l][q[2]], &acts[l][q[3]]]);
                    db += (d[0] + d[1]) + (d[2] + d[3]);
                }
                for &s in quads.remainder() {
                    axpy(row, delta[s][i], &acts[l][s]);
                    db += delta[s][i];
                }
                grad[o + din * dout + i] += db;
            }
            if l == 0 {
                break;
            }
            // the head's input includes the pose features; only the hidden part propagates
            let hidden_width = self.dims[l - 1].1;
            let mut prev = vec![vec![0.0; din]; n];
            for i in 0..dout {
                let w = &params[o + i * din..o + (i + 1) * din];
                for s in 0..n {
                    let d = delta[s][i];
                    if d != 0.0 {
                        axpy(&mut prev[s], d, w);
                    }
                }
            }
            for (p, a) in prev.iter_mut().zip(&acts[l]) {
                p.truncate(hidden_width);
                for (pv, av) in p.iter_mut().zip(a) {
                    if *av <= 0.0 {
                        *pv = 0.0;
                    }
                }
            }
            delta = prev;
        }
        loss
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.spec.param_count());
        let last = self.dims.len() - 1;
        for (l, &(din, dout)) in self.dims.iter().enumerate() {
            let gain = if l == last { 1.0 } else { 2.0 };
            let s = self.spec.init_scale * (gain / din as f64).sqrt();
            for _ in 0..din * dout {
                params.push(rng.sample::<f64, _>(StandardNormal) * s);
            }
            params.extend(std::iter::repeat_n(0.0, dout));
        }
        params
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // eight independent partial sums keep the reduction order fixed while
    // letting the compiler vectorise
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Four dot products sharing the right operand, each reduced exactly as
/// [`dot`] would reduce it.
fn dot4(w: [&[f64]; 4], a: &[f64]) -> [f64; 4] {
    let mut acc = [[0.0f64; 8]; 4];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let x = &a[8 * c..8 * c + 8];
        for k in 0..4 {
            let r = &w[k][8 * c..8 * c + 8];
            for j in 0..8 {
                acc[k][j] += r[j] * x[j];
            }
        }
    }
    let mut out = [0.0; 4];
    for k in 0..4 {
        let q = &acc[k];
        let mut s = ((q[0] + q[1]) + (q[2] + q[3])) + ((q[4] + q[5]) + (q[6] + q[7]));
        for j in 8 * chunks..a.len() {
            s += w[k][j] * a[j];
        }
        out[k] = s;
    }
    out
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `y += Σ_k a[k] · x[k]` in one pass over `y`.
fn axpy4(y: &mut [f64], a: [f64; 4], x: [&[f64]; 4]) {
    let n = y.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for j in 0..n {
        y[j] += (a[0] * x0[j] + a[1] * x1[j]) + (a[2] * x2[j] + a[3] * x3[j]);
    }
}

fn to_input(pixels: &[f32]) -> Vec<f64> {
    pixels.iter().map(|&v| 2.0 * (v as f64 - 0.5)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: RegressorSpec,
    pub weights: Vec<f32>,
    pub label_norm: Normalizer,
    pub feat_norm: Normalizer,
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    spec: RegressorSpec,
    label_norm: Normalizer,
    feat_norm: Normalizer,
    weight_count: usize,
}

impl Model {
    /// Prediction from pooled pixels and raw pose features.
    pub fn predict_prepared(&self, pixels: &[f32], feats: &[f64]) -> Result<[f64; 3]> {
        if pixels.len() != self.spec.input_dim() || feats.len() != self.spec.pose_features {
            return Err(Error::Model(format!(
                "layout mismatch: got {} pixels / {} features, model expects {} / {}",
                pixels.len(),
                feats.len(),
                self.spec.input_dim(),
                self.spec.pose_features
            )));
        }
        let params: Vec<f64> = self.weights.iter().map(|&w| w as f64).collect();
        let net = Net::new(&self.spec);
        let t = net.forward(&params, &to_input(pixels), &self.feat_norm.norm(feats));
        let y = self.label_norm.denorm(&t.out);
        Ok([y[0], y[1], y[2]])
    }

    pub fn predict(&self, img: &Image, feats: &[f64]) -> Result<[f64; 3]> {
        self.predict_prepared(&self.spec.prepare(img)?, feats)
    }

    pub fn manifest_text(&self) -> String {
        let m = ModelManifest {
            spec: self.spec.clone(),
            label_norm: self.label_norm.clone(),
            feat_norm: self.feat_norm.clone(),
            weight_count: self.weights.len(),
        };
        serde_json::to_string_pretty(&m).expect("model manifest serialises")
    }

    pub fn weight_bytes(&self) -> Vec<u8> {
        self.weights.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = dir.join("model.json");
        std::fs::write(&m, self.manifest_text()).map_err(|e| Error::io(&m, e))?;
        let w = dir.join("weights.bin");
        std::fs::write(&w, self.weight_bytes()).map_err(|e| Error::io(&w, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = dir.join("model.json");
        let text = std::fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
        let man: ModelManifest = serde_json::from_str(&text).map_err(|e| Error::Model(format!("{}: {e}", m.display())))?;
        man.spec.validate()?;
        let w = dir.join("weights.bin");
        let bytes = std::fs::read(&w).map_err(|e| Error::io(&w, e))?;
        if bytes.len() != 4 * man.weight_count || man.weight_count != man.spec.param_count() {
            return Err(Error::Model(format!("{}: weight count does not match the manifest", w.display())));
        }
        let weights = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Model { spec: man.spec, weights, label_norm: man.label_norm, feat_norm: man.feat_norm })
    }
}

/// Tactile policy output: predicted grasp offset `(x, z, beta)`.
/// Column shifts used to widen the x coverage of the alignment data.
pub const TACTILE_SHIFTS: i64 = 4;

/// Training set for the tactile model. Besides each record as captured,
/// adds copies shifted by up to ±`shifts` pixel columns with the x label
/// moved by the same distance on the pad; a column shift of the imprint is
/// exactly a translation of the part along the gripper x axis.
pub fn tactile_train_set(scene: &SceneConfig, spec: &RegressorSpec, records: &[(Image, [f64; 3])], shifts: i64) -> Result<TrainSet> {
    let pitch = scene.tactile_extent.0 / scene.tactile_resolution.0 as f64;
    let mut set = TrainSet::new(spec.input_dim());
    for (img, label) in records {
        for k in -shifts..=shifts {
            let shifted = if k == 0 { img.clone() } else { shift_columns(img, k) };
            set.push(&spec.prepare(&shifted)?, Vec::new(), [label[0] + k as f64 * pitch, label[1], label[2]]);
        }
    }
    Ok(set)
}

pub fn predict_tac(m: &Model, img: &Image) -> Result<[f64; 3]> {
    m.predict(img, &[])
}

/// Vision policy output: `(dx, dy, dbeta)` toward the unplug pose.
pub fn predict_vis(m: &Model, img: &Image, pose_feats: &[f64]) -> Result<[f64; 3]> {
    m.predict(img, pose_feats)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// `(step, mean batch loss)` recorded every `decay_every` steps and at
    /// the final step.
    pub loss_curve: Vec<(usize, f64)>,
    pub steps: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_indices: Vec<usize>,
}

/// Seeded 90/10 split: returns `(train, validation)` indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    idx.shuffle(&mut rng);
    let n_val = ((n as f64) * val_fraction).floor() as usize;
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

const SPLIT_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const BATCH_STREAM: u64 = 3;

fn sample_loss(out: &[f64], y: &[f64]) -> f64 {
    out.iter().zip(y).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() / out.len() as f64
}

fn mse_over(net: &Net, params: &[f64], set: &TrainSet, idx: &[usize], ln: &Normalizer, fnorm: &Normalizer) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &i in idx {
        let t = net.forward(params, &to_input(set.input(i)), &fnorm.norm(&set.feats[i]));
        total += sample_loss(&t.out, &ln.norm(&set.labels[i]));
    }
    total / idx.len() as f64
}

/// Minimises MSE on z-scored labels with Adam (0.9, 0.999, 1e-8).
/// Jitter augmentation, when enabled, draws one brightness/contrast pair
/// per sample and applies it to the pooled pixels; labels are untouched.
pub fn train(set: &TrainSet, spec: &RegressorSpec, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    spec.validate()?;
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if set.dim != spec.input_dim() {
        return Err(Error::Model(format!("dataset input dim {} does not match spec {}", set.dim, spec.input_dim())));
    }
    if set.feats.iter().any(|f| f.len() != spec.pose_features) {
        return Err(Error::Model("pose feature count does not match spec".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidArgument("batch size and learning rate must be positive".into()));
    }
    let (train_idx, val_idx) = split_indices(set.len(), cfg.val_fraction, cfg.seed);
    let train_idx = if train_idx.is_empty() { val_idx.clone() } else { train_idx };
    let label_rows: Vec<Vec<f64>> = train_idx.iter().map(|&i| set.labels[i].to_vec()).collect();
    let feat_rows: Vec<Vec<f64>> = train_idx.iter().map(|&i| set.feats[i].clone()).collect();
    let ln = Normalizer::fit(&label_rows, 3);
    let fnorm = Normalizer::fit(&feat_rows, spec.pose_features);

    let net = Net::new(spec);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(INIT_STREAM);
    let mut params = net.init(&mut init_rng);
    let np = params.len();
    let (mut m, mut v) = (vec![0.0; np], vec![0.0; np]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(BATCH_STREAM);

    let batches_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_steps.unwrap_or(cfg.epochs * batches_per_epoch);
    let mut report = TrainReport { val_indices: val_idx.clone(), ..Default::default() };
    let mut order = train_idx.clone();
    let mut cursor = order.len();
    let mut grad = vec![0.0; np];
    let mut running = 0.0;
    let mut running_n = 0usize;
    for step in 0..total_steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(order.len()) {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let scale = 1.0 / (batch.len() * 3) as f64;
        let mut xs = Vec::with_capacity(batch.len());
        let mut fs = Vec::with_capacity(batch.len());
        let mut ys = Vec::with_capacity(batch.len());
        for &i in &batch {
            let pixels: Vec<f32> = if cfg.augment {
                let c: f64 = rng.random_range(0.7..=1.3);
                let b: f64 = rng.random_range(0.7..=1.3);
                let img = Image { width: set.dim, height: 1, data: set.input(i).to_vec() };
                jitter_with(&img, c, b).data
            } else {
                set.input(i).to_vec()
            };
            xs.push(to_input(&pixels));
            fs.push(fnorm.norm(&set.feats[i]));
            ys.push(ln.norm(&set.labels[i]));
        }
        let mut loss = net.batch_gradient(&params, &xs, &fs, &ys, scale, &mut grad);
        loss /= batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        running += loss;
        running_n += 1;
        if step == 0 {
            report.loss_curve.push((0, loss));
        }
        let lr = cfg.learning_rate * cfg.lr_decay.powi((step / cfg.decay_every.max(1)) as i32);
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for k in 0..np {
            let g = grad[k];
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            params[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
        }
        if (step + 1) % cfg.decay_every.max(1) == 0 || step + 1 == total_steps {
            report.loss_curve.push((step + 1, running / running_n as f64));
            running = 0.0;
            running_n = 0;
        }
    }
    report.steps = total_steps;
    let weights: Vec<f32> = params.iter().map(|&p| p as f32).collect();
    let rounded: Vec<f64> = weights.iter().map(|&w| w as f64).collect();
    report.train_mse = mse_over(&net, &rounded, set, &train_idx, &ln, &fnorm);
    report.val_mse = mse_over(&net, &rounded, set, &val_idx, &ln, &fnorm);
    let model = Model { spec: spec.clone(), weights, label_norm: ln, feat_norm: fnorm };
    Ok((model, report))
}

fn batch_loss(net: &Net, params: &[f64], batch: &[(Vec<f64>, Vec<f64>, Vec<f64>)]) -> f64 {
    batch.iter().map(|(x, f, y)| sample_loss(&net.forward(params, x, f).out, y)).sum::<f64>() / batch.len() as f64
}

fn relu_pattern(net: &Net, params: &[f64], batch: &[(Vec<f64>, Vec<f64>, Vec<f64>)]) -> Vec<bool> {
    let mut out = Vec::new();
    for (x, f, _) in batch {
        let t = net.forward(params, x, f);
        for a in &t.acts[1..] {
            out.extend(a.iter().map(|v| *v > 0.0));
        }
    }
    out
}

/// Largest relative error between backprop gradients and central finite
/// differences (step 1e-5) over a random subset of parameters of a freshly
/// initialised network on a random batch. Parameters whose perturbation
/// flips a ReLU are skipped, since the loss is not differentiable there.
pub fn gradient_check(spec: &RegressorSpec, seed: u64) -> f64 {
    gradient_check_with(spec, seed, false)
}

pub fn gradient_check_with(spec: &RegressorSpec, seed: u64, zero_inputs: bool) -> f64 {
    const H: f64 = 1e-5;
    const CHECKS: usize = 64;
    let net = Net::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = net.init(&mut rng);
    let dim = spec.input_dim();
    let batch: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..4)
        .map(|_| {
            let x = (0..dim).map(|_| if zero_inputs { 0.0 } else { rng.random_range(-1.0..1.0) }).collect();
            let f = (0..spec.pose_features).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = (0..spec.outputs).map(|_| rng.random_range(-1.0..1.0)).collect();
            (x, f, y)
        })
        .collect();
    let mut grad = vec![0.0; params.len()];
    let scale = 1.0 / (batch.len() * spec.outputs) as f64;
    let xs: Vec<Vec<f64>> = batch.iter().map(|b| b.0.clone()).collect();
    let fs: Vec<Vec<f64>> = batch.iter().map(|b| b.1.clone()).collect();
    let ys: Vec<Vec<f64>> = batch.iter().map(|b| b.2.clone()).collect();
    net.batch_gradient(&params, &xs, &fs, &ys, scale, &mut grad);
    let base_pattern = relu_pattern(&net, &params, &batch);
    let mut worst: f64 = 0.0;
    let n = params.len();
    let picks: Vec<usize> = if n <= CHECKS { (0..n).collect() } else { (0..CHECKS).map(|_| rng.random_range(0..n)).collect() };
    for k in picks {
        let mut p = params.clone();
        p[k] = params[k] + H;
        if relu_pattern(&net, &p, &batch) != base_pattern {
            continue;
        }
        let lp = batch_loss(&net, &p, &batch);
        p[k] = params[k] - H;
        if relu_pattern(&net, &p, &batch) != base_pattern {
            continue;
        }
        let lm = batch_loss(&net, &p, &batch);
        let num = (lp - lm) / (2.0 * H);
        let ana = grad[k];
        if !ana.is_finite() || !num.is_finite() {
            return f64::INFINITY;
        }
        let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}
