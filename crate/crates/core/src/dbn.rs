//! Deep belief network: a stack of RBMs pretrained greedily bottom-up, topped
//! with a softmax head and fine-tuned end to end by minibatch SGD on
//! cross-entropy. Inference is a deterministic mean-field upward pass.

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imgcodec::InputVector;
use crate::rbm::{self, CdConfig, RbmError, RbmParams};
use crate::seed;

pub const MODEL_MAGIC: &[u8; 4] = b"DBN1";
pub const MODEL_VERSION: u32 = 1;

/// Class index of the malicious (positive) class in the softmax head.
pub const MALICIOUS_CLASS: usize = 1;

// seed-path tags
const TAG_INIT: u64 = 1;
const TAG_PRETRAIN_ORDER: u64 = 2;
const TAG_PRETRAIN_STEP: u64 = 3;
const TAG_FINETUNE_ORDER: u64 = 4;

#[derive(Debug, Error)]
pub enum DbnError {
    #[error("no training data")]
    EmptyData,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("label {0} is not a known class")]
    UnknownLabel(usize),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error(transparent)]
    Rbm(#[from] RbmError),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("model file checksum mismatch")]
    ChecksumMismatch,
    #[error("unsupported model format version {0}")]
    VersionUnsupported(u32),
    #[error("truncated or malformed model file")]
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DbnArch {
    /// input size followed by every hidden layer size
    pub layer_sizes: Vec<usize>,
    pub n_classes: usize,
    pub pretrain_epochs: u32,
    pub finetune_epochs: u32,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for DbnArch {
    fn default() -> Self {
        Self {
            layer_sizes: vec![4096, 3000, 3000],
            n_classes: 2,
            pretrain_epochs: 10,
            finetune_epochs: 10,
            batch_size: 10,
            rng_seed: 0,
        }
    }
}

impl DbnArch {
    pub fn validate(&self) -> Result<(), DbnError> {
        if self.layer_sizes.len() < 2 {
            return Err(DbnError::InvalidArch("need an input layer and at least one hidden layer".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(DbnError::InvalidArch("layer sizes must be positive".into()));
        }
        if self.n_classes != 2 {
            return Err(DbnError::InvalidArch(format!("n_classes must be 2, got {}", self.n_classes)));
        }
        if self.batch_size == 0 {
            return Err(DbnError::InvalidArch("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_hidden_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn last_hidden(&self) -> usize {
        *self.layer_sizes.last().expect("validated arch")
    }
}

/// Provenance of a trained model. The data digest is not persisted in model files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingFingerprint {
    pub seed: u64,
    pub data_digest: Option<[u8; 32]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbnModel {
    pub rbms: Vec<RbmParams>,
    /// class-major: `softmax_w[class * last_hidden + j]`
    pub softmax_w: Vec<f64>,
    pub softmax_b: Vec<f64>,
    pub arch: DbnArch,
    pub fingerprint: TrainingFingerprint,
}

/// Per-layer mean-field activations (excluding the input) and class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub activations: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

/// Gradients of the mean cross-entropy, laid out like the model parameters.
/// Visible biases do not enter the upward pass and have no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub rbm_w: Vec<Vec<f64>>,
    pub rbm_c: Vec<Vec<f64>>,
    pub softmax_w: Vec<f64>,
    pub softmax_b: Vec<f64>,
}

/// RBMs at their seeded initialisation.
pub fn initial_rbms(arch: &DbnArch) -> Vec<RbmParams> {
    let mut rng = seed::rng(arch.rng_seed, &[TAG_INIT]);
    arch.layer_sizes
        .windows(2)
        .map(|pair| RbmParams::init(pair[0], pair[1], &mut rng))
        .collect()
}

/// Shuffled sample order for one pretraining epoch of one layer (0-based layer).
pub fn pretrain_order(arch: &DbnArch, layer: usize, epoch: u32, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(arch.rng_seed, &[TAG_PRETRAIN_ORDER, layer as u64, epoch as u64]));
    order
}

/// CD configuration for one minibatch of greedy pretraining.
pub fn pretrain_step_config(arch: &DbnArch, layer: usize, epoch: u32, batch: usize) -> CdConfig {
    CdConfig {
        epoch,
        layer_index: layer as u32 + 1,
        batch_size: arch.batch_size,
        rng_seed: seed::derive(arch.rng_seed, &[TAG_PRETRAIN_STEP, layer as u64, epoch as u64, batch as u64]),
    }
}

fn check_inputs(arch: &DbnArch, data: &[&[f64]]) -> Result<(), DbnError> {
    if data.is_empty() {
        return Err(DbnError::EmptyData);
    }
    for x in data {
        if x.len() != arch.input_size() {
            return Err(DbnError::DimensionMismatch { expected: arch.input_size(), actual: x.len() });
        }
    }
    Ok(())
}

/// Greedy layer-wise CD pretraining. Layer `t` trains on the mean-field hidden
/// probabilities that layer `t-1` produces for the data.
pub fn pretrain(arch: &DbnArch, data: &[InputVector]) -> Result<Vec<RbmParams>, DbnError> {
    arch.validate()?;
    let inputs: Vec<&[f64]> = data.iter().map(InputVector::as_slice).collect();
    check_inputs(arch, &inputs)?;

    let mut rbms = initial_rbms(arch);
    let mut layer_input: Vec<Vec<f64>> = inputs.iter().map(|x| x.to_vec()).collect();
    for (layer, params) in rbms.iter_mut().enumerate() {
        for epoch in 0..arch.pretrain_epochs {
            let order = pretrain_order(arch, layer, epoch, layer_input.len());
            for (bi, chunk) in order.chunks(arch.batch_size).enumerate() {
                let batch: Vec<&[f64]> = chunk.iter().map(|&i| layer_input[i].as_slice()).collect();
                let cfg = pretrain_step_config(arch, layer, epoch, bi);
                rbm::cd_k_step(params, &batch, &cfg)?;
            }
        }
        layer_input = layer_input.iter().map(|x| rbm::hidden_probs(params, x)).collect();
    }
    Ok(rbms)
}

impl DbnModel {
    /// Wraps pretrained RBMs with a zero-initialised softmax head.
    pub fn from_rbms(arch: DbnArch, rbms: Vec<RbmParams>) -> Result<Self, DbnError> {
        arch.validate()?;
        if rbms.len() != arch.n_hidden_layers() {
            return Err(DbnError::InvalidArch(format!(
                "{} RBMs for {} hidden layers",
                rbms.len(),
                arch.n_hidden_layers()
            )));
        }
        for (t, r) in rbms.iter().enumerate() {
            if r.n_visible != arch.layer_sizes[t] || r.n_hidden != arch.layer_sizes[t + 1] || !r.is_consistent() {
                return Err(DbnError::InvalidArch(format!("RBM {t} does not match the layer sizes")));
            }
        }
        let h = arch.last_hidden();
        Ok(Self {
            softmax_w: vec![0.0; arch.n_classes * h],
            softmax_b: vec![0.0; arch.n_classes],
            fingerprint: TrainingFingerprint { seed: arch.rng_seed, data_digest: None },
            rbms,
            arch,
        })
    }

    /// Untrained model: seeded RBM initialisation, zero softmax head.
    pub fn untrained(arch: DbnArch) -> Result<Self, DbnError> {
        arch.validate()?;
        let rbms = initial_rbms(&arch);
        Self::from_rbms(arch, rbms)
    }

    /// All-zero parameters everywhere.
    pub fn zeros(arch: DbnArch) -> Result<Self, DbnError> {
        arch.validate()?;
        let rbms = arch.layer_sizes.windows(2).map(|p| RbmParams::zeros(p[0], p[1])).collect();
        Self::from_rbms(arch, rbms)
    }

    pub fn input_size(&self) -> usize {
        self.arch.input_size()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), DbnError> {
        if x.len() != self.input_size() {
            return Err(DbnError::DimensionMismatch { expected: self.input_size(), actual: x.len() });
        }
        Ok(())
    }

    /// SHA-256 over all parameters in model-file order.
    pub fn parameter_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for r in &self.rbms {
            for x in r.w.iter().chain(&r.b).chain(&r.c) {
                h.update(x.to_le_bytes());
            }
        }
        for x in self.softmax_w.iter().chain(&self.softmax_b) {
            h.update(x.to_le_bytes());
        }
        h.finalize().into()
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn forward_unchecked(model: &DbnModel, x: &[f64]) -> Forward {
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(model.rbms.len());
    for (t, r) in model.rbms.iter().enumerate() {
        let input = if t == 0 { x } else { activations[t - 1].as_slice() };
        activations.push(rbm::hidden_probs(r, input));
    }
    let top = activations.last().expect("at least one hidden layer");
    let h = top.len();
    let logits: Vec<f64> = (0..model.arch.n_classes)
        .map(|k| {
            let row = &model.softmax_w[k * h..(k + 1) * h];
            model.softmax_b[k] + row.iter().zip(top).map(|(w, a)| w * a).sum::<f64>()
        })
        .collect();
    Forward { probs: softmax(&logits), activations }
}

pub fn forward(model: &DbnModel, x: &InputVector) -> Result<Forward, DbnError> {
    forward_slice(model, x.as_slice())
}

pub fn forward_slice(model: &DbnModel, x: &[f64]) -> Result<Forward, DbnError> {
    model.check_input(x)?;
    Ok(forward_unchecked(model, x))
}

/// Softmax probability of the malicious class.
pub fn predict_malicious(model: &DbnModel, x: &InputVector) -> Result<f64, DbnError> {
    Ok(forward(model, x)?.probs[MALICIOUS_CLASS])
}

/// Mean cross-entropy of a labelled batch.
pub fn loss(model: &DbnModel, batch: &[(&[f64], usize)]) -> Result<f64, DbnError> {
    let mut total = 0.0;
    for &(x, y) in batch {
        model.check_input(x)?;
        if y >= model.arch.n_classes {
            return Err(DbnError::UnknownLabel(y));
        }
        total -= forward_unchecked(model, x).probs[y].ln();
    }
    Ok(total / batch.len() as f64)
}

/// Backpropagates the mean cross-entropy of `batch` through the head and every RBM.
pub fn loss_and_gradients(model: &DbnModel, batch: &[(&[f64], usize)]) -> Result<(f64, Gradients), DbnError> {
    if batch.is_empty() {
        return Err(DbnError::EmptyData);
    }
    let n_layers = model.rbms.len();
    let h_top = model.arch.last_hidden();
    let n_classes = model.arch.n_classes;
    let mut g = Gradients {
        rbm_w: model.rbms.iter().map(|r| vec![0.0; r.w.len()]).collect(),
        rbm_c: model.rbms.iter().map(|r| vec![0.0; r.c.len()]).collect(),
        softmax_w: vec![0.0; model.softmax_w.len()],
        softmax_b: vec![0.0; model.softmax_b.len()],
    };
    let mut total = 0.0;
    for &(x, y) in batch {
        model.check_input(x)?;
        if y >= n_classes {
            return Err(DbnError::UnknownLabel(y));
        }
        let fwd = forward_unchecked(model, x);
        total -= fwd.probs[y].ln();

        // dL/dlogit = p - onehot(y)
        let dz: Vec<f64> = fwd
            .probs
            .iter()
            .enumerate()
            .map(|(k, p)| p - if k == y { 1.0 } else { 0.0 })
            .collect();
        let top = &fwd.activations[n_layers - 1];
        let mut d_act = vec![0.0; h_top];
        for (k, dzk) in dz.iter().enumerate() {
            g.softmax_b[k] += dzk;
            let row = &model.softmax_w[k * h_top..(k + 1) * h_top];
            let grow = &mut g.softmax_w[k * h_top..(k + 1) * h_top];
            for j in 0..h_top {
                grow[j] += dzk * top[j];
                d_act[j] += dzk * row[j];
            }
        }

        for t in (0..n_layers).rev() {
            let r = &model.rbms[t];
            let a = &fwd.activations[t];
            let input = if t == 0 { x } else { fwd.activations[t - 1].as_slice() };
            // a = sigm(u), u = -c - W·input
            let du: Vec<f64> = d_act.iter().zip(a).map(|(d, a)| d * a * (1.0 - a)).collect();
            let mut d_input = vec![0.0; r.n_visible];
            for (j, duj) in du.iter().enumerate() {
                g.rbm_c[t][j] -= duj;
                let row = &r.w[j * r.n_visible..(j + 1) * r.n_visible];
                let grow = &mut g.rbm_w[t][j * r.n_visible..(j + 1) * r.n_visible];
                for i in 0..r.n_visible {
                    grow[i] -= duj * input[i];
                    d_input[i] -= duj * row[i];
                }
            }
            d_act = d_input;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for x in g
        .rbm_w
        .iter_mut()
        .chain(g.rbm_c.iter_mut())
        .flat_map(|v| v.iter_mut())
        .chain(g.softmax_w.iter_mut())
        .chain(g.softmax_b.iter_mut())
    {
        *x *= scale;
    }
    Ok((total * scale, g))
}

/// Step size for the parameter block at 1-based `depth` (softmax head = hidden layers + 1).
pub fn finetune_rate(epoch: u32, depth: u32) -> f64 {
    rbm::pretrain_rate(epoch, depth)
}

fn apply_gradients(model: &mut DbnModel, g: &Gradients, epoch: u32) {
    for (t, r) in model.rbms.iter_mut().enumerate() {
        let rate = finetune_rate(epoch, t as u32 + 1);
        for (w, d) in r.w.iter_mut().zip(&g.rbm_w[t]) {
            *w -= rate * d;
        }
        for (c, d) in r.c.iter_mut().zip(&g.rbm_c[t]) {
            *c -= rate * d;
        }
    }
    let rate = finetune_rate(epoch, model.rbms.len() as u32 + 1);
    for (w, d) in model.softmax_w.iter_mut().zip(&g.softmax_w) {
        *w -= rate * d;
    }
    for (b, d) in model.softmax_b.iter_mut().zip(&g.softmax_b) {
        *b -= rate * d;
    }
}

/// Supervised fine-tuning of every layer by minibatch SGD on cross-entropy.
pub fn finetune(model: &DbnModel, data: &[(InputVector, usize)]) -> Result<DbnModel, DbnError> {
    if data.is_empty() {
        return Err(DbnError::EmptyData);
    }
    for (x, y) in data {
        model.check_input(x.as_slice())?;
        if *y >= model.arch.n_classes {
            return Err(DbnError::UnknownLabel(*y));
        }
    }
    let mut next = model.clone();
    let batch_size = model.arch.batch_size;
    for epoch in 0..model.arch.finetune_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seed::rng(model.arch.rng_seed, &[TAG_FINETUNE_ORDER, epoch as u64]));
        for chunk in order.chunks(batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| (data[i].0.as_slice(), data[i].1)).collect();
            let (_, g) = loss_and_gradients(&next, &batch)?;
            apply_gradients(&mut next, &g, epoch);
        }
    }
    Ok(next)
}

/// SHA-256 over labelled training data (values as f64 bits, then the label).
pub fn data_digest(data: &[(InputVector, usize)]) -> [u8; 32] {
    let mut h = Sha256::new();
    for (x, y) in data {
        for v in x.as_slice() {
            h.update(v.to_le_bytes());
        }
        h.update((*y as u64).to_le_bytes());
    }
    h.finalize().into()
}

/// Pretrain on the inputs, attach a zero softmax head, fine-tune on the labels.
pub fn train(arch: &DbnArch, data: &[(InputVector, usize)]) -> Result<DbnModel, DbnError> {
    let inputs: Vec<InputVector> = data.iter().map(|(x, _)| x.clone()).collect();
    let rbms = pretrain(arch, &inputs)?;
    let model = DbnModel::from_rbms(arch.clone(), rbms)?;
    let mut model = finetune(&model, data)?;
    model.fingerprint.data_digest = Some(data_digest(data));
    Ok(model)
}

pub fn encode_model(model: &DbnModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&model.fingerprint.seed.to_le_bytes());
    out.extend_from_slice(&(model.arch.layer_sizes.len() as u32).to_le_bytes());
    for &n in &model.arch.layer_sizes {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.arch.n_classes as u32).to_le_bytes());
    for r in &model.rbms {
        for x in r.w.iter().chain(&r.b).chain(&r.c) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for x in model.softmax_w.iter().chain(&model.softmax_b) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DbnError> {
        let end = self.pos.checked_add(n).ok_or(DbnError::Malformed)?;
        let s = self.buf.get(self.pos..end).ok_or(DbnError::Malformed)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DbnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DbnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, DbnError> {
        let bytes = self.take(n.checked_mul(8).ok_or(DbnError::Malformed)?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_model(buf: &[u8]) -> Result<DbnModel, DbnError> {
    if buf.len() < 4 || &buf[..4] != MODEL_MAGIC {
        return Err(DbnError::BadMagic);
    }
    if buf.len() < 4 + 4 + 32 {
        return Err(DbnError::Malformed);
    }
    let (payload, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(DbnError::ChecksumMismatch);
    }
    let mut cur = Cursor { buf: payload, pos: 4 };
    let version = cur.u32()?;
    if version != MODEL_VERSION {
        return Err(DbnError::VersionUnsupported(version));
    }
    let seed = cur.u64()?;
    let n_layers = cur.u32()? as usize;
    if n_layers > payload.len() / 4 {
        return Err(DbnError::Malformed);
    }
    let layer_sizes = (0..n_layers)
        .map(|_| cur.u32().map(|n| n as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let n_classes = cur.u32()? as usize;
    let arch = DbnArch { layer_sizes, n_classes, rng_seed: seed, ..DbnArch::default() };
    arch.validate().map_err(|_| DbnError::Malformed)?;

    let mut rbms = Vec::with_capacity(arch.n_hidden_layers());
    for pair in arch.layer_sizes.windows(2) {
        let (nv, nh) = (pair[0], pair[1]);
        let w = cur.f64s(nv.checked_mul(nh).ok_or(DbnError::Malformed)?)?;
        let b = cur.f64s(nv)?;
        let c = cur.f64s(nh)?;
        rbms.push(RbmParams { n_visible: nv, n_hidden: nh, w, b, c });
    }
    let softmax_w = cur.f64s(n_classes * arch.last_hidden())?;
    let softmax_b = cur.f64s(n_classes)?;
    if cur.pos != payload.len() {
        return Err(DbnError::Malformed);
    }
    Ok(DbnModel {
        rbms,
        softmax_w,
        softmax_b,
        fingerprint: TrainingFingerprint { seed, data_digest: None },
        arch,
    })
}

pub fn save_model(model: &DbnModel, path: impl AsRef<Path>) -> Result<(), DbnError> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DbnModel, DbnError> {
    decode_model(&fs::read(path)?)
}
