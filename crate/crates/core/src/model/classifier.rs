use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicBool, Ordering};

use super::loss::{argmax, loss_and_grad, LossKind};
use super::network::{Network, ParamStore, INPUT, LOGITS};
use super::spec::ModelSpec;
use super::ModelError;
use crate::autodiff::{Bindings, Session};
use crate::crypto::{Cipher, CryptoError, EncryptionKey, ImageU8, Transform};
use crate::tensor::Tensor;

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

/// Accuracies recorded at the end of training.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainingSummary {
    pub epochs: usize,
    pub train_accuracy: Option<f32>,
    pub test_accuracy: Option<f32>,
}

/// A network with its parameters and, optionally, the key of the block
/// transform that every input passes through before reaching the network.
#[derive(Debug, Clone)]
pub struct Classifier {
    spec: ModelSpec,
    network: Network,
    params: ParamStore,
    cipher: Option<Cipher>,
    train_seed: u64,
    summary: TrainingSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// `[N, classes]`
    pub logits: Tensor,
}

/// Per-image loss values and the gradient of their sum with respect to the
/// `[0,1]` input images.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradient {
    pub losses: Vec<f32>,
    pub logits: Tensor,
    pub grad: Tensor,
}

impl Classifier {
    pub fn new(
        spec: ModelSpec,
        params: ParamStore,
        key: Option<EncryptionKey>,
        train_seed: u64,
        summary: TrainingSummary,
    ) -> Result<Self, ModelError> {
        let network = Network::build(&spec.network())?;
        for (name, shape) in network.param_shapes() {
            match params.get(name) {
                Some(t) if t.shape() == shape => {}
                Some(t) => {
                    return Err(ModelError::ParamMismatch(alloc::format!(
                        "`{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(ModelError::ParamMismatch(alloc::format!("missing `{name}`"))),
            }
        }
        if params.len() != network.param_shapes().count() {
            return Err(ModelError::ParamMismatch("unexpected extra parameters".into()));
        }
        let cipher = key
            .map(|k| {
                if spec.height % k.block_size != 0 || spec.width % k.block_size != 0 {
                    return Err(CryptoError::NotDivisible {
                        block: k.block_size,
                        height: spec.height,
                        width: spec.width,
                    });
                }
                Cipher::new(k, spec.channels)
            })
            .transpose()?;
        Ok(Classifier {
            spec,
            network,
            params,
            cipher,
            train_seed,
            summary,
        })
    }

    /// Freshly initialized model.
    pub fn init(spec: ModelSpec, seed: u64, key: Option<EncryptionKey>) -> Result<Self, ModelError> {
        let params = Network::build(&spec.network())?.init_params(seed);
        Classifier::new(spec, params, key, seed, TrainingSummary::default())
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn key(&self) -> Option<&EncryptionKey> {
        self.cipher.as_ref().map(Cipher::key)
    }

    pub fn cipher(&self) -> Option<&Cipher> {
        self.cipher.as_ref()
    }

    pub fn train_seed(&self) -> u64 {
        self.train_seed
    }

    pub fn summary(&self) -> &TrainingSummary {
        &self.summary
    }

    pub(crate) fn set_summary(&mut self, summary: TrainingSummary) {
        self.summary = summary;
    }

    /// Same parameters, different (or no) encryption front-end.
    pub fn with_key(&self, key: Option<EncryptionKey>) -> Result<Self, ModelError> {
        Classifier::new(self.spec, self.params.clone(), key, self.train_seed, self.summary)
    }

    /// True unless the front-end is FFX.
    pub fn supports_gradients(&self) -> bool {
        self.key().is_none_or(|k| k.transform != Transform::Ffx)
    }

    fn check_input(&self, images: &Tensor) -> Result<usize, ModelError> {
        let s = &self.spec;
        match images.shape() {
            &[n, c, h, w] if c == s.channels && h == s.height && w == s.width => Ok(n),
            other => Err(ModelError::InputShape {
                expected: vec![0, s.channels, s.height, s.width],
                got: other.to_vec(),
            }),
        }
    }

    /// The tensor the network actually sees: clamped to `[0,1]` and, with a
    /// key, quantized, encrypted and rescaled.
    pub fn network_input(&self, images: &Tensor) -> Result<Tensor, ModelError> {
        self.check_input(images)?;
        let mut x = images.clone();
        let mut clamped = false;
        for v in x.data_mut() {
            if !(0.0..=1.0).contains(v) {
                *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                clamped = true;
            }
        }
        if clamped && !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
            log::warn!("classifier input outside [0,1] was clamped");
        }
        let Some(cipher) = &self.cipher else {
            return Ok(x);
        };
        let s = &self.spec;
        let len = s.input_len();
        for chunk in x.data_mut().chunks_exact_mut(len) {
            let img = ImageU8::from_unit_chw(s.channels, s.height, s.width, chunk)?;
            chunk.copy_from_slice(&cipher.encrypt(&img)?.to_unit_chw());
        }
        Ok(x)
    }

    /// Runs the network on an input that is already in network space.
    pub(crate) fn raw_logits(&self, net_input: &Tensor) -> Result<Tensor, ModelError> {
        let mut b = Bindings::new();
        b.bind(INPUT, net_input, false);
        for (name, t) in &self.params {
            b.bind(name, t, false);
        }
        let graph = &self.network.inference;
        let mut session = Session::new(graph);
        session.eval(&b)?;
        Ok(session.output(LOGITS)?.clone())
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor, ModelError> {
        let x = self.network_input(images)?;
        self.raw_logits(&x)
    }

    pub fn predict_batch(&self, images: &Tensor) -> Result<Prediction, ModelError> {
        let logits = self.logits(images)?;
        let k = self.spec.num_classes;
        let labels = logits.data().chunks_exact(k).map(argmax).collect();
        Ok(Prediction { labels, logits })
    }

    /// Vector-Jacobian product through the whole pipeline: `upstream` maps the
    /// logits to the gradient of the objective with respect to them, and the
    /// result is that objective's gradient with respect to the `[0,1]` input.
    pub fn vjp<F>(&self, images: &Tensor, upstream: F) -> Result<(Tensor, Tensor), ModelError>
    where
        F: FnOnce(&Tensor) -> Result<Tensor, ModelError>,
    {
        if !self.supports_gradients() {
            return Err(ModelError::Crypto(CryptoError::GradientUnavailable));
        }
        let n = self.check_input(images)?;
        let x = self.network_input(images)?;
        let mut b = Bindings::new();
        b.bind(INPUT, &x, true);
        for (name, t) in &self.params {
            b.bind(name, t, false);
        }
        let graph = &self.network.inference;
        let mut session = Session::new(graph);
        session.eval(&b)?;
        let logits = session.output(LOGITS)?.clone();
        let seed = upstream(&logits)?;
        let out = graph.output_id(LOGITS).expect("logits output");
        let mut grads = session.backward_from(out, seed)?;
        let mut g = grads.take(INPUT).expect("input requires grad");
        if let Some(cipher) = &self.cipher {
            let s = &self.spec;
            let (plane, len) = (s.height * s.width, s.input_len());
            let mut hwc = vec![0.0f32; len];
            for chunk in g.data_mut().chunks_exact_mut(len) {
                for c in 0..s.channels {
                    for p in 0..plane {
                        hwc[p * s.channels + c] = chunk[c * plane + p];
                    }
                }
                let back = cipher.pullback(s.height, s.width, &hwc)?;
                for c in 0..s.channels {
                    for p in 0..plane {
                        chunk[c * plane + p] = back[p * s.channels + c];
                    }
                }
            }
        }
        debug_assert_eq!(g.shape()[0], n);
        Ok((logits, g))
    }

    /// Gradient of the summed per-image loss with respect to the input.
    /// `targets` is required by the targeted losses.
    pub fn input_gradient(
        &self,
        images: &Tensor,
        loss: LossKind,
        labels: &[usize],
        targets: Option<&[usize]>,
    ) -> Result<InputGradient, ModelError> {
        let n = self.check_input(images)?;
        let k = self.spec.num_classes;
        if labels.len() != n || targets.is_some_and(|t| t.len() != n) {
            return Err(ModelError::InvalidConfig("one label (and target) per image is required".into()));
        }
        if matches!(loss, LossKind::DlrTargeted | LossKind::LogitDifference) && targets.is_none() {
            return Err(ModelError::InvalidConfig("targeted loss needs target classes".into()));
        }
        if let Some(&bad) = labels.iter().chain(targets.unwrap_or(&[])).find(|&&l| l >= k) {
            return Err(ModelError::LabelOutOfRange { label: bad, classes: k });
        }
        let mut losses = Vec::with_capacity(n);
        let (logits, grad) = self.vjp(images, |z| {
            let mut seed = Vec::with_capacity(z.len());
            for (i, row) in z.data().chunks_exact(k).enumerate() {
                let t = targets.map_or(0, |t| t[i]);
                let (v, g) = loss_and_grad(loss, row, labels[i], t);
                losses.push(v);
                seed.extend(g);
            }
            Ok(Tensor::new(z.shape().to_vec(), seed)?)
        })?;
        Ok(InputGradient { losses, logits, grad })
    }

    /// Fraction of correctly classified images, evaluated in batches.
    pub fn accuracy(&self, data: &super::LabeledImages, batch: usize) -> Result<f32, ModelError> {
        if data.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut correct = 0usize;
        for chunk in idx.chunks(batch.max(1)) {
            let pred = self.predict_batch(&data.batch(chunk)?)?;
            correct += chunk
                .iter()
                .zip(&pred.labels)
                .filter(|(&i, &p)| data.labels()[i] == p)
                .count();
        }
        Ok(correct as f32 / data.len() as f32)
    }
}
