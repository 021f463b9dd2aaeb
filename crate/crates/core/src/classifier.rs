//! Residual CNN over scalogram tensors: construction, training and inference.

use std::path::Path;

use ndarray::{Array3, ArrayView3};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::eeg_io::{Label, N_CHANNELS};
use crate::importance::{noise_planes, predict_perturbed_by_copy, ChannelPerturbation, Replacement};
use crate::nn::init::kaiming_uniform;
use crate::nn::wgts::{decode_wgts, encode_wgts};
use crate::nn::ops::conv2d_forward;
use crate::nn::{adam_step, AdamConfig, AdamState, Graph, LayerSpec, NnError, ParamStore, Tensor, Var};
use crate::scalogram::Scalogram;

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;
const INFERENCE_CHUNK: usize = 32;
/// Largest cached stem activation (elements) for perturbed inference.
const STEM_CACHE_LIMIT: usize = 1 << 27;

#[derive(Debug, thiserror::Error)]
pub enum ClassifierError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("training set holds only one class")]
    SingleClassDataset,
    #[error("training set has an unlabelled scalogram (subject {0})")]
    Unlabelled(String),
    #[error("input shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("weights do not fit the model: {0}")]
    Weights(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// `(n_scales, time_bins)`.
    pub input_hw: (usize, usize),
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: N_CHANNELS,
            input_hw: (64, 100),
            stage_widths: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
            n_classes: 2,
        }
    }
}

impl ModelConfig {
    /// Scale every stage width by `factor` (rounded, at least 1).
    pub fn with_width_factor(mut self, factor: f64) -> Self {
        for w in &mut self.stage_widths {
            *w = ((*w as f64 * factor).round() as usize).max(1);
        }
        self
    }

    pub fn with_input_hw(mut self, n_scales: usize, time_bins: usize) -> Self {
        self.input_hw = (n_scales, time_bins);
        self
    }

    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::BadConfig(m.to_string()));
        if self.in_channels == 0 || self.input_hw.0 == 0 || self.input_hw.1 == 0 {
            return bad("input dimensions must be positive");
        }
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return bad("stage widths must be positive");
        }
        if self.stage_widths.windows(2).any(|w| w[1] < w[0]) {
            return bad("stage widths must be non-decreasing");
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks_per_stage must be at least 1");
        }
        if self.n_classes < 2 {
            return bad("need at least two classes");
        }
        // every layer must accept its input
        self.layer_shapes().map(|_| ())
    }

    /// Activation shapes `[C, H, W]` after the stem conv, the stem pool and
    /// each stage, then the logits shape `[n_classes]`.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>, ClassifierError> {
        let (h, w) = self.input_hw;
        let mut dims = vec![1, self.in_channels, h, w];
        let mut shapes = Vec::new();
        let step = |spec: LayerSpec, dims: &mut Vec<usize>| -> Result<(), ClassifierError> {
            *dims = spec
                .output_shape(dims)
                .map_err(|e| ClassifierError::BadConfig(e.to_string()))?;
            Ok(())
        };
        let stem = self.stage_widths[0];
        step(conv(self.in_channels, stem, 7, 2, 3), &mut dims)?;
        shapes.push(dims[1..].to_vec());
        step(LayerSpec::MaxPool2d { kernel: 3, stride: 2, pad: 1 }, &mut dims)?;
        shapes.push(dims[1..].to_vec());
        let mut c = stem;
        for (si, &width) in self.stage_widths.iter().enumerate() {
            for bi in 0..self.blocks_per_stage {
                let stride = block_stride(si, bi);
                step(conv(c, width, 3, stride, 1), &mut dims)?;
                step(conv(width, width, 3, 1, 1), &mut dims)?;
                c = width;
            }
            shapes.push(dims[1..].to_vec());
        }
        step(LayerSpec::GlobalAvgPool, &mut dims)?;
        step(
            LayerSpec::Linear {
                inputs: c,
                outputs: self.n_classes,
            },
            &mut dims,
        )?;
        shapes.push(dims[1..].to_vec());
        Ok(shapes)
    }
}

fn conv(in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_c,
        out_c,
        kernel,
        stride,
        pad,
    }
}

fn block_stride(stage: usize, block: usize) -> usize {
    if stage > 0 && block == 0 {
        2
    } else {
        1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ClassifierError::BadConfig(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ClassifierError::BadConfig("lr must be positive".into()));
        }
        Ok(())
    }
}

/// One training-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_acc: f64,
}

/// Training log as JSON lines.
pub fn log_to_jsonl(log: &[EpochLog]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
        .collect()
}

/// Anything that maps scalogram tensors `[19 × S × T]` to class labels.
pub trait ScalogramClassifier: Sync {
    fn predict_labels(&self, inputs: &[ArrayView3<'_, f32>]) -> Result<Vec<Label>, ClassifierError>;

    /// Labels for `inputs` under each perturbation in turn.
    fn predict_perturbed(
        &self,
        inputs: &[ArrayView3<'_, f32>],
        perturbations: &[ChannelPerturbation],
    ) -> Result<Vec<Vec<Label>>, ClassifierError> {
        predict_perturbed_by_copy(self, inputs, perturbations)
    }

    /// Heuristic flag for a model that was never trained.
    fn looks_untrained(&self) -> bool {
        false
    }
}

struct Bn {
    gamma: usize,
    beta: usize,
    /// Index into the buffer store; running variance is the next entry.
    running_mean: usize,
}

struct ConvBn {
    weight: usize,
    stride: usize,
    pad: usize,
    bn: Bn,
}

struct Block {
    conv1: ConvBn,
    conv2: ConvBn,
    down: Option<ConvBn>,
}

/// ResNet-18-style network: 7×7/2 stem, 3×3/2 max-pool, stages of basic
/// blocks, global average pooling and a linear head.
pub struct ResNet {
    cfg: ModelConfig,
    params: ParamStore<f32>,
    buffers: ParamStore<f32>,
    stem: ConvBn,
    blocks: Vec<Block>,
    fc_weight: usize,
    fc_bias: usize,
}

struct Forward {
    logits: Var,
    /// Batch moments per batch norm, keyed by running-mean buffer index.
    moments: Vec<(usize, crate::nn::BatchMoments<f32>)>,
}

impl ResNet {
    /// Fresh network with Kaiming-uniform conv/linear weights, unit BN scale
    /// and zero shifts.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ClassifierError> {
        cfg.validate()?;
        let mut rng = SplitMix64::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();

        let mut conv_bn = |name: &str, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize| {
            let fan_in = in_c * k * k;
            let weight = params.insert(
                format!("{name}.weight"),
                kaiming_uniform(&[out_c, in_c, k, k], fan_in, &mut rng),
            );
            let bn_name = name.replace("conv", "bn");
            let gamma = params.insert(format!("{bn_name}.gamma"), Tensor::full(&[out_c], 1.0));
            let beta = params.insert(format!("{bn_name}.beta"), Tensor::zeros(&[out_c]));
            let running_mean = buffers.insert(format!("{bn_name}.running_mean"), Tensor::zeros(&[out_c]));
            buffers.insert(format!("{bn_name}.running_var"), Tensor::full(&[out_c], 1.0));
            ConvBn {
                weight,
                stride,
                pad,
                bn: Bn {
                    gamma,
                    beta,
                    running_mean,
                },
            }
        };

        let stem_w = cfg.stage_widths[0];
        let stem = conv_bn("stem.conv", cfg.in_channels, stem_w, 7, 2, 3);
        let mut blocks = Vec::new();
        let mut c = stem_w;
        for (si, &width) in cfg.stage_widths.iter().enumerate() {
            for bi in 0..cfg.blocks_per_stage {
                let stride = block_stride(si, bi);
                let p = format!("stage{}.{}", si + 1, bi);
                let conv1 = conv_bn(&format!("{p}.conv1"), c, width, 3, stride, 1);
                let conv2 = conv_bn(&format!("{p}.conv2"), width, width, 3, 1, 1);
                let down = (stride != 1 || c != width).then(|| conv_bn(&format!("{p}.down.conv"), c, width, 1, stride, 0));
                blocks.push(Block { conv1, conv2, down });
                c = width;
            }
        }
        let fc_weight = params.insert("fc.weight", kaiming_uniform(&[cfg.n_classes, c], c, &mut rng));
        let fc_bias = params.insert("fc.bias", Tensor::zeros(&[cfg.n_classes]));
        Ok(ResNet {
            cfg,
            params,
            buffers,
            stem,
            blocks,
            fc_weight,
            fc_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore<f32> {
        &self.buffers
    }

    /// Trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.params.element_count()
    }

    fn bn(&self, g: &mut Graph<f32>, vars: &[Var], x: Var, bn: &Bn, train: bool, out: &mut Forward) -> Result<Var, ClassifierError> {
        let (gamma, beta) = (vars[bn.gamma], vars[bn.beta]);
        if train {
            let (y, m) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
            out.moments.push((bn.running_mean, m));
            Ok(y)
        } else {
            let rm = self.buffers.at(bn.running_mean).data();
            let rv = self.buffers.at(bn.running_mean + 1).data();
            Ok(g.batch_norm_eval(x, gamma, beta, rm, rv, BN_EPS)?)
        }
    }

    /// conv-BN-ReLU-conv-BN plus the (possibly projected) input, then ReLU.
    fn block(&self, g: &mut Graph<f32>, vars: &[Var], h: Var, b: &Block, train: bool, out: &mut Forward) -> Result<Var, ClassifierError> {
        let mut r = self.conv_bn(g, vars, h, &b.conv1, train, out)?;
        r = g.relu(r);
        r = self.conv_bn(g, vars, r, &b.conv2, train, out)?;
        let skip = match &b.down {
            Some(d) => self.conv_bn(g, vars, h, d, train, out)?,
            None => h,
        };
        let s = g.add(r, skip)?;
        Ok(g.relu(s))
    }

    fn conv_bn(&self, g: &mut Graph<f32>, vars: &[Var], x: Var, l: &ConvBn, train: bool, out: &mut Forward) -> Result<Var, ClassifierError> {
        let y = g.conv2d(x, vars[l.weight], None, l.stride, l.pad)?;
        self.bn(g, vars, y, &l.bn, train, out)
    }

    fn forward(&self, g: &mut Graph<f32>, vars: &[Var], x: Var, train: bool) -> Result<Forward, ClassifierError> {
        let stem = g.conv2d(x, vars[self.stem.weight], None, self.stem.stride, self.stem.pad)?;
        self.forward_after_stem_conv(g, vars, stem, train)
    }

    /// Everything after the stem convolution, starting from its output.
    fn forward_after_stem_conv(&self, g: &mut Graph<f32>, vars: &[Var], stem: Var, train: bool) -> Result<Forward, ClassifierError> {
        let mut out = Forward {
            logits: stem,
            moments: Vec::new(),
        };
        let mut h = self.bn(g, vars, stem, &self.stem.bn, train, &mut out)?;
        h = g.relu(h);
        h = g.max_pool2d(h, 3, 2, 1)?;
        for b in &self.blocks {
            h = self.block(g, vars, h, b, train, &mut out)?;
        }
        let pooled = g.global_avg_pool(h)?;
        out.logits = g.linear(pooled, vars[self.fc_weight], vars[self.fc_bias])?;
        Ok(out)
    }

    fn check_input(&self, x: &ArrayView3<'_, f32>) -> Result<(), ClassifierError> {
        let want = [self.cfg.in_channels, self.cfg.input_hw.0, self.cfg.input_hw.1];
        if x.shape() != want {
            return Err(ClassifierError::ShapeMismatch(format!(
                "model takes {want:?}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    fn stack(&self, inputs: &[ArrayView3<'_, f32>]) -> Result<Tensor<f32>, ClassifierError> {
        let (h, w) = self.cfg.input_hw;
        let mut data = Vec::with_capacity(inputs.len() * self.cfg.in_channels * h * w);
        for x in inputs {
            self.check_input(x)?;
            data.extend(x.iter().copied());
        }
        Ok(Tensor::from_vec(&[inputs.len(), self.cfg.in_channels, h, w], data)?)
    }

    /// Eval-mode logits `[B, n_classes]` for a stacked batch.
    pub fn logits(&self, batch: Tensor<f32>) -> Result<Tensor<f32>, ClassifierError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| g.input(t.clone())).collect();
        let x = g.input(batch);
        let f = self.forward(&mut g, &vars, x, false)?;
        Ok(g.value(f.logits).clone())
    }

    /// Class probabilities per input, computed in eval mode.
    pub fn predict_proba(&self, inputs: &[ArrayView3<'_, f32>]) -> Result<Vec<Vec<f64>>, ClassifierError> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(INFERENCE_CHUNK) {
            let logits = self.logits(self.stack(chunk)?)?;
            for row in logits.data().chunks_exact(self.cfg.n_classes) {
                out.push(softmax64(row));
            }
        }
        Ok(out)
    }

    pub fn predict_label(&self, input: ArrayView3<'_, f32>) -> Result<Label, ClassifierError> {
        let p = self.predict_proba(&[input])?;
        Ok(label_from_proba(&p[0]))
    }

    fn stem_output_dims(&self, batch: usize) -> Vec<usize> {
        let (h, w) = self.cfg.input_hw;
        conv(self.cfg.in_channels, self.cfg.stage_widths[0], 7, self.stem.stride, self.stem.pad)
            .output_shape(&[batch.max(1), self.cfg.in_channels, h, w])
            .expect("validated at construction")
    }

    /// Stem convolution of single-channel planes `[B, 1, H, W]` with the
    /// weights of input channel `c`.
    fn stem_channel_conv(&self, planes: &Tensor<f32>, c: usize) -> Result<Tensor<f32>, ClassifierError> {
        let w = self.params.at(self.stem.weight);
        let [out_c, in_c, k, _] = w.nchw()?;
        let slice: Vec<f32> = (0..out_c)
            .flat_map(|o| w.data()[(o * in_c + c) * k * k..][..k * k].iter().copied())
            .collect();
        let wc = Tensor::from_vec(&[out_c, 1, k, k], slice)?;
        Ok(conv2d_forward(planes, &wc, None, self.stem.stride, self.stem.pad)?)
    }

    fn logits_after_stem_conv(&self, stem: Tensor<f32>) -> Result<Tensor<f32>, ClassifierError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| g.input(t.clone())).collect();
        let x = g.input(stem);
        let f = self.forward_after_stem_conv(&mut g, &vars, x, false)?;
        Ok(g.value(f.logits).clone())
    }

    /// One Adam step on a mini-batch; returns the batch loss and the number
    /// of correct training-mode predictions.
    fn train_step(
        &mut self,
        batch: Tensor<f32>,
        labels: &[usize],
        state: &mut AdamState<f32>,
        adam: &AdamConfig,
    ) -> Result<(f64, usize), ClassifierError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| g.param(t.clone())).collect();
        let x = g.input(batch);
        let f = self.forward(&mut g, &vars, x, true)?;
        let correct = g
            .value(f.logits)
            .data()
            .chunks_exact(self.cfg.n_classes)
            .zip(labels)
            .filter(|(row, &y)| argmax_tie_low(row) == y)
            .count();
        let loss = g.cross_entropy(f.logits, labels)?;
        let loss_value = g.value(loss).item() as f64;
        let mut grads = g.backward(loss)?;
        let grads: Vec<Tensor<f32>> = vars.iter().map(|&v| grads.take(&g, v)).collect();
        adam_step(self.params.tensors_mut(), &grads, state, adam)?;

        for (idx, m) in f.moments {
            let n = m.count as f32;
            let unbias = if m.count > 1 { n / (n - 1.0) } else { 1.0 };
            let rm = self.buffers.at_mut(idx).data_mut();
            for (r, &v) in rm.iter_mut().zip(&m.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
            let rv = self.buffers.at_mut(idx + 1).data_mut();
            for (r, &v) in rv.iter_mut().zip(&m.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
        Ok((loss_value, correct))
    }

    /// Mini-batch Adam on cross-entropy. The returned log has one record per
    /// epoch.
    pub fn train(&mut self, train_set: &[Scalogram], cfg: &TrainConfig) -> Result<Vec<EpochLog>, ClassifierError> {
        self.train_with(train_set, cfg, |_| {})
    }

    /// [`ResNet::train`] with a callback after every epoch.
    pub fn train_with(
        &mut self,
        train_set: &[Scalogram],
        cfg: &TrainConfig,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>, ClassifierError> {
        cfg.validate()?;
        if train_set.is_empty() {
            return Err(ClassifierError::EmptyDataset);
        }
        let labels: Vec<usize> = train_set
            .iter()
            .map(|s| {
                s.label
                    .map(Label::as_index)
                    .ok_or_else(|| ClassifierError::Unlabelled(s.subject_id.clone()))
            })
            .collect::<Result<_, _>>()?;
        if labels.iter().all(|&l| l == labels[0]) {
            return Err(ClassifierError::SingleClassDataset);
        }
        for s in train_set {
            self.check_input(&s.values.view())?;
        }

        let adam = AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(self.params.tensors());
        let mut rng = SplitMix64::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut log = Vec::with_capacity(cfg.epochs);
        for epoch in 1..=cfg.epochs {
            if cfg.shuffle {
                order.shuffle(&mut rng);
            }
            let (mut loss_sum, mut correct) = (0.0, 0);
            for idx in order.chunks(cfg.batch_size) {
                let views: Vec<_> = idx.iter().map(|&i| train_set[i].values.view()).collect();
                let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let (loss, c) = self.train_step(self.stack(&views)?, &batch_labels, &mut state, &adam)?;
                loss_sum += loss * idx.len() as f64;
                correct += c;
            }
            let record = EpochLog {
                epoch,
                mean_loss: loss_sum / train_set.len() as f64,
                train_acc: correct as f64 / train_set.len() as f64,
            };
            on_epoch(&record);
            log.push(record);
        }
        Ok(log)
    }

    /// Parameters followed by batch-norm buffers, in WGTS v1 layout.
    pub fn to_wgts(&self) -> Vec<u8> {
        encode_wgts(self.params.iter().chain(self.buffers.iter()))
    }

    /// Load tensors produced by [`ResNet::to_wgts`] into a network built from
    /// `cfg`. Every tensor must be present with matching dims.
    pub fn from_wgts(cfg: ModelConfig, bytes: &[u8]) -> Result<Self, ClassifierError> {
        let mut net = ResNet::new(cfg, 0)?;
        let mut loaded = decode_wgts(bytes)?;
        let expected = net.params.len() + net.buffers.len();
        if loaded.len() != expected {
            return Err(ClassifierError::Weights(format!(
                "{} tensors in file, model has {expected}",
                loaded.len()
            )));
        }
        for (name, t) in loaded.drain(..) {
            let slot = match net.params.get_mut(&name) {
                Some(s) => s,
                None => net
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| ClassifierError::Weights(format!("unknown tensor {name}")))?,
            };
            if slot.dims() != t.dims() {
                return Err(ClassifierError::Weights(format!(
                    "{name}: file has {:?}, model wants {:?}",
                    t.dims(),
                    slot.dims()
                )));
            }
            *slot = t;
        }
        Ok(net)
    }

    pub fn save_wgts(&self, path: &Path) -> Result<(), ClassifierError> {
        std::fs::write(path, self.to_wgts()).map_err(|source| ClassifierError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_wgts(cfg: ModelConfig, path: &Path) -> Result<Self, ClassifierError> {
        let bytes = std::fs::read(path).map_err(|source| ClassifierError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_wgts(cfg, &bytes)
    }
}

impl ScalogramClassifier for ResNet {
    fn predict_labels(&self, inputs: &[ArrayView3<'_, f32>]) -> Result<Vec<Label>, ClassifierError> {
        Ok(self.predict_proba(inputs)?.iter().map(|p| label_from_proba(p)).collect())
    }

    /// The stem convolution is linear in each input channel, so replacing
    /// channel `c` changes its output by `conv(new_c) − conv(old_c)`. The
    /// full stem output is computed once and patched per perturbation; only
    /// the layers after the stem run again.
    fn predict_perturbed(
        &self,
        inputs: &[ArrayView3<'_, f32>],
        perturbations: &[ChannelPerturbation],
    ) -> Result<Vec<Vec<Label>>, ClassifierError> {
        let [_, _, oh, ow] = *self.stem_output_dims(inputs.len()) else {
            unreachable!()
        };
        let stem_c = self.cfg.stage_widths[0];
        if inputs.is_empty() || inputs.len() * stem_c * oh * ow > STEM_CACHE_LIMIT {
            return predict_perturbed_by_copy(self, inputs, perturbations);
        }
        let batch = self.stack(inputs)?;
        let weight = self.params.at(self.stem.weight);
        let full = conv2d_forward(&batch, weight, None, self.stem.stride, self.stem.pad)?;
        let mut channels: Vec<usize> = perturbations.iter().map(|p| p.channel).collect();
        channels.sort_unstable();
        channels.dedup();
        let contributions: Vec<(usize, Tensor<f32>)> = channels
            .into_iter()
            .map(|c| Ok((c, self.stem_channel_conv(&batch_channel(&batch, c), c)?)))
            .collect::<Result<_, ClassifierError>>()?;
        let per_sample = stem_c * oh * ow;
        perturbations
            .par_iter()
            .map(|p| {
                let own = &contributions.iter().find(|(c, _)| *c == p.channel).expect("computed above").1;
                let mut pre = full.clone();
                match &p.replacement {
                    Replacement::Permutation(perm) => {
                        for (i, &src) in perm.iter().enumerate() {
                            if src == i {
                                continue;
                            }
                            let dst = &mut pre.data_mut()[i * per_sample..][..per_sample];
                            let old = &own.data()[i * per_sample..][..per_sample];
                            let new = &own.data()[src * per_sample..][..per_sample];
                            for ((d, &o), &n) in dst.iter_mut().zip(old).zip(new) {
                                *d = *d - o + n;
                            }
                        }
                    }
                    Replacement::Noise { seed } => {
                        let (h, w) = self.cfg.input_hw;
                        let planes: Vec<f32> = noise_planes(inputs.len(), h, w, *seed).into_iter().flatten().collect();
                        let noise = Tensor::from_vec(&[inputs.len(), 1, h, w], planes)?;
                        let new = self.stem_channel_conv(&noise, p.channel)?;
                        for ((d, &o), &n) in pre.data_mut().iter_mut().zip(own.data()).zip(new.data()) {
                            *d = *d - o + n;
                        }
                    }
                }
                let mut labels = Vec::with_capacity(inputs.len());
                for chunk in pre.data().chunks(INFERENCE_CHUNK * per_sample) {
                    let n = chunk.len() / per_sample;
                    let t = Tensor::from_vec(&[n, stem_c, oh, ow], chunk.to_vec())?;
                    let logits = self.logits_after_stem_conv(t)?;
                    labels.extend(logits.data().chunks_exact(self.cfg.n_classes).map(|r| {
                        Label::from_index(argmax_tie_low(r)).unwrap_or(Label::Control)
                    }));
                }
                Ok(labels)
            })
            .collect()
    }

    fn looks_untrained(&self) -> bool {
        self.params.at(self.fc_weight).data().iter().all(|&v| v == 0.0)
            && self.params.at(self.fc_bias).data().iter().all(|&v| v == 0.0)
    }
}

/// Channel `c` of a stacked batch as `[B, 1, H, W]`.
fn batch_channel(batch: &Tensor<f32>, c: usize) -> Tensor<f32> {
    let d = batch.dims();
    let plane = d[2] * d[3];
    let data: Vec<f32> = (0..d[0])
        .flat_map(|b| batch.data()[(b * d[1] + c) * plane..][..plane].iter().copied())
        .collect();
    Tensor::from_vec(&[d[0], 1, d[2], d[3]], data).expect("non-empty batch")
}

fn softmax64(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let e: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest entry; the lowest index wins exact ties.
fn argmax_tie_low<T: PartialOrd>(row: &[T]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

/// Two-class decision: ADHD only when its probability is strictly larger.
pub fn label_from_proba(p: &[f64]) -> Label {
    Label::from_index(argmax_tie_low(p)).unwrap_or(Label::Control)
}

/// Owned scalogram tensors as views, for the inference APIs.
pub fn views(set: &[Scalogram]) -> Vec<ArrayView3<'_, f32>> {
    set.iter().map(|s| s.values.view()).collect()
}

/// Convenience for callers holding bare tensors.
pub fn array_views(set: &[Array3<f32>]) -> Vec<ArrayView3<'_, f32>> {
    set.iter().map(|a| a.view()).collect()
}
