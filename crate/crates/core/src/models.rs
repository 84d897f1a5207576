//! The motif encoder (convolutional, ending in a bottleneck) and the
//! fixed-slot sequence decoder, with the sparsity, L1, KL and dense
//! bottleneck variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::engine::{
    Adam, BatchNorm, Checkpoint, Conv2d, Dense, Mode, NodeId, ParamStore, ResidualBlock, Session, Tensor,
};
use crate::error::{Error, Result};
use crate::sparsity::{sparse_forward, SparsityState, ThresholdVariant};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BottleneckKind {
    /// Thresholded ReLU with quantile-tracked thresholds at density `delta`.
    Sparling { variant: ThresholdVariant, delta: f64 },
    /// ReLU with an auxiliary `lambda * mean(|a|)` loss.
    L1 { lambda: f64 },
    /// `relu(sigmoid(z) - 0.5)` with an auxiliary
    /// `lambda * KL(Bernoulli(rho) || Bernoulli(mean(sigmoid(z))))` loss.
    Kl { lambda: f64, rho: f64 },
    /// Plain ReLU.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub residual_units: usize,
    pub width: usize,
    pub bottleneck_channels: usize,
    /// Batch normalisation directly before the bottleneck.
    pub batch_norm: bool,
    pub bottleneck: BottleneckKind,
    pub pool: usize,
    pub hidden: usize,
    pub max_len: usize,
    /// Output symbols, not counting the blank.
    pub alphabet: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 1,
            residual_units: 2,
            width: 16,
            bottleneck_channels: 4,
            batch_norm: true,
            bottleneck: BottleneckKind::Sparling {
                variant: ThresholdVariant::PerChannel,
                delta: 0.05,
            },
            pool: 4,
            hidden: 256,
            max_len: 4,
            alphabet: 4,
        }
    }
}

impl ModelConfig {
    /// Side of the square input region seen by one bottleneck site.
    pub fn receptive_field(&self) -> usize {
        3 + 4 * self.residual_units
    }

    pub fn blank(&self) -> usize {
        self.alphabet
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.width == 0 || self.bottleneck_channels == 0 || self.hidden == 0 || self.in_channels == 0 {
            return bad("layer widths must be positive".into());
        }
        if self.alphabet == 0 || self.max_len == 0 {
            return bad("alphabet and max_len must be positive".into());
        }
        if self.pool == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.pool) {
            return bad(format!("image size {} not divisible by pool {}", self.image_size, self.pool));
        }
        if self.receptive_field() < crate::datagen::GLYPH_SIZE {
            return bad(format!(
                "receptive field {} smaller than a glyph",
                self.receptive_field()
            ));
        }
        match self.bottleneck {
            BottleneckKind::Sparling { delta, .. } if !(delta > 0.0 && delta <= 1.0) => {
                bad(format!("density {delta} outside (0, 1]"))
            }
            BottleneckKind::L1 { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => {
                bad(format!("L1 weight {lambda}"))
            }
            BottleneckKind::Kl { lambda, rho }
                if !(lambda >= 0.0 && lambda.is_finite() && rho > 0.0 && rho < 1.0) =>
            {
                bad(format!("KL weight {lambda} / target {rho}"))
            }
            _ => Ok(()),
        }
    }
}

/// Images and padded targets for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, S, S, 1]`.
    pub images: Tensor<f32>,
    /// `B * max_len` slot targets, blank-padded.
    pub targets: Vec<usize>,
    pub labels: Vec<Vec<u8>>,
}

impl Batch {
    pub fn new(samples: &[Sample], max_len: usize, blank: usize) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let shape = first.input.shape().to_vec();
        let mut data = Vec::with_capacity(samples.len() * first.input.len());
        let mut targets = Vec::with_capacity(samples.len() * max_len);
        for s in samples {
            if s.input.shape() != shape.as_slice() {
                return Err(Error::shape("batch", "samples differ in shape"));
            }
            if s.label.len() > max_len {
                return Err(Error::InvalidArgument(format!(
                    "label of length {} exceeds {max_len} slots",
                    s.label.len()
                )));
            }
            data.extend_from_slice(s.input.data());
            targets.extend(s.label.iter().map(|&g| g as usize));
            targets.extend(std::iter::repeat_n(blank, max_len - s.label.len()));
        }
        let mut dims = vec![samples.len()];
        dims.extend(shape);
        Ok(Self {
            images: Tensor::new(dims, data)?,
            targets,
            labels: samples.iter().map(|s| s.label.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Reads each slot's most likely symbol and stops at the first blank.
pub fn greedy_decode(logits: &[f32], max_len: usize, blank: usize) -> Vec<Vec<u8>> {
    let classes = blank + 1;
    logits
        .chunks_exact(max_len * classes)
        .map(|sample| {
            sample
                .chunks_exact(classes)
                .map(|slot| {
                    slot.iter()
                        .enumerate()
                        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                        .0
                })
                .take_while(|&s| s != blank)
                .map(|s| s as u8)
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug)]
struct Network {
    lift: Conv2d,
    lift_bn: BatchNorm,
    blocks: Vec<ResidualBlock>,
    proj: Conv2d,
    proj_bn: Option<BatchNorm>,
    hidden: Dense,
    out: Dense,
}

impl Network {
    fn batch_norms(&self) -> Vec<&BatchNorm> {
        let mut v = vec![&self.lift_bn];
        for b in &self.blocks {
            v.extend(b.batch_norms());
        }
        v.extend(self.proj_bn.as_ref());
        v
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut v = vec![&mut self.lift_bn];
        for b in &mut self.blocks {
            v.extend(b.batch_norms_mut());
        }
        v.extend(self.proj_bn.as_mut());
        v
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Pass {
    /// Input to the bottleneck (after the optional batch norm).
    pub pre: NodeId,
    /// Bottleneck output, `[B, S, S, C_b]`.
    pub motifs: NodeId,
    /// `[B, max_len, K + 1]`.
    pub logits: NodeId,
    pub aux: Option<NodeId>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub aux: f64,
    pub density: f64,
}

/// Forward results copied out of the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub motifs: Tensor<f32>,
    pub logits: Tensor<f32>,
    pub decoded: Vec<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    thresholding: bool,
    encoder_frozen: bool,
    steps: u64,
    sparsity: Option<SparsityMeta>,
    adam: Option<AdamMeta>,
    extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct SparsityMeta {
    thresholds: Vec<f64>,
    delta: f64,
    momentum: f64,
    variant: ThresholdVariant,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    config: crate::engine::AdamConfig,
    step: u64,
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    net: Network,
    pub sparsity: Option<SparsityState>,
    /// False once the bottleneck has been reduced to its batch norm and ReLU.
    pub thresholding: bool,
    pub encoder_frozen: bool,
    /// Optimizer steps taken so far.
    pub steps: u64,
}

/// Rows per forward pass during inference.
const INFERENCE_CHUNK: usize = 100;

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = config.width;
        let lift = Conv2d::new(&mut store, "encoder.lift", 3, config.in_channels, w, &mut rng);
        let lift_bn = BatchNorm::new(&mut store, "encoder.lift_bn", w);
        let blocks = (0..config.residual_units)
            .map(|i| ResidualBlock::new(&mut store, &format!("encoder.res{i}"), w, &mut rng))
            .collect();
        let cb = config.bottleneck_channels;
        let proj = Conv2d::new(&mut store, "encoder.proj", 1, w, cb, &mut rng);
        let proj_bn = config
            .batch_norm
            .then(|| BatchNorm::new(&mut store, "encoder.proj_bn", cb));
        let g = config.image_size / config.pool;
        let hidden = Dense::new(&mut store, "decoder.hidden", g * g * (cb + 2), config.hidden, &mut rng);
        let out = Dense::new(
            &mut store,
            "decoder.out",
            config.hidden,
            config.max_len * (config.alphabet + 1),
            &mut rng,
        );
        let sparsity = match config.bottleneck {
            BottleneckKind::Sparling { variant, delta } => Some(SparsityState::new(cb, delta, variant)?),
            _ => None,
        };
        Ok(Self {
            config,
            store,
            net: Network {
                lift,
                lift_bn,
                blocks,
                proj,
                proj_bn,
                hidden,
                out,
            },
            sparsity,
            thresholding: true,
            encoder_frozen: false,
            steps: 0,
        })
    }

    pub fn density_target(&self) -> Option<f64> {
        self.sparsity.as_ref().map(SparsityState::delta)
    }

    /// Builds the forward graph. `train` selects batch statistics and
    /// threshold buffering; a frozen encoder always runs in eval mode.
    fn forward(&mut self, s: &mut Session<'_>, x: NodeId, train: bool) -> Result<Pass> {
        let enc_mode = if train && !self.encoder_frozen { Mode::Train } else { Mode::Eval };
        s.mode = enc_mode;
        let net = &mut self.net;
        let h = net.lift.forward(s, x)?;
        let h = net.lift_bn.forward(s, h)?;
        let mut h = s.graph.relu(h);
        for block in &mut net.blocks {
            h = block.forward(s, h)?;
        }
        let mut pre = net.proj.forward(s, h)?;
        if let Some(bn) = &mut net.proj_bn {
            pre = bn.forward(s, pre)?;
        }
        let (motifs, aux) = match self.config.bottleneck {
            BottleneckKind::Sparling { .. } if self.thresholding => {
                let state = self.sparsity.as_mut().expect("sparling model has a sparsity state");
                (sparse_forward(&mut s.graph, pre, state, enc_mode)?, None)
            }
            BottleneckKind::L1 { lambda } => {
                let a = s.graph.relu(pre);
                let m = s.graph.mean_abs(a);
                (a, Some(s.graph.scale(m, lambda)))
            }
            BottleneckKind::Kl { lambda, rho } => {
                let sig = s.graph.sigmoid(pre);
                let kl = s.graph.bernoulli_kl(sig, rho)?;
                let half = s
                    .graph
                    .constant(Tensor::full(vec![self.config.bottleneck_channels], 0.5));
                (s.graph.threshold_relu(sig, half)?, Some(s.graph.scale(kl, lambda)))
            }
            _ => (s.graph.relu(pre), None),
        };
        s.mode = if train { Mode::Train } else { Mode::Eval };
        let logits = self.decode(s, motifs)?;
        Ok(Pass {
            pre,
            motifs,
            logits,
            aux,
        })
    }

    fn decode(&self, s: &mut Session<'_>, motifs: NodeId) -> Result<NodeId> {
        let b = s.graph.value(motifs).shape()[0];
        let p = s.graph.max_pool2d(motifs, self.config.pool)?;
        let p = s.graph.append_coords(p)?;
        let p = s.graph.flatten(p);
        let h = self.net.hidden.forward(s, p)?;
        let h = s.graph.relu(h);
        let o = self.net.out.forward(s, h)?;
        s.graph
            .reshape(o, vec![b, self.config.max_len, self.config.alphabet + 1])
    }

    /// One optimizer step on `batch`, followed by the threshold update.
    pub fn train_step(&mut self, batch: &Batch, adam: &mut Adam) -> Result<StepStats> {
        let store = std::mem::take(&mut self.store);
        let result = self.train_step_with(&store, batch);
        self.store = store;
        let (stats, grads) = result?;
        let grads: Vec<Option<&Tensor<f32>>> = grads.iter().map(Option::as_ref).collect();
        let mut params: Vec<&mut Tensor<f32>> = self.store.iter_mut().map(|p| &mut p.value).collect();
        adam.update(&mut params, &grads)?;
        if self.thresholding && !self.encoder_frozen {
            if let Some(state) = &mut self.sparsity {
                state.update()?;
            }
        }
        self.steps += 1;
        Ok(stats)
    }

    fn train_step_with(
        &mut self,
        store: &ParamStore,
        batch: &Batch,
    ) -> Result<(StepStats, Vec<Option<Tensor<f32>>>)> {
        let mut s = Session::new(store, Mode::Train, true);
        let x = s.graph.input(batch.images.clone());
        let pass = self.forward(&mut s, x, true)?;
        let xent = s.graph.softmax_xent(pass.logits, &batch.targets)?;
        let (loss, aux) = match pass.aux {
            Some(a) => (s.graph.add(xent, a)?, s.graph.value(a).item()? as f64),
            None => (xent, 0.0),
        };
        let value = s.graph.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.steps + 1)));
        }
        s.graph.backward(loss)?;
        let density = s.graph.value(pass.motifs).density();
        let grads = s.grads().into_iter().map(|g| g.cloned()).collect();
        Ok((
            StepStats {
                loss: value,
                aux,
                density,
            },
            grads,
        ))
    }

    /// Eval-mode forward over `images` (`[N, S, S, C]`), in chunks.
    pub fn infer(&mut self, images: &Tensor<f32>) -> Result<Inference> {
        self.infer_with(images, |_| Ok(()))
    }

    /// Like [`Self::infer`], but `edit` may rewrite each chunk's bottleneck
    /// output before it is decoded.
    pub fn infer_with(
        &mut self,
        images: &Tensor<f32>,
        mut edit: impl FnMut(&mut Tensor<f32>) -> Result<()>,
    ) -> Result<Inference> {
        let shape = images.shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.image_size || shape[3] != self.config.in_channels {
            return Err(Error::shape(
                "model input",
                format!(
                    "{shape:?} is not [N, {s}, {s}, {c}]",
                    s = self.config.image_size,
                    c = self.config.in_channels
                ),
            ));
        }
        let per = images.len() / shape[0];
        let store = std::mem::take(&mut self.store);
        let mut motifs = Vec::new();
        let mut logits = Vec::new();
        let mut result = Ok(());
        for chunk in images.data().chunks(per * INFERENCE_CHUNK) {
            let n = chunk.len() / per;
            let r = (|| -> Result<()> {
                let mut s = Session::new(&store, Mode::Eval, false);
                let x = s
                    .graph
                    .input(Tensor::new(vec![n, shape[1], shape[2], shape[3]], chunk.to_vec())?);
                let mut enc = self.forward(&mut s, x, false)?;
                let mut m = s.graph.value(enc.motifs).clone();
                edit(&mut m)?;
                let edited = s.graph.input(m);
                enc.logits = self.decode(&mut s, edited)?;
                motifs.extend_from_slice(s.graph.value(edited).data());
                logits.extend_from_slice(s.graph.value(enc.logits).data());
                Ok(())
            })();
            if r.is_err() {
                result = r;
                break;
            }
        }
        self.store = store;
        result?;
        let n = shape[0];
        let (k, l) = (self.config.alphabet + 1, self.config.max_len);
        let decoded = greedy_decode(&logits, l, self.config.blank());
        Ok(Inference {
            motifs: Tensor::new(vec![n, shape[1], shape[2], self.config.bottleneck_channels], motifs)?,
            logits: Tensor::new(vec![n, l, k], logits)?,
            decoded,
        })
    }

    /// Drops the thresholds (keeping batch norm and ReLU), freezes the
    /// encoder and leaves only the decoder trainable.
    pub fn retrain_head(&mut self) -> Result<()> {
        if !matches!(self.config.bottleneck, BottleneckKind::Sparling { .. }) {
            return Err(Error::InvalidArgument("only a sparsity-bottleneck model can be retrained".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("model has not been trained".into()));
        }
        if !self.thresholding {
            return Err(Error::InvalidArgument("model has already been retrained".into()));
        }
        self.thresholding = false;
        self.encoder_frozen = true;
        self.store.set_trainable("encoder.", false);
        Ok(())
    }

    pub fn encoder_params(&self) -> Vec<Tensor<f32>> {
        self.store
            .iter()
            .filter(|p| p.name.starts_with("encoder."))
            .map(|p| p.value.clone())
            .collect()
    }

    /// Serializes weights, batch-norm statistics, the sparsity state and
    /// (optionally) the optimizer, with `extra` stored in the metadata.
    pub fn to_checkpoint(&self, adam: Option<&Adam>, extra: serde_json::Value) -> Result<Checkpoint> {
        let meta = ModelMeta {
            config: self.config.clone(),
            thresholding: self.thresholding,
            encoder_frozen: self.encoder_frozen,
            steps: self.steps,
            sparsity: self.sparsity.as_ref().map(|s| SparsityMeta {
                thresholds: s.thresholds.clone(),
                delta: s.delta(),
                momentum: s.momentum,
                variant: s.variant,
            }),
            adam: adam.map(|a| AdamMeta {
                config: a.config,
                step: a.step,
            }),
            extra,
        };
        let mut ck = Checkpoint::new(serde_json::to_string(&meta)?);
        for p in self.store.iter() {
            ck.push(p.name.clone(), p.value.clone());
        }
        for bn in self.net.batch_norms() {
            let c = bn.stats.mean.len();
            ck.push(format!("{}.running_mean", bn.name), Tensor::new(vec![c], bn.stats.mean.clone())?);
            ck.push(format!("{}.running_var", bn.name), Tensor::new(vec![c], bn.stats.var.clone())?);
        }
        if let Some(a) = adam {
            for (i, (m, v)) in a.first.iter().zip(&a.second).enumerate() {
                ck.push(format!("adam.first.{i}"), m.clone());
                ck.push(format!("adam.second.{i}"), v.clone());
            }
        }
        Ok(ck)
    }

    /// Inverse of [`Self::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<Adam>, serde_json::Value)> {
        let meta: ModelMeta =
            serde_json::from_str(&ck.meta).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let mut model = Self::new(meta.config, 0)?;
        for p in model.store.iter_mut() {
            let t = ck.get(&p.name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "{}: checkpoint shape {:?}, model shape {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        for bn in model.net.batch_norms_mut() {
            let c = bn.stats.mean.len();
            for (suffix, dst) in [("running_mean", &mut bn.stats.mean), ("running_var", &mut bn.stats.var)] {
                let t = ck.get(&format!("{}.{suffix}", bn.name))?;
                if t.len() != c {
                    return Err(Error::Format(format!("{}.{suffix} has {} entries", bn.name, t.len())));
                }
                *dst = t.data().to_vec();
            }
        }
        match (&mut model.sparsity, meta.sparsity) {
            (Some(state), Some(sm)) => {
                if sm.thresholds.len() != state.channels() {
                    return Err(Error::Format("threshold count does not match the model".into()));
                }
                state.thresholds = sm.thresholds;
                state.set_delta(sm.delta)?;
                state.momentum = sm.momentum;
                state.variant = sm.variant;
            }
            (None, None) => {}
            _ => return Err(Error::Format("sparsity state does not match the bottleneck kind".into())),
        }
        model.thresholding = meta.thresholding;
        model.encoder_frozen = meta.encoder_frozen;
        model.steps = meta.steps;
        if model.encoder_frozen {
            model.store.set_trainable("encoder.", false);
        }
        let adam = match meta.adam {
            Some(am) => {
                let mut a = Adam::new(am.config, &model.store.shapes());
                a.step = am.step;
                for i in 0..a.first.len() {
                    a.first[i] = ck.get(&format!("adam.first.{i}"))?.clone();
                    a.second[i] = ck.get(&format!("adam.second.{i}"))?.clone();
                }
                Some(a)
            }
            None => None,
        };
        Ok((model, adam, meta.extra))
    }
}
