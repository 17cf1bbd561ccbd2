//! The multitask network: a shared convolutional encoder feeding five
//! descriptor branches, a margin sub-type branch, a likelihood-of-malignancy
//! regression branch, and a tumor-class branch.
//!
//! Information flow per sample:
//!
//! ```text
//! image [3,H,W] -> encoder -> feature maps -> global average pool -> f
//! f -> descriptor head d in {shape, orientation, margin, echo, posterior}
//!        fc(feat -> hidden), ReLU, dropout, fc(hidden -> arity), softmax -> X_d
//! margin hidden -> fc(hidden -> 4), sigmoid -> X_6..X_9  (sub-types)
//! [f, X_1..X_5]        -> fc -> ReLU -> fc -> sigmoid -> X_10 (likelihood)
//! [f, X_1..X_5, X_10]  -> fc -> ReLU -> fc -> softmax -> X_11 (tumor class)
//! ```
//!
//! The encoder is a VGG-16-style stack (13 convolutions in 5 stages, each
//! stage closed by 2x2 max pooling), so a 256x256 input yields 8x8 feature
//! maps. The descriptor probabilities feed the likelihood branch, and both
//! feed the tumor branch, keeping every gradient path connected to the
//! shared encoder.

pub mod checkpoint;

use ndarray::{Array1, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::DESCRIPTOR_ARITIES;
use crate::nn::{
    alloc_conv, alloc_dense, conv_backward, conv_forward, dense_backward, dense_forward,
    dropout_mask, global_avg_pool, global_avg_pool_backward, maxpool2_backward,
    maxpool2_forward, relu_backward_inplace, relu_inplace, sigmoid, softmax,
    softmax_backward, ConvHandle, DenseHandle, ParamStore,
};
use crate::util::{derive_seed, Scalar};

/// Number of descriptor probabilities concatenated into the regression
/// branch input (3 + 2 + 2 + 6 + 4).
pub const DESCRIPTOR_PROB_DIM: usize = 17;

/// One encoder stage: `convs` 3x3 convolutions at `channels` width, closed
/// by a 2x2 max pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub convs: usize,
    pub channels: usize,
}

/// Convolutional encoder layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
}

impl EncoderSpec {
    /// The standard VGG-16 feature extractor: 13 convolutions, five 2x
    /// poolings, 512 output channels.
    pub fn vgg16() -> Self {
        Self {
            in_channels: 3,
            stages: vec![
                StageSpec { convs: 2, channels: 64 },
                StageSpec { convs: 2, channels: 128 },
                StageSpec { convs: 3, channels: 256 },
                StageSpec { convs: 3, channels: 512 },
                StageSpec { convs: 3, channels: 512 },
            ],
        }
    }

    /// A small two-layer encoder for fast tests and gradient checks.
    pub fn tiny(channels: (usize, usize)) -> Self {
        Self {
            in_channels: 3,
            stages: vec![
                StageSpec { convs: 1, channels: channels.0 },
                StageSpec { convs: 1, channels: channels.1 },
            ],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.stages.last().map(|s| s.channels).unwrap_or(0)
    }

    /// Spatial size of the feature maps for a square input.
    pub fn output_side(&self, input_side: usize) -> usize {
        let mut side = input_side;
        for _ in &self.stages {
            side /= 2;
        }
        side
    }

    pub fn min_input_side(&self) -> usize {
        1 << self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stages.is_empty() {
            return Err(Error::Config("encoder spec must be nonempty".into()));
        }
        if self.stages.iter().any(|s| s.convs == 0 || s.channels == 0) {
            return Err(Error::Config("encoder stages must be nonempty".into()));
        }
        Ok(())
    }
}

/// Complete architectural description; embedded in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    /// Hidden width of each descriptor head.
    pub head_hidden: usize,
    /// Hidden width of the likelihood and tumor branches.
    pub branch_hidden: usize,
    /// Dropout probability on descriptor-head hidden activations.
    pub dropout: f64,
    /// Initialization seed.
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(encoder: EncoderSpec, seed: u64) -> Self {
        Self {
            encoder,
            head_hidden: 256,
            branch_hidden: 64,
            dropout: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.head_hidden == 0 || self.branch_hidden == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Backbone selection for [`build_model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Vgg16Encoder,
}

/// Backbone configuration: the encoder family, an optional pretrained weight
/// archive (applied to the encoder only), and whether encoder parameters stay
/// trainable (they always do here; the flag is recorded for provenance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub pretrained_weights: Option<std::path::PathBuf>,
    pub trainable: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Vgg16Encoder,
            pretrained_weights: None,
            trainable: true,
        }
    }
}

/// The eleven task outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs<T> {
    pub shape: Array1<T>,
    pub orientation: Array1<T>,
    pub margin: Array1<T>,
    pub echo: Array1<T>,
    pub posterior: Array1<T>,
    /// Sub-type probabilities: indistinct, angular, microlobulated, spiculated.
    pub subtypes: Array1<T>,
    pub likelihood: T,
    pub tumor: Array1<T>,
}

impl<T: Scalar> ModelOutputs<T> {
    /// Probability of the malignant class.
    pub fn malignant_prob(&self) -> T {
        self.tumor[1]
    }

    pub fn descriptor(&self, index: usize) -> &Array1<T> {
        match index {
            0 => &self.shape,
            1 => &self.orientation,
            2 => &self.margin,
            3 => &self.echo,
            4 => &self.posterior,
            _ => panic!("descriptor index out of range"),
        }
    }

    /// Checks the output contract: categorical arities (3, 2, 2, 6, 4, 2),
    /// four sub-type scalars, softmax sums within `tol`, all values in [0, 1].
    pub fn check_invariants(&self, tol: f64) -> Result<()> {
        let expected = [
            (self.shape.len(), 3usize),
            (self.orientation.len(), 2),
            (self.margin.len(), 2),
            (self.echo.len(), 6),
            (self.posterior.len(), 4),
            (self.subtypes.len(), 4),
            (self.tumor.len(), 2),
        ];
        for (actual, want) in expected {
            if actual != want {
                return Err(Error::ShapeMismatch(format!(
                    "output arity {actual}, expected {want}"
                )));
            }
        }
        for probs in [
            &self.shape,
            &self.orientation,
            &self.margin,
            &self.echo,
            &self.posterior,
            &self.tumor,
        ] {
            let sum = probs.sum().as_f64();
            if (sum - 1.0).abs() > tol {
                return Err(Error::ShapeMismatch(format!(
                    "softmax output sums to {sum}, expected 1"
                )));
            }
        }
        let in_unit = |v: T| (0.0..=1.0).contains(&v.as_f64());
        let all_ok = self.shape.iter().all(|&v| in_unit(v))
            && self.orientation.iter().all(|&v| in_unit(v))
            && self.margin.iter().all(|&v| in_unit(v))
            && self.echo.iter().all(|&v| in_unit(v))
            && self.posterior.iter().all(|&v| in_unit(v))
            && self.subtypes.iter().all(|&v| in_unit(v))
            && self.tumor.iter().all(|&v| in_unit(v))
            && in_unit(self.likelihood);
        if !all_ok {
            return Err(Error::ShapeMismatch("output outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Gradients of some scalar objective with respect to every model output.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads<T> {
    pub shape: Array1<T>,
    pub orientation: Array1<T>,
    pub margin: Array1<T>,
    pub echo: Array1<T>,
    pub posterior: Array1<T>,
    pub subtypes: Array1<T>,
    pub likelihood: T,
    pub tumor: Array1<T>,
}

impl<T: Scalar> OutputGrads<T> {
    pub fn zeros() -> Self {
        Self {
            shape: Array1::zeros(3),
            orientation: Array1::zeros(2),
            margin: Array1::zeros(2),
            echo: Array1::zeros(6),
            posterior: Array1::zeros(4),
            subtypes: Array1::zeros(4),
            likelihood: T::zero(),
            tumor: Array1::zeros(2),
        }
    }
}

/// Addressing of one parameter tensor inside the [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRef {
    Mat(usize),
    Vec(usize),
}

/// Registry entry: canonical tensor name, storage reference, and the logical
/// shape used in weight archives (convolutions report `[out, in, 3, 3]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub reference: TensorRef,
    pub shape: Vec<usize>,
}

#[derive(Clone)]
struct HeadHandles {
    fc1: DenseHandle,
    fc2: DenseHandle,
}

/// Construction helper: allocates tensors with per-layer derived random
/// streams and records their registry entries in canonical order.
struct NetBuilder<T> {
    params: ParamStore<T>,
    registry: Vec<TensorEntry>,
    layer_counter: u64,
    seed: u64,
}

impl<T: Scalar> NetBuilder<T> {
    fn next_rng(&mut self) -> ChaCha8Rng {
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, self.layer_counter));
        self.layer_counter += 1;
        rng
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize) -> ConvHandle {
        let mut rng = self.next_rng();
        let handle = alloc_conv(&mut self.params, c_in, c_out, &mut rng);
        self.registry.push(TensorEntry {
            name: format!("{name}.weight"),
            reference: TensorRef::Mat(handle.w),
            shape: vec![c_out, c_in, 3, 3],
        });
        self.registry.push(TensorEntry {
            name: format!("{name}.bias"),
            reference: TensorRef::Vec(handle.b),
            shape: vec![c_out],
        });
        handle
    }

    fn dense(&mut self, name: &str, in_dim: usize, out_dim: usize) -> DenseHandle {
        let mut rng = self.next_rng();
        let handle = alloc_dense(&mut self.params, in_dim, out_dim, &mut rng);
        self.registry.push(TensorEntry {
            name: format!("{name}.weight"),
            reference: TensorRef::Mat(handle.w),
            shape: vec![out_dim, in_dim],
        });
        self.registry.push(TensorEntry {
            name: format!("{name}.bias"),
            reference: TensorRef::Vec(handle.b),
            shape: vec![out_dim],
        });
        handle
    }
}

#[derive(Clone)]
struct Topology {
    encoder_convs: Vec<ConvHandle>,
    heads: Vec<HeadHandles>,
    margin_sub: DenseHandle,
    lik_fc1: DenseHandle,
    lik_fc2: DenseHandle,
    tum_fc1: DenseHandle,
    tum_fc2: DenseHandle,
}

/// The multitask network. Parameters are owned by an internal [`ParamStore`];
/// forward passes are pure per sample, so a built model is safe to share
/// across threads for inference.
#[derive(Clone)]
pub struct BiradsNet<T> {
    spec: ModelSpec,
    params: ParamStore<T>,
    topo: Topology,
    registry: Vec<TensorEntry>,
    /// Flat-index prefix sums over registry entries, for parameter sampling.
    offsets: Vec<usize>,
}

/// Per-sample forward caches needed by the backward pass.
pub struct TrainCache<T> {
    input: Array3<T>,
    conv_outputs: Vec<Array3<T>>,
    pooled: Vec<Array3<T>>,
    pool_masks: Vec<Array3<u8>>,
    feat: Array1<T>,
    fmap_dim: (usize, usize, usize),
    head_hidden: Vec<Array1<T>>,
    head_masks: Vec<Array1<T>>,
    head_dropped: Vec<Array1<T>>,
    lik_hidden: Array1<T>,
    tum_hidden: Array1<T>,
    outputs: ModelOutputs<T>,
}

impl<T: Scalar> TrainCache<T> {
    pub fn outputs(&self) -> &ModelOutputs<T> {
        &self.outputs
    }
}

/// Builds the standard model from a backbone configuration: the VGG-16-style
/// encoder with freshly initialized heads. Pretrained weights, when given,
/// populate the encoder tensors only.
pub fn build_model(config: &BackboneConfig, seed: u64) -> Result<BiradsNet<f32>> {
    let spec = match config.kind {
        BackboneKind::Vgg16Encoder => ModelSpec::new(EncoderSpec::vgg16(), seed),
    };
    let mut model = BiradsNet::from_spec(spec)?;
    if let Some(path) = &config.pretrained_weights {
        checkpoint::load_backbone_weights(&mut model, path)?;
    }
    Ok(model)
}

impl<T: Scalar> BiradsNet<T> {
    /// Builds a model with deterministic seed-derived initialization: each
    /// tensor draws from its own derived stream, so initialization does not
    /// depend on evaluation order.
    pub fn from_spec(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let feat = spec.encoder.feature_dim();
        let mut builder = NetBuilder::<T> {
            params: ParamStore::new(),
            registry: Vec::new(),
            layer_counter: 0,
            seed: spec.seed,
        };

        let mut encoder_convs = Vec::new();
        let mut c_in = spec.encoder.in_channels;
        for (si, stage) in spec.encoder.stages.iter().enumerate() {
            for ci in 0..stage.convs {
                let name = format!("encoder.conv{}_{}", si + 1, ci + 1);
                encoder_convs.push(builder.conv(&name, c_in, stage.channels));
                c_in = stage.channels;
            }
        }

        let mut heads = Vec::new();
        for (i, key) in crate::lexicon::DESCRIPTOR_NAMES.iter().enumerate() {
            let fc1 = builder.dense(&format!("head.{key}.fc1"), feat, spec.head_hidden);
            let fc2 = builder.dense(
                &format!("head.{key}.fc2"),
                spec.head_hidden,
                DESCRIPTOR_ARITIES[i],
            );
            heads.push(HeadHandles { fc1, fc2 });
        }
        let margin_sub = builder.dense("head.margin.subtypes", spec.head_hidden, 4);
        let lik_fc1 = builder.dense(
            "likelihood.fc1",
            feat + DESCRIPTOR_PROB_DIM,
            spec.branch_hidden,
        );
        let lik_fc2 = builder.dense("likelihood.fc2", spec.branch_hidden, 1);
        let tum_fc1 = builder.dense(
            "tumor.fc1",
            feat + DESCRIPTOR_PROB_DIM + 1,
            spec.branch_hidden,
        );
        let tum_fc2 = builder.dense("tumor.fc2", spec.branch_hidden, 2);

        let NetBuilder {
            params, registry, ..
        } = builder;
        let mut offsets = Vec::with_capacity(registry.len() + 1);
        let mut running = 0usize;
        offsets.push(0);
        for entry in &registry {
            running += entry.shape.iter().product::<usize>();
            offsets.push(running);
        }

        Ok(Self {
            spec,
            params,
            topo: Topology {
                encoder_convs,
                heads,
                margin_sub,
                lik_fc1,
                lik_fc2,
                tum_fc1,
                tum_fc2,
            },
            registry,
            offsets,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn registry(&self) -> &[TensorEntry] {
        &self.registry
    }

    /// Total number of scalar parameters.
    pub fn param_len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn locate(&self, flat: usize) -> (TensorRef, usize) {
        let entry_idx = match self.offsets.binary_search(&flat) {
            Ok(i) if i < self.registry.len() => i,
            Ok(i) => i - 1,
            Err(i) => i - 1,
        };
        (
            self.registry[entry_idx].reference,
            flat - self.offsets[entry_idx],
        )
    }

    /// Reads one parameter by flat registry index.
    pub fn get_param(&self, flat: usize) -> T {
        match self.locate(flat) {
            (TensorRef::Mat(i), off) => *self.params.mats[i].as_slice().unwrap().get(off).unwrap(),
            (TensorRef::Vec(i), off) => self.params.vecs[i][off],
        }
    }

    /// Adds `delta` to one parameter by flat registry index.
    pub fn nudge_param(&mut self, flat: usize, delta: T) {
        match self.locate(flat) {
            (TensorRef::Mat(i), off) => {
                let slice = self.params.mats[i].as_slice_mut().unwrap();
                slice[off] = slice[off] + delta;
            }
            (TensorRef::Vec(i), off) => {
                self.params.vecs[i][off] = self.params.vecs[i][off] + delta;
            }
        }
    }

    /// Reads one gradient value from a gradient store by flat registry index.
    pub fn grad_at(&self, grads: &ParamStore<T>, flat: usize) -> T {
        match self.locate(flat) {
            (TensorRef::Mat(i), off) => grads.mats[i].as_slice().unwrap()[off],
            (TensorRef::Vec(i), off) => grads.vecs[i][off],
        }
    }

    /// True when the flat index addresses an encoder tensor.
    pub fn is_backbone_param(&self, flat: usize) -> bool {
        let entry_idx = match self.offsets.binary_search(&flat) {
            Ok(i) if i < self.registry.len() => i,
            Ok(i) => i - 1,
            Err(i) => i - 1,
        };
        self.registry[entry_idx].name.starts_with("encoder.")
    }

    fn check_input(&self, x: &Array3<T>) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != self.spec.encoder.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "input has {c} channels, encoder expects {}",
                self.spec.encoder.in_channels
            )));
        }
        let min = self.spec.encoder.min_input_side();
        if h < min || w < min {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{w} too small for {} pooling stages (need >= {min})",
                self.spec.encoder.stages.len()
            )));
        }
        Ok(())
    }

    /// Runs the encoder and returns the final feature maps (before pooling
    /// into the feature vector).
    pub fn backbone_features(&self, x: &Array3<T>) -> Result<Array3<T>> {
        self.check_input(x)?;
        let mut current = x.clone();
        let mut conv_idx = 0;
        for stage in &self.spec.encoder.stages {
            for _ in 0..stage.convs {
                let mut out =
                    conv_forward(&self.params, &self.topo.encoder_convs[conv_idx], &current);
                relu_inplace(out.as_slice_mut().unwrap());
                current = out;
                conv_idx += 1;
            }
            let (pooled, _) = maxpool2_forward(&current);
            current = pooled;
        }
        Ok(current)
    }

    fn head_forward(
        &self,
        head: &HeadHandles,
        feat: &Array1<T>,
        mask: Option<&Array1<T>>,
    ) -> (Array1<T>, Array1<T>, Array1<T>) {
        let mut hidden = dense_forward(&self.params, &head.fc1, feat);
        relu_inplace(hidden.as_slice_mut().unwrap());
        let dropped = match mask {
            Some(mask) => &hidden * mask,
            None => hidden.clone(),
        };
        let probs = softmax(&dense_forward(&self.params, &head.fc2, &dropped));
        (hidden, dropped, probs)
    }

    fn branches_forward(
        &self,
        feat: &Array1<T>,
        descriptor_probs: [&Array1<T>; 5],
        subtype_hidden: &Array1<T>,
    ) -> (Array1<T>, Array1<T>, T, Array1<T>, Array1<T>) {
        let subtypes = dense_forward(&self.params, &self.topo.margin_sub, subtype_hidden)
            .mapv(sigmoid);

        let feat_dim = feat.len();
        let mut z1 = Array1::zeros(feat_dim + DESCRIPTOR_PROB_DIM);
        z1.slice_mut(ndarray::s![..feat_dim]).assign(feat);
        let mut offset = feat_dim;
        for probs in descriptor_probs {
            z1.slice_mut(ndarray::s![offset..offset + probs.len()])
                .assign(probs);
            offset += probs.len();
        }
        let mut lik_hidden = dense_forward(&self.params, &self.topo.lik_fc1, &z1);
        relu_inplace(lik_hidden.as_slice_mut().unwrap());
        let likelihood =
            sigmoid(dense_forward(&self.params, &self.topo.lik_fc2, &lik_hidden)[0]);

        let mut z2 = Array1::zeros(feat_dim + DESCRIPTOR_PROB_DIM + 1);
        z2.slice_mut(ndarray::s![..feat_dim + DESCRIPTOR_PROB_DIM])
            .assign(&z1);
        z2[feat_dim + DESCRIPTOR_PROB_DIM] = likelihood;
        let mut tum_hidden = dense_forward(&self.params, &self.topo.tum_fc1, &z2);
        relu_inplace(tum_hidden.as_slice_mut().unwrap());
        let tumor = softmax(&dense_forward(&self.params, &self.topo.tum_fc2, &tum_hidden));

        (subtypes, lik_hidden, likelihood, tum_hidden, tumor)
    }

    /// Inference-mode forward pass (dropout disabled); deterministic for
    /// fixed weights.
    pub fn infer(&self, x: &Array3<T>) -> Result<ModelOutputs<T>> {
        self.check_input(x)?;
        let fmap = self.backbone_features(x)?;
        let feat = global_avg_pool(&fmap);

        let mut probs = Vec::with_capacity(5);
        let mut margin_hidden = None;
        for (i, head) in self.topo.heads.iter().enumerate() {
            let (hidden, _, p) = self.head_forward(head, &feat, None);
            if i == 2 {
                margin_hidden = Some(hidden);
            }
            probs.push(p);
        }
        let (subtypes, _, likelihood, _, tumor) = self.branches_forward(
            &feat,
            [&probs[0], &probs[1], &probs[2], &probs[3], &probs[4]],
            margin_hidden.as_ref().unwrap(),
        );
        Ok(ModelOutputs {
            shape: probs.remove(0),
            orientation: probs.remove(0),
            margin: probs.remove(0),
            echo: probs.remove(0),
            posterior: probs.remove(0),
            subtypes,
            likelihood,
            tumor,
        })
    }

    /// Parallel inference over a batch, preserving input order.
    pub fn infer_batch(&self, batch: &[Array3<T>]) -> Result<Vec<ModelOutputs<T>>> {
        batch.par_iter().map(|x| self.infer(x)).collect()
    }

    /// Training-mode forward pass with dropout drawn from `dropout_seed`,
    /// returning the caches needed by [`BiradsNet::backward`].
    pub fn forward_train(
        &self,
        x: &Array3<T>,
        dropout_seed: u64,
    ) -> Result<(ModelOutputs<T>, TrainCache<T>)> {
        self.check_input(x)?;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(dropout_seed);

        let mut conv_outputs = Vec::new();
        let mut pooled = Vec::new();
        let mut pool_masks = Vec::new();
        let mut current = x.clone();
        let mut conv_idx = 0;
        for stage in &self.spec.encoder.stages {
            for _ in 0..stage.convs {
                let mut out =
                    conv_forward(&self.params, &self.topo.encoder_convs[conv_idx], &current);
                relu_inplace(out.as_slice_mut().unwrap());
                conv_outputs.push(out.clone());
                current = out;
                conv_idx += 1;
            }
            let (p, mask) = maxpool2_forward(&current);
            pooled.push(p.clone());
            pool_masks.push(mask);
            current = p;
        }
        let fmap_dim = current.dim();
        let feat = global_avg_pool(&current);

        let mut head_hidden = Vec::with_capacity(5);
        let mut head_masks = Vec::with_capacity(5);
        let mut head_dropped = Vec::with_capacity(5);
        let mut probs = Vec::with_capacity(5);
        for head in &self.topo.heads {
            let mask = dropout_mask(self.spec.head_hidden, self.spec.dropout, &mut drop_rng);
            let (hidden, dropped, p) = self.head_forward(head, &feat, Some(&mask));
            head_hidden.push(hidden);
            head_masks.push(mask);
            head_dropped.push(dropped);
            probs.push(p);
        }
        let (subtypes, lik_hidden, likelihood, tum_hidden, tumor) = self.branches_forward(
            &feat,
            [&probs[0], &probs[1], &probs[2], &probs[3], &probs[4]],
            &head_dropped[2],
        );
        let outputs = ModelOutputs {
            shape: probs[0].clone(),
            orientation: probs[1].clone(),
            margin: probs[2].clone(),
            echo: probs[3].clone(),
            posterior: probs[4].clone(),
            subtypes,
            likelihood,
            tumor,
        };
        let cache = TrainCache {
            input: x.clone(),
            conv_outputs,
            pooled,
            pool_masks,
            feat,
            fmap_dim,
            head_hidden,
            head_masks,
            head_dropped,
            lik_hidden,
            tum_hidden,
            outputs: outputs.clone(),
        };
        Ok((outputs, cache))
    }

    /// Backpropagates output gradients through every branch and the shared
    /// encoder, accumulating parameter gradients into `grads`.
    pub fn backward(
        &self,
        cache: &TrainCache<T>,
        d_out: &OutputGrads<T>,
        grads: &mut ParamStore<T>,
    ) {
        let outputs = &cache.outputs;
        let feat_dim = cache.feat.len();

        // Reconstruct the concatenated branch inputs from cached pieces.
        let mut z1 = Array1::zeros(feat_dim + DESCRIPTOR_PROB_DIM);
        z1.slice_mut(ndarray::s![..feat_dim]).assign(&cache.feat);
        let mut offset = feat_dim;
        for i in 0..5 {
            let p = outputs.descriptor(i);
            z1.slice_mut(ndarray::s![offset..offset + p.len()]).assign(p);
            offset += p.len();
        }
        let mut z2 = Array1::zeros(feat_dim + DESCRIPTOR_PROB_DIM + 1);
        z2.slice_mut(ndarray::s![..feat_dim + DESCRIPTOR_PROB_DIM])
            .assign(&z1);
        z2[feat_dim + DESCRIPTOR_PROB_DIM] = outputs.likelihood;

        let mut d_feat: Array1<T> = Array1::zeros(feat_dim);
        let mut d_probs: Vec<Array1<T>> = (0..5)
            .map(|i| d_out.descriptor_grad(i).clone())
            .collect();

        // Tumor branch.
        let d_tum_logits = softmax_backward(&outputs.tumor, &d_out.tumor);
        let mut d_tum_hidden = dense_backward(
            &self.params,
            &self.topo.tum_fc2,
            &cache.tum_hidden,
            &d_tum_logits,
            grads,
        );
        relu_backward_inplace(
            d_tum_hidden.as_slice_mut().unwrap(),
            cache.tum_hidden.as_slice().unwrap(),
        );
        let d_z2 = dense_backward(
            &self.params,
            &self.topo.tum_fc1,
            &z2,
            &d_tum_hidden,
            grads,
        );
        d_feat += &d_z2.slice(ndarray::s![..feat_dim]);
        let mut off = feat_dim;
        for d_p in d_probs.iter_mut() {
            let n = d_p.len();
            *d_p += &d_z2.slice(ndarray::s![off..off + n]);
            off += n;
        }
        let d_likelihood_from_tumor = d_z2[feat_dim + DESCRIPTOR_PROB_DIM];

        // Likelihood branch; its output also fed the tumor branch.
        let d_likelihood_total = d_out.likelihood + d_likelihood_from_tumor;
        let lik = outputs.likelihood;
        let d_lik_logit = d_likelihood_total * lik * (T::one() - lik);
        let mut d_lik_hidden = dense_backward(
            &self.params,
            &self.topo.lik_fc2,
            &cache.lik_hidden,
            &Array1::from_elem(1, d_lik_logit),
            grads,
        );
        relu_backward_inplace(
            d_lik_hidden.as_slice_mut().unwrap(),
            cache.lik_hidden.as_slice().unwrap(),
        );
        let d_z1 = dense_backward(
            &self.params,
            &self.topo.lik_fc1,
            &z1,
            &d_lik_hidden,
            grads,
        );
        d_feat += &d_z1.slice(ndarray::s![..feat_dim]);
        let mut off = feat_dim;
        for d_p in d_probs.iter_mut() {
            let n = d_p.len();
            *d_p += &d_z1.slice(ndarray::s![off..off + n]);
            off += n;
        }

        // Margin sub-type branch feeds back into the margin head hidden.
        let mut d_sub_logits = Array1::zeros(4);
        for i in 0..4 {
            let p = outputs.subtypes[i];
            d_sub_logits[i] = d_out.subtypes[i] * p * (T::one() - p);
        }
        let d_margin_dropped_extra = dense_backward(
            &self.params,
            &self.topo.margin_sub,
            &cache.head_dropped[2],
            &d_sub_logits,
            grads,
        );

        // Descriptor heads.
        for (i, head) in self.topo.heads.iter().enumerate() {
            let probs = outputs.descriptor(i);
            let d_logits = softmax_backward(probs, &d_probs[i]);
            let mut d_dropped = dense_backward(
                &self.params,
                &head.fc2,
                &cache.head_dropped[i],
                &d_logits,
                grads,
            );
            if i == 2 {
                d_dropped += &d_margin_dropped_extra;
            }
            let mut d_hidden = &d_dropped * &cache.head_masks[i];
            relu_backward_inplace(
                d_hidden.as_slice_mut().unwrap(),
                cache.head_hidden[i].as_slice().unwrap(),
            );
            let d_f = dense_backward(&self.params, &head.fc1, &cache.feat, &d_hidden, grads);
            d_feat += &d_f;
        }

        // Encoder.
        let mut d_current = global_avg_pool_backward(&d_feat, cache.fmap_dim);
        let mut conv_idx = self.topo.encoder_convs.len();
        for (si, stage) in self.spec.encoder.stages.iter().enumerate().rev() {
            let last_conv_out = &cache.conv_outputs[self.stage_last_conv(si)];
            let mut d_stage =
                maxpool2_backward(&d_current, &cache.pool_masks[si], last_conv_out.dim());
            for local in (0..stage.convs).rev() {
                conv_idx -= 1;
                let output = &cache.conv_outputs[conv_idx];
                relu_backward_inplace(
                    d_stage.as_slice_mut().unwrap(),
                    output.as_slice().unwrap(),
                );
                let input = self.conv_input(cache, si, local);
                d_stage = conv_backward(
                    &self.params,
                    &self.topo.encoder_convs[conv_idx],
                    input,
                    &d_stage,
                    grads,
                );
            }
            d_current = d_stage;
        }
    }

    fn stage_last_conv(&self, stage_idx: usize) -> usize {
        let mut idx = 0;
        for (si, stage) in self.spec.encoder.stages.iter().enumerate() {
            idx += stage.convs;
            if si == stage_idx {
                return idx - 1;
            }
        }
        unreachable!()
    }

    fn conv_input<'c>(
        &self,
        cache: &'c TrainCache<T>,
        stage_idx: usize,
        local_idx: usize,
    ) -> &'c Array3<T> {
        if local_idx > 0 {
            let global = self.stage_last_conv(stage_idx) - self.spec.encoder.stages[stage_idx].convs
                + 1
                + local_idx
                - 1;
            &cache.conv_outputs[global]
        } else if stage_idx == 0 {
            &cache.input
        } else {
            &cache.pooled[stage_idx - 1]
        }
    }
}

impl<T: Scalar> OutputGrads<T> {
    fn descriptor_grad(&self, index: usize) -> &Array1<T> {
        match index {
            0 => &self.shape,
            1 => &self.orientation,
            2 => &self.margin,
            3 => &self.echo,
            4 => &self.posterior,
            _ => panic!("descriptor index out of range"),
        }
    }
}
