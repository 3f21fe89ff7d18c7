//! Feature extractor (conv backbone, optional transformer encoder, FC+BN
//! bottleneck) and linear classifier.
//!
//! Parameter groups: `backbone`, `transformer`, `bottleneck`, `classifier`.
//! Batch-norm running statistics are stored as buffers in the group of the
//! layer they belong to.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sfda_tensor::{Bindings, Checkpoint, ParamKind, ParamSet, Real, Tape, Tensor, Var};

use crate::error::{Result, SfdaError};

pub const GROUP_BACKBONE: &str = "backbone";
pub const GROUP_TRANSFORMER: &str = "transformer";
pub const GROUP_BOTTLENECK: &str = "bottleneck";
pub const GROUP_CLASSIFIER: &str = "classifier";

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub conv_channels: Vec<usize>,
    pub image_side: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            conv_channels: vec![16, 32, 64],
            image_side: 32,
        }
    }
}

impl BackboneConfig {
    /// Side `h = w` of the final feature map.
    pub fn feature_side(&self) -> usize {
        self.image_side >> self.conv_channels.len()
    }

    /// Channel count `d̂` of the final feature map.
    pub fn feature_dim(&self) -> usize {
        self.conv_channels.last().copied().unwrap_or(self.in_channels)
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(SfdaError::Config(
                "backbone needs at least one conv layer and nonzero channels".into(),
            ));
        }
        let factor = 1usize
            .checked_shl(self.conv_channels.len() as u32)
            .ok_or_else(|| SfdaError::Config("too many conv layers".into()))?;
        if self.image_side == 0 || self.image_side % factor != 0 {
            return Err(SfdaError::Config(format!(
                "image side {} is not divisible by 2^{}",
                self.image_side,
                self.conv_channels.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    #[serde(default)]
    pub positional_embedding: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            num_layers: 2,
            num_heads: 4,
            embed_dim: 128,
            mlp_hidden: 512,
            positional_embedding: false,
        }
    }
}

impl TransformerConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads.max(1)
    }

    fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.embed_dim == 0 || self.mlp_hidden == 0 {
            return Err(SfdaError::Config("transformer dimensions must be nonzero".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(SfdaError::Config(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub bottleneck_dim: usize,
    pub num_classes: usize,
}

impl HeadConfig {
    pub fn new(num_classes: usize) -> Self {
        HeadConfig {
            bottleneck_dim: 256,
            num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// `None` gives the CNN-only architecture.
    pub transformer: Option<TransformerConfig>,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn cnn(num_classes: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            transformer: None,
            head: HeadConfig::new(num_classes),
        }
    }

    pub fn with_transformer(num_classes: usize) -> Self {
        ModelConfig {
            transformer: Some(TransformerConfig::default()),
            ..ModelConfig::cnn(num_classes)
        }
    }

    /// Number of tokens `u = h·w`.
    pub fn sequence_len(&self) -> usize {
        let s = self.backbone.feature_side();
        s * s
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if let Some(t) = &self.transformer {
            t.validate()?;
        }
        if self.head.num_classes < 2 {
            return Err(SfdaError::Config(format!(
                "need at least 2 classes, got {}",
                self.head.num_classes
            )));
        }
        if self.head.bottleneck_dim == 0 {
            return Err(SfdaError::Config("bottleneck dim must be at least 1".into()));
        }
        Ok(())
    }

    /// Width of the pooled vector that enters the bottleneck.
    fn pooled_dim(&self) -> usize {
        match &self.transformer {
            Some(t) => t.embed_dim,
            None => self.backbone.feature_dim(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are reported back.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Batch statistics observed by one batch-norm layer in a training pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub layer: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    /// `B×h×w×d̂`.
    pub feature_map: Var,
    /// Bottleneck output, `B×d`.
    pub features: Var,
    /// `B×K`.
    pub logits: Var,
    /// One `B×m×u×u` softmax matrix per transformer layer.
    pub attention: Vec<Var>,
    pub bn_stats: Vec<BnStats<T>>,
}

/// Concrete values of an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureOutput<T> {
    pub feature_map: Tensor<T>,
    pub features: Tensor<T>,
    pub logits: Tensor<T>,
    pub attention: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    pub params: ParamSet<T>,
}

fn init_weight<T: Real>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    // zero-mean uniform with variance gain / fan_in
    Tensor::uniform(shape, (3.0 * gain / fan_in as f64).sqrt(), rng)
}

impl<T: Real> Model<T> {
    /// Fresh parameters drawn from a seeded generator.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let tr = ParamKind::Trainable;

        let mut cin = config.backbone.in_channels;
        for (i, &cout) in config.backbone.conv_channels.iter().enumerate() {
            let g = GROUP_BACKBONE;
            p.insert(
                &format!("backbone.conv{i}.weight"),
                g,
                tr,
                init_weight(&[3, 3, cin, cout], 9 * cin, 2.0, &mut rng),
            )?;
            p.insert(&format!("backbone.conv{i}.bias"), g, tr, Tensor::zeros(&[cout]))?;
            insert_bn(&mut p, &format!("backbone.bn{i}"), g, cout)?;
            cin = cout;
        }

        if let Some(t) = &config.transformer {
            let g = GROUP_TRANSFORMER;
            let (dhat, dbar) = (config.backbone.feature_dim(), t.embed_dim);
            p.insert(
                "transformer.embed.weight",
                g,
                tr,
                init_weight(&[dhat, dbar], dhat, 1.0, &mut rng),
            )?;
            p.insert("transformer.embed.bias", g, tr, Tensor::zeros(&[dbar]))?;
            if t.positional_embedding {
                let u = config.sequence_len();
                p.insert("transformer.pos", g, tr, Tensor::uniform(&[u, dbar], 0.02, &mut rng))?;
            }
            for l in 0..t.num_layers {
                let pre = format!("transformer.layer{l}");
                p.insert(&format!("{pre}.ln1.gamma"), g, tr, Tensor::full(&[dbar], T::one()))?;
                p.insert(&format!("{pre}.ln1.beta"), g, tr, Tensor::zeros(&[dbar]))?;
                for name in ["wq", "wk", "wv", "wo"] {
                    p.insert(
                        &format!("{pre}.attn.{name}"),
                        g,
                        tr,
                        init_weight(&[dbar, dbar], dbar, 1.0, &mut rng),
                    )?;
                }
                p.insert(&format!("{pre}.ln2.gamma"), g, tr, Tensor::full(&[dbar], T::one()))?;
                p.insert(&format!("{pre}.ln2.beta"), g, tr, Tensor::zeros(&[dbar]))?;
                let h = t.mlp_hidden;
                p.insert(
                    &format!("{pre}.mlp.fc1.weight"),
                    g,
                    tr,
                    init_weight(&[dbar, h], dbar, 2.0, &mut rng),
                )?;
                p.insert(&format!("{pre}.mlp.fc1.bias"), g, tr, Tensor::zeros(&[h]))?;
                p.insert(
                    &format!("{pre}.mlp.fc2.weight"),
                    g,
                    tr,
                    init_weight(&[h, dbar], h, 1.0, &mut rng),
                )?;
                p.insert(&format!("{pre}.mlp.fc2.bias"), g, tr, Tensor::zeros(&[dbar]))?;
            }
        }

        let (din, d, k) = (config.pooled_dim(), config.head.bottleneck_dim, config.head.num_classes);
        p.insert(
            "bottleneck.fc.weight",
            GROUP_BOTTLENECK,
            tr,
            init_weight(&[din, d], din, 1.0, &mut rng),
        )?;
        p.insert("bottleneck.fc.bias", GROUP_BOTTLENECK, tr, Tensor::zeros(&[d]))?;
        insert_bn(&mut p, "bottleneck.bn", GROUP_BOTTLENECK, d)?;
        p.insert(
            "classifier.weight",
            GROUP_CLASSIFIER,
            tr,
            init_weight(&[d, k], d, 1.0, &mut rng),
        )?;
        p.insert("classifier.bias", GROUP_CLASSIFIER, tr, Tensor::zeros(&[k]))?;
        Ok(Model { config, params: p })
    }

    /// Wraps existing parameters, checking they match the layout `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let reference = Model::<T>::new(config.clone(), 0)?;
        if !reference.params.same_layout(&params) {
            return Err(SfdaError::Manifest(
                "parameter names or shapes do not match the model configuration".into(),
            ));
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Binds trainable tensors as tape leaves (frozen groups as constants).
    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        self.params.bind(tape)
    }

    /// Runs the whole network on `images` (`B×C×S×S`) already on the tape.
    pub fn forward(&self, tape: &mut Tape<T>, b: &Bindings, images: Var, mode: Mode) -> Result<Forward<T>> {
        let mut stats = Vec::new();
        let feature_map = self.backbone_forward(tape, b, images, mode, &mut stats)?;
        let mut attention = Vec::new();
        let pooled = match &self.config.transformer {
            Some(t) => {
                let seq = reshape_to_sequence(tape, feature_map)?;
                let mut z = linear(tape, b, seq, "transformer.embed")?;
                if t.positional_embedding {
                    z = tape.add(z, b.get("transformer.pos")?)?;
                }
                for l in 0..t.num_layers {
                    let layer = LayerVars::bind(b, l)?;
                    let (out, attn) = transformer_layer(tape, &layer, z, t.num_heads)?;
                    attention.push(attn);
                    z = out;
                }
                tape.mean(z, 1)?
            }
            None => tape.avg_pool_global(feature_map)?,
        };
        let h = linear(tape, b, pooled, "bottleneck.fc")?;
        let features = self.batch_norm(tape, b, h, "bottleneck.bn", mode, &mut stats)?;
        let logits = linear(tape, b, features, "classifier")?;
        Ok(Forward {
            feature_map,
            features,
            logits,
            attention,
            bn_stats: stats,
        })
    }

    /// Conv blocks only: `B×C×S×S` in, `B×h×w×d̂` out.
    pub fn backbone_forward(
        &self,
        tape: &mut Tape<T>,
        b: &Bindings,
        images: Var,
        mode: Mode,
        stats: &mut Vec<BnStats<T>>,
    ) -> Result<Var> {
        let bc = &self.config.backbone;
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != bc.in_channels || s[2] != bc.image_side || s[3] != bc.image_side {
            return Err(SfdaError::Dimension(format!(
                "expected images B×{}×{}×{}, got {:?}",
                bc.in_channels, bc.image_side, bc.image_side, s
            )));
        }
        let mut x = tape.permute(images, &[0, 2, 3, 1])?;
        for i in 0..bc.conv_channels.len() {
            x = tape.conv2d(x, b.get(&format!("backbone.conv{i}.weight"))?, 1, 1)?;
            x = tape.add(x, b.get(&format!("backbone.conv{i}.bias"))?)?;
            x = self.batch_norm(tape, b, x, &format!("backbone.bn{i}"), mode, stats)?;
            x = tape.relu(x);
            x = tape.avg_pool2(x)?;
        }
        Ok(x)
    }

    fn batch_norm(
        &self,
        tape: &mut Tape<T>,
        b: &Bindings,
        x: Var,
        layer: &str,
        mode: Mode,
        stats: &mut Vec<BnStats<T>>,
    ) -> Result<Var> {
        let gamma = b.get(&format!("{layer}.gamma"))?;
        let beta = b.get(&format!("{layer}.beta"))?;
        match mode {
            Mode::Train => {
                let (out, mean, var) = tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                stats.push(BnStats {
                    layer: layer.to_string(),
                    mean,
                    var,
                });
                Ok(out)
            }
            Mode::Eval => {
                let rm = self.params.get(&format!("{layer}.running_mean"))?.data();
                let rv = self.params.get(&format!("{layer}.running_var"))?.data();
                Ok(tape.batch_norm_eval(x, gamma, beta, rm, rv, BN_EPS)?)
            }
        }
    }

    /// Folds batch statistics from a training pass into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[BnStats<T>]) -> Result<()> {
        let m = T::from_f64(BN_MOMENTUM);
        for s in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let t = self.params.get_mut(&format!("{}.{}", s.layer, suffix))?;
                for (r, &v) in t.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * v;
                }
            }
        }
        Ok(())
    }

    /// Inference pass without gradient bookkeeping.
    pub fn extract_features(&self, images: &Tensor<T>, mode: Mode) -> Result<FeatureOutput<T>> {
        let mut tape = Tape::new();
        let b = self.params.bind_constant(&mut tape);
        let x = tape.constant(images.clone());
        let f = self.forward(&mut tape, &b, x, mode)?;
        Ok(FeatureOutput {
            feature_map: tape.value(f.feature_map).clone(),
            features: tape.value(f.features).clone(),
            logits: tape.value(f.logits).clone(),
            attention: f.attention.iter().map(|&a| tape.value(a).clone()).collect(),
        })
    }
}

impl Model<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            meta: serde_json::json!({ "model": self.config }),
        }
    }

    /// Rebuilds a model from a checkpoint, optionally requiring a given architecture.
    pub fn from_checkpoint(ck: Checkpoint, expected: Option<&ModelConfig>) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ck.meta.get("model").cloned().unwrap_or_default())
            .map_err(|e| SfdaError::Manifest(format!("checkpoint has no usable model config: {e}")))?;
        if let Some(want) = expected {
            if *want != config {
                return Err(SfdaError::Manifest(format!(
                    "checkpoint architecture {} does not match expected {}",
                    serde_json::to_string(&config).unwrap_or_default(),
                    serde_json::to_string(want).unwrap_or_default()
                )));
            }
        }
        config
            .validate()
            .map_err(|e| SfdaError::Manifest(format!("checkpoint model config is invalid: {e}")))?;
        Model::from_params(config, ck.params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(sfda_tensor::save_checkpoint(
            path,
            &self.params,
            &serde_json::json!({ "model": self.config }),
        )?)
    }

    pub fn load(path: &std::path::Path, expected: Option<&ModelConfig>) -> Result<Self> {
        Self::from_checkpoint(sfda_tensor::load_checkpoint(path)?, expected)
    }
}

fn insert_bn<T: Real>(p: &mut ParamSet<T>, layer: &str, group: &str, ch: usize) -> Result<()> {
    p.insert(
        &format!("{layer}.gamma"),
        group,
        ParamKind::Trainable,
        Tensor::full(&[ch], T::one()),
    )?;
    p.insert(
        &format!("{layer}.beta"),
        group,
        ParamKind::Trainable,
        Tensor::zeros(&[ch]),
    )?;
    p.insert(
        &format!("{layer}.running_mean"),
        group,
        ParamKind::Buffer,
        Tensor::zeros(&[ch]),
    )?;
    p.insert(
        &format!("{layer}.running_var"),
        group,
        ParamKind::Buffer,
        Tensor::full(&[ch], T::one()),
    )?;
    Ok(())
}

fn linear<T: Real>(tape: &mut Tape<T>, b: &Bindings, x: Var, prefix: &str) -> Result<Var> {
    let y = tape.matmul(x, b.get(&format!("{prefix}.weight"))?)?;
    Ok(tape.add(y, b.get(&format!("{prefix}.bias"))?)?)
}

/// `B×h×w×d̂` to `B×u×d̂`; token `i·w + j` is cell `(i, j)`.
pub fn reshape_to_sequence<T: Real>(tape: &mut Tape<T>, f: Var) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 4 {
        return Err(SfdaError::Dimension(format!(
            "feature map must be B×h×w×d, got {:?}",
            s
        )));
    }
    Ok(tape.reshape(f, &[s[0], s[1] * s[2], s[3]])?)
}

/// Tape handles of one transformer layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

impl LayerVars {
    pub fn bind(b: &Bindings, layer: usize) -> Result<Self> {
        let g = |n: &str| b.get(&format!("transformer.layer{layer}.{n}"));
        Ok(LayerVars {
            ln1_gamma: g("ln1.gamma")?,
            ln1_beta: g("ln1.beta")?,
            wq: g("attn.wq")?,
            wk: g("attn.wk")?,
            wv: g("attn.wv")?,
            wo: g("attn.wo")?,
            ln2_gamma: g("ln2.gamma")?,
            ln2_beta: g("ln2.beta")?,
            fc1_weight: g("mlp.fc1.weight")?,
            fc1_bias: g("mlp.fc1.bias")?,
            fc2_weight: g("mlp.fc2.weight")?,
            fc2_bias: g("mlp.fc2.bias")?,
        })
    }
}

/// `Z + concat_h(softmax(Q_h K_hᵀ/√ď) V_h) · W_o` with `Q, K, V` projected from `LN(Z)`.
///
/// Returns the output and the `B×m×u×u` attention weights.
pub fn msa_layer<T: Real>(tape: &mut Tape<T>, lv: &LayerVars, z: Var, heads: usize) -> Result<(Var, Var)> {
    let s = tape.shape(z).to_vec();
    if s.len() != 3 {
        return Err(SfdaError::Dimension(format!("sequence must be B×u×d, got {:?}", s)));
    }
    let (bsz, u, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(SfdaError::Config(format!(
            "embed dim {} is not divisible by {} heads",
            d, heads
        )));
    }
    let dh = d / heads;
    let x = tape.layer_norm(z, lv.ln1_gamma, lv.ln1_beta, LN_EPS)?;
    let split = |tape: &mut Tape<T>, w: Var| -> Result<Var> {
        let p = tape.matmul(x, w)?;
        let p = tape.reshape(p, &[bsz, u, heads, dh])?;
        Ok(tape.permute(p, &[0, 2, 1, 3])?)
    };
    let q = split(tape, lv.wq)?;
    let k = split(tape, lv.wk)?;
    let v = split(tape, lv.wv)?;
    let kt = tape.transpose(k, 2, 3)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
    let attn = tape.softmax(scores, 3)?;
    let heads_out = tape.matmul(attn, v)?;
    let merged = tape.permute(heads_out, &[0, 2, 1, 3])?;
    let merged = tape.reshape(merged, &[bsz, u, d])?;
    let proj = tape.matmul(merged, lv.wo)?;
    Ok((tape.add(z, proj)?, attn))
}

/// `MLP(LN(MSA(Z))) + MSA(Z)` with a ReLU MLP.
pub fn transformer_layer<T: Real>(tape: &mut Tape<T>, lv: &LayerVars, z: Var, heads: usize) -> Result<(Var, Var)> {
    let (m, attn) = msa_layer(tape, lv, z, heads)?;
    let x = tape.layer_norm(m, lv.ln2_gamma, lv.ln2_beta, LN_EPS)?;
    let h = tape.matmul(x, lv.fc1_weight)?;
    let h = tape.add(h, lv.fc1_bias)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, lv.fc2_weight)?;
    let o = tape.add(o, lv.fc2_bias)?;
    Ok((tape.add(o, m)?, attn))
}

/// `θ_T ← m·θ_T + (1 − m)·θ_S` over every tensor outside the classifier group,
/// batch-norm running statistics included.
pub fn ema_update<T: Real>(teacher: &mut Model<T>, student: &Model<T>, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(SfdaError::Config(format!("ema momentum {} outside [0, 1]", momentum)));
    }
    if !teacher.params.same_layout(&student.params) {
        return Err(SfdaError::Contract(
            "teacher and student parameter layouts differ".into(),
        ));
    }
    let m = T::from_f64(momentum);
    let one_minus = T::from_f64(1.0 - momentum);
    for (t, s) in teacher.params.entries_mut().iter_mut().zip(student.params.entries()) {
        if t.group == GROUP_CLASSIFIER {
            continue;
        }
        if momentum == 0.0 {
            t.tensor.data_mut().copy_from_slice(s.tensor.data());
        } else if momentum != 1.0 {
            for (a, &b) in t.tensor.data_mut().iter_mut().zip(s.tensor.data()) {
                *a = m * *a + one_minus * b;
            }
        }
    }
    Ok(())
}
