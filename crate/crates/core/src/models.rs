//! The three hybrid architectures: a CNN feature extractor feeding a GRU
//! over the spatial grid, then two dense layers and softmax.
//!
//! Backbones differ per architecture (branch-concat blocks, paired
//! spatial+pointwise convs, or a plain deeper stack) at desk-scale channel
//! counts; the head is identical: sequence -> dropout -> GRU -> dense ->
//! dense(2) -> softmax. Convolutions are valid, stride 1, 3x3 or 1x1.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::HyperParams;
use crate::error::{Error, Result};
use crate::nn::{
    glorot_uniform, gru::gru_sequence_node, gru::register_gru, GruParams, Graph, NodeId,
    OptimizerState, ParamSet, Tensor,
};
use crate::scalar::{mix_seed, Scalar};

/// The three hybrid architectures.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    /// Branch-concat blocks (mixed 3x3 / 1x1 paths).
    InceptionLike,
    /// Paired spatial 3x3 + pointwise 1x1 convolutions.
    MobileLike,
    /// Plain deeper stack with wider filters.
    EfficientLike,
}

impl ArchId {
    pub const ALL: [ArchId; 3] = [ArchId::InceptionLike, ArchId::MobileLike, ArchId::EfficientLike];

    /// Short letter used by the CLI and artifact names.
    pub fn letter(self) -> &'static str {
        match self {
            ArchId::InceptionLike => "a",
            ArchId::MobileLike => "b",
            ArchId::EfficientLike => "c",
        }
    }

    pub fn from_letter(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(ArchId::InceptionLike),
            "b" => Ok(ArchId::MobileLike),
            "c" => Ok(ArchId::EfficientLike),
            other => Err(Error::Argument(format!(
                "unknown architecture {:?} (expected a, b, or c)",
                other
            ))),
        }
    }
}

/// One backbone block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// 3x3 branch and 1x1 branch concatenated along channels.
    Branch { main: usize, side: usize },
    /// 3x3 spatial conv followed by a 1x1 pointwise conv.
    Paired { spatial: usize, point: usize },
    /// Single 3x3 conv.
    Plain { filters: usize },
}

impl BlockKind {
    fn out_channels(&self) -> usize {
        match self {
            BlockKind::Branch { main, side } => main + side,
            BlockKind::Paired { point, .. } => *point,
            BlockKind::Plain { filters } => *filters,
        }
    }
}

/// Everything needed to rebuild a model's computation graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ArchId,
    /// `(height, width, channels)`; channels are always 3.
    pub input_shape: (usize, usize, usize),
    pub blocks: Vec<BlockSpec>,
    pub gru_units: usize,
    /// Widths of the two dense layers after the GRU; the second is the
    /// class count.
    pub dense_units: (usize, usize),
    pub dropout_rate: f64,
    pub n_classes: usize,
}

impl ModelSpec {
    pub fn for_arch(arch: ArchId, input_hw: (usize, usize), h: &HyperParams) -> Self {
        let blocks = match arch {
            ArchId::InceptionLike => vec![
                BlockSpec { kind: BlockKind::Branch { main: 6, side: 2 }, pool: true },
                BlockSpec { kind: BlockKind::Branch { main: 12, side: 4 }, pool: true },
                BlockSpec { kind: BlockKind::Branch { main: 24, side: 8 }, pool: true },
            ],
            ArchId::MobileLike => vec![
                BlockSpec { kind: BlockKind::Paired { spatial: 8, point: 8 }, pool: true },
                BlockSpec { kind: BlockKind::Paired { spatial: 16, point: 16 }, pool: true },
                BlockSpec { kind: BlockKind::Paired { spatial: 32, point: 32 }, pool: true },
            ],
            ArchId::EfficientLike => vec![
                BlockSpec { kind: BlockKind::Plain { filters: 12 }, pool: true },
                BlockSpec { kind: BlockKind::Plain { filters: 24 }, pool: true },
                BlockSpec { kind: BlockKind::Plain { filters: 48 }, pool: true },
                BlockSpec { kind: BlockKind::Plain { filters: 64 }, pool: false },
            ],
        };
        let units = h.units as usize;
        ModelSpec {
            arch,
            input_shape: (input_hw.0, input_hw.1, 3),
            blocks,
            gru_units: units,
            dense_units: ((units / 2).max(1), 2),
            dropout_rate: h.dropout_rate,
            n_classes: 2,
        }
    }

    /// Spatial/channel dims of the backbone output, validating that every
    /// block fits the running feature size.
    pub fn feature_dims(&self) -> Result<(usize, usize, usize)> {
        let (mut h, mut w, mut c) = self.input_shape;
        for (i, block) in self.blocks.iter().enumerate() {
            let after_conv = |h: usize, w: usize| -> Result<(usize, usize)> {
                if h < 3 || w < 3 {
                    Err(Error::Shape(format!(
                        "block {} needs at least 3x3 input, got {}x{}",
                        i, h, w
                    )))
                } else {
                    Ok((h - 2, w - 2))
                }
            };
            match &block.kind {
                BlockKind::Branch { .. } | BlockKind::Paired { .. } | BlockKind::Plain { .. } => {
                    let (nh, nw) = after_conv(h, w)?;
                    h = nh;
                    w = nw;
                }
            }
            c = block.kind.out_channels();
            if block.pool {
                if h < 2 || w < 2 {
                    return Err(Error::Shape(format!(
                        "block {} pool needs at least 2x2 input, got {}x{}",
                        i, h, w
                    )));
                }
                h = (h - 2) / 2 + 1;
                w = (w - 2) / 2 + 1;
            }
        }
        Ok((h, w, c))
    }
}

/// Per-epoch training record.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// A model: spec, named parameters, seed, and training history.
#[derive(Clone, Debug)]
pub struct Model<S> {
    pub spec: ModelSpec,
    pub hyper: HyperParams,
    pub params: ParamSet<S>,
    pub seed: u64,
    pub history: Vec<EpochStats>,
}

/// Images with labels, all preprocessed to one shape.
#[derive(Clone, Debug, Default)]
pub struct LabeledImages<S> {
    pub images: Vec<Tensor<S>>,
    pub labels: Vec<u8>,
}

impl<S: Scalar> LabeledImages<S> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, image: Tensor<S>, label: u8) {
        self.images.push(image);
        self.labels.push(label);
    }
}

/// Reinterpret a `[N,h,w,c]` feature map as a `[N, h*w, c]` sequence:
/// spatial positions become time steps in row-major order.
pub fn features_to_sequence<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "features_to_sequence expects [N,h,w,c], got {:?}",
            s
        )));
    }
    t.reshape(&[s[0], s[1] * s[2], s[3]])
}

fn conv_layer<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    name: &str,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<NodeId> {
    let wn = g.param(&format!("{name}.w"), w.clone());
    let bn = g.param(&format!("{name}.b"), b.clone());
    let y = g.conv2d(x, wn)?;
    let s = g.value(y).shape().to_vec();
    let flat = g.reshape(y, &[s[0] * s[1] * s[2], s[3]])?;
    let biased = g.add_bias(flat, bn)?;
    let back = g.reshape(biased, &s)?;
    Ok(g.relu(back))
}

impl<S: Scalar> Model<S> {
    /// Build the forward graph up to the softmax output node.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        x: NodeId,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let mut cur = x;
        for (i, block) in self.spec.blocks.iter().enumerate() {
            let prefix = format!("block{i}");
            cur = match &block.kind {
                BlockKind::Branch { .. } => {
                    let main = conv_layer(
                        g,
                        cur,
                        &format!("{prefix}.main"),
                        &self.params[&format!("{prefix}.main.w")],
                        &self.params[&format!("{prefix}.main.b")],
                    )?;
                    let side = conv_layer(
                        g,
                        cur,
                        &format!("{prefix}.side"),
                        &self.params[&format!("{prefix}.side.w")],
                        &self.params[&format!("{prefix}.side.b")],
                    )?;
                    let ms = g.value(main).shape().to_vec();
                    let cropped = g.center_crop(side, ms[1], ms[2])?;
                    g.concat_channels(main, cropped)?
                }
                BlockKind::Paired { .. } => {
                    let spatial = conv_layer(
                        g,
                        cur,
                        &format!("{prefix}.spatial"),
                        &self.params[&format!("{prefix}.spatial.w")],
                        &self.params[&format!("{prefix}.spatial.b")],
                    )?;
                    conv_layer(
                        g,
                        spatial,
                        &format!("{prefix}.point"),
                        &self.params[&format!("{prefix}.point.w")],
                        &self.params[&format!("{prefix}.point.b")],
                    )?
                }
                BlockKind::Plain { .. } => conv_layer(
                    g,
                    cur,
                    &format!("{prefix}.conv"),
                    &self.params[&format!("{prefix}.conv.w")],
                    &self.params[&format!("{prefix}.conv.b")],
                )?,
            };
            if block.pool {
                cur = g.maxpool2d(cur, 2, 2)?;
            }
        }

        // Head: sequence over spatial positions -> dropout -> GRU -> two
        // dense layers -> softmax.
        let fs = g.value(cur).shape().to_vec();
        let seq = g.reshape(cur, &[fs[0], fs[1] * fs[2], fs[3]])?;
        let seq = g.dropout(seq, self.spec.dropout_rate, rng, training)?;

        let gru = GruParams {
            w_xr: self.params["gru.w_xr"].clone(),
            w_hr: self.params["gru.w_hr"].clone(),
            b_r: self.params["gru.b_r"].clone(),
            w_xz: self.params["gru.w_xz"].clone(),
            w_hz: self.params["gru.w_hz"].clone(),
            b_z: self.params["gru.b_z"].clone(),
            w_xh: self.params["gru.w_xh"].clone(),
            w_hh: self.params["gru.w_hh"].clone(),
            b_h: self.params["gru.b_h"].clone(),
            input_dim: fs[3],
            hidden_dim: self.spec.gru_units,
        };
        let nodes = register_gru(g, "gru", &gru)?;
        let h0 = g.input(Tensor::zeros(&[fs[0], self.spec.gru_units]));
        let hidden = gru_sequence_node(g, seq, h0, &nodes)?;

        let w1 = g.param("fc1.w", self.params["fc1.w"].clone());
        let b1 = g.param("fc1.b", self.params["fc1.b"].clone());
        let d1 = g.dense(hidden, w1, b1)?;
        let d1 = g.relu(d1);
        let w2 = g.param("fc2.w", self.params["fc2.w"].clone());
        let b2 = g.param("fc2.b", self.params["fc2.b"].clone());
        let d2 = g.dense(d1, w2, b2)?;
        g.softmax(d2)
    }

    /// Per-image class probabilities with dropout disabled.
    pub fn predict_proba(&self, images: &[Tensor<S>]) -> Result<Vec<[f64; 2]>> {
        let mut out = Vec::with_capacity(images.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for chunk in images.chunks(64) {
            let batch = stack(chunk, &self.spec.input_shape)?;
            let mut g = Graph::new();
            let x = g.input(batch);
            let probs = self.forward(&mut g, x, false, &mut rng)?;
            let data = g.value(probs).data();
            for row in data.chunks(self.spec.n_classes) {
                out.push([row[0].to_f64().unwrap(), row[1].to_f64().unwrap()]);
            }
        }
        Ok(out)
    }

    /// Mean cross-entropy and accuracy over a labelled set.
    pub fn evaluate(&self, set: &LabeledImages<S>) -> Result<(f64, f64)> {
        let probs = self.predict_proba(&set.images)?;
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (p, &l) in probs.iter().zip(&set.labels) {
            loss -= p[l as usize].max(1e-12).ln();
            let pred = if p[1] > p[0] { 1 } else { 0 };
            if pred == l {
                correct += 1;
            }
        }
        let n = set.len() as f64;
        Ok((loss / n, correct as f64 / n))
    }
}

/// Stack images of one shape into a `[N,H,W,C]` batch.
fn stack<S: Scalar>(images: &[Tensor<S>], input_shape: &(usize, usize, usize)) -> Result<Tensor<S>> {
    let want = [input_shape.0, input_shape.1, input_shape.2];
    let mut data = Vec::with_capacity(images.len() * want.iter().product::<usize>());
    for img in images {
        if img.shape() != want {
            return Err(Error::Shape(format!(
                "image shape {:?} does not match model input {:?}",
                img.shape(),
                want
            )));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(&[images.len(), want[0], want[1], want[2]], data)
}

/// Create an untrained model with seeded Glorot-uniform weights.
pub fn build_model<S: Scalar>(
    arch: ArchId,
    h: &HyperParams,
    input_hw: (usize, usize),
    seed: u64,
) -> Result<Model<S>> {
    if h.units == 0 {
        return Err(Error::Argument("units must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&h.dropout_rate) {
        return Err(Error::Argument(format!(
            "dropout rate {} outside [0,1)",
            h.dropout_rate
        )));
    }
    let spec = ModelSpec::for_arch(arch, input_hw, h);
    let (_, _, feat_c) = spec.feature_dims()?;

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x1217]));
    let mut params = ParamSet::new();
    let conv = |params: &mut ParamSet<S>,
                    rng: &mut ChaCha8Rng,
                    name: String,
                    kh: usize,
                    kw: usize,
                    ci: usize,
                    co: usize| {
        let w = glorot_uniform(&[kh, kw, ci, co], kh * kw * ci, kh * kw * co, rng);
        params.insert(format!("{name}.w"), w);
        params.insert(format!("{name}.b"), Tensor::zeros(&[co]));
    };

    let mut c_in = spec.input_shape.2;
    for (i, block) in spec.blocks.iter().enumerate() {
        let prefix = format!("block{i}");
        match &block.kind {
            BlockKind::Branch { main, side } => {
                conv(&mut params, &mut rng, format!("{prefix}.main"), 3, 3, c_in, *main);
                conv(&mut params, &mut rng, format!("{prefix}.side"), 1, 1, c_in, *side);
            }
            BlockKind::Paired { spatial, point } => {
                conv(&mut params, &mut rng, format!("{prefix}.spatial"), 3, 3, c_in, *spatial);
                conv(&mut params, &mut rng, format!("{prefix}.point"), 1, 1, *spatial, *point);
            }
            BlockKind::Plain { filters } => {
                conv(&mut params, &mut rng, format!("{prefix}.conv"), 3, 3, c_in, *filters);
            }
        }
        c_in = block.kind.out_channels();
    }

    let u = spec.gru_units;
    let d = feat_c;
    for name in ["w_xr", "w_xz", "w_xh"] {
        params.insert(format!("gru.{name}"), glorot_uniform(&[d, u], d, u, &mut rng));
    }
    for name in ["w_hr", "w_hz", "w_hh"] {
        params.insert(format!("gru.{name}"), glorot_uniform(&[u, u], u, u, &mut rng));
    }
    for name in ["b_r", "b_z", "b_h"] {
        params.insert(format!("gru.{name}"), Tensor::zeros(&[u]));
    }

    let (d1, d2) = spec.dense_units;
    params.insert("fc1.w".into(), glorot_uniform(&[u, d1], u, d1, &mut rng));
    params.insert("fc1.b".into(), Tensor::zeros(&[d1]));
    params.insert("fc2.w".into(), glorot_uniform(&[d1, d2], d1, d2, &mut rng));
    params.insert("fc2.b".into(), Tensor::zeros(&[d2]));

    Ok(Model {
        spec,
        hyper: h.clone(),
        params,
        seed,
        history: Vec::new(),
    })
}

/// Train with the optimizer named in `h`, recording per-epoch history and
/// returning the parameters that achieved the lowest validation loss.
pub fn train<S: Scalar>(
    mut model: Model<S>,
    train_set: &LabeledImages<S>,
    val_set: &LabeledImages<S>,
    epochs: usize,
    batch_size: usize,
    h: &HyperParams,
    seed: u64,
) -> Result<Model<S>> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("train and validation sets must be non-empty".into()));
    }
    if batch_size == 0 || batch_size > train_set.len() {
        return Err(Error::Argument(format!(
            "batch size {} must be in [1, {}]",
            batch_size,
            train_set.len()
        )));
    }
    let mut opt = OptimizerState::new(h.optimizer, h.learning_rate, h.momentum)?;
    let mut history = Vec::with_capacity(epochs);
    let mut best_params = model.params.clone();
    let mut best_val = f64::INFINITY;

    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0xe90c, epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for (batch_idx, ids) in order.chunks(batch_size).enumerate() {
            let images: Vec<Tensor<S>> = ids.iter().map(|&i| train_set.images[i].clone()).collect();
            let labels: Vec<usize> = ids.iter().map(|&i| train_set.labels[i] as usize).collect();
            let batch = stack(&images, &model.spec.input_shape)?;

            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                seed,
                &[0xd209, epoch as u64, batch_idx as u64],
            ));
            let mut g = Graph::new();
            let x = g.input(batch);
            let probs = model.forward(&mut g, x, true, &mut rng)?;
            let loss = g.cross_entropy(probs, &labels)?;
            let loss_value = g.value(loss).data()[0].to_f64().unwrap();
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_loss += loss_value * ids.len() as f64;
            for (row, &l) in g.value(probs).data().chunks(2).zip(&labels) {
                if (row[1] > row[0]) == (l == 1) {
                    epoch_correct += 1;
                }
            }
            g.backward(loss)?;
            let grads = g.param_grads()?;
            opt.step(&mut model.params, &grads)?;
        }

        let (val_loss, val_acc) = model.evaluate(val_set)?;
        history.push(EpochStats {
            train_loss: epoch_loss / train_set.len() as f64,
            train_acc: epoch_correct as f64 / train_set.len() as f64,
            val_loss,
            val_acc,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_params = model.params.clone();
        }
    }

    model.params = best_params;
    model.history = history;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::OutputActivation;
    use crate::nn::OptimizerKind;

    fn small_h(units: u32) -> HyperParams {
        HyperParams {
            units,
            activation: OutputActivation::Softmax,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.05,
            momentum: 0.9,
            dropout_rate: 0.1,
        }
    }

    fn blobs(n_per_class: usize, size: usize, seed: u64) -> LabeledImages<f32> {
        // Class 0: bright centered disk; class 1: dark disk on bright ring.
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = LabeledImages::default();
        for label in 0..2u8 {
            for _ in 0..n_per_class {
                let mut data = vec![0.0f32; size * size * 3];
                let c = (size as f64 - 1.0) / 2.0;
                let r0 = size as f64 * if label == 0 { 0.22 } else { 0.38 };
                for y in 0..size {
                    for x in 0..size {
                        let d = (((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt()
                            - if label == 0 { 0.0 } else { r0 * 0.8 })
                        .abs();
                        let v = (-d * d / (2.0 * (r0 * 0.5).powi(2))).exp() * 0.8
                            + rng.random::<f64>() * 0.1;
                        for ch in 0..3 {
                            data[(y * size + x) * 3 + ch] = v.clamp(0.0, 1.0) as f32;
                        }
                    }
                }
                set.push(Tensor::from_vec(&[size, size, 3], data).unwrap(), label);
            }
        }
        set
    }

    #[test]
    fn build_is_deterministic_and_arch_specific() {
        let h = small_h(16);
        let a1: Model<f32> = build_model(ArchId::InceptionLike, &h, (32, 32), 9).unwrap();
        let a2: Model<f32> = build_model(ArchId::InceptionLike, &h, (32, 32), 9).unwrap();
        for (k, v) in &a1.params {
            assert_eq!(v, &a2.params[k], "parameter {k} differs");
        }
        let b: Model<f32> = build_model(ArchId::MobileLike, &h, (32, 32), 9).unwrap();
        let names_a: Vec<&String> = a1.params.keys().collect();
        let names_b: Vec<&String> = b.params.keys().collect();
        assert_ne!(names_a, names_b);
    }

    #[test]
    fn units_flow_into_gru_width() {
        let h = small_h(512);
        let m: Model<f32> = build_model(ArchId::MobileLike, &h, (64, 64), 1).unwrap();
        assert_eq!(m.params["gru.w_hh"].shape(), &[512, 512]);
        assert_eq!(m.spec.gru_units, 512);
    }

    #[test]
    fn unknown_arch_letter_is_error() {
        assert!(ArchId::from_letter("z").is_err());
        assert_eq!(ArchId::from_letter("B").unwrap(), ArchId::MobileLike);
    }

    #[test]
    fn head_structure_contract() {
        // Exactly one GRU stage, two dense layers after it, final width 2.
        let h = small_h(16);
        for arch in ArchId::ALL {
            let m: Model<f32> = build_model(arch, &h, (32, 32), 3).unwrap();
            let gru_weight_sets = m
                .params
                .keys()
                .filter(|k| k.starts_with("gru."))
                .count();
            assert_eq!(gru_weight_sets, 9);
            let dense: Vec<&String> = m.params.keys().filter(|k| k.starts_with("fc")).collect();
            assert_eq!(dense.len(), 4);
            assert_eq!(m.params["fc2.w"].shape()[1], 2);
            assert_eq!(m.spec.dense_units.1, 2);
        }
    }

    #[test]
    fn features_to_sequence_ordering() {
        // 2x2x3 map: steps in row-major order (0,0),(0,1),(1,0),(1,1).
        let t = Tensor::from_vec(
            &[1, 2, 2, 3],
            (0..12).map(|v| v as f64).collect(),
        )
        .unwrap();
        let seq = features_to_sequence(&t).unwrap();
        assert_eq!(seq.shape(), &[1, 4, 3]);
        assert_eq!(&seq.data()[0..3], &[0.0, 1.0, 2.0]);
        assert_eq!(&seq.data()[9..12], &[9.0, 10.0, 11.0]);

        let single = Tensor::<f64>::zeros(&[2, 1, 1, 5]);
        assert_eq!(features_to_sequence(&single).unwrap().shape(), &[2, 1, 5]);

        let big = Tensor::<f32>::zeros(&[1, 5, 5, 1536]);
        assert_eq!(features_to_sequence(&big).unwrap().shape(), &[1, 25, 1536]);
    }

    #[test]
    fn predict_proba_rows_sum_to_one_and_are_deterministic() {
        let h = small_h(16);
        let m: Model<f32> = build_model(ArchId::EfficientLike, &h, (32, 32), 5).unwrap();
        let set = blobs(4, 32, 2);
        let probs = m.predict_proba(&set.images).unwrap();
        for p in &probs {
            assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
        }
        let dup = vec![set.images[0].clone(), set.images[0].clone()];
        let p2 = m.predict_proba(&dup).unwrap();
        assert_eq!(p2[0], p2[1]);
    }

    #[test]
    fn wrong_input_shape_is_shape_error() {
        let h = small_h(16);
        let m: Model<f32> = build_model(ArchId::MobileLike, &h, (32, 32), 5).unwrap();
        let wrong = vec![Tensor::<f32>::zeros(&[16, 16, 3])];
        assert!(matches!(m.predict_proba(&wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let h = small_h(16);
        let m: Model<f32> = build_model(ArchId::MobileLike, &h, (32, 32), 5).unwrap();
        let initial = m.params.clone();
        let set = blobs(4, 32, 3);
        let trained = train(m, &set, &set, 0, 4, &h, 1).unwrap();
        assert!(trained.history.is_empty());
        for (k, v) in &trained.params {
            assert_eq!(v, &initial[k]);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let h = small_h(16);
        let set = blobs(6, 32, 4);
        let m1: Model<f32> = build_model(ArchId::MobileLike, &h, (32, 32), 5).unwrap();
        let m2: Model<f32> = build_model(ArchId::MobileLike, &h, (32, 32), 5).unwrap();
        let t1 = train(m1, &set, &set, 2, 4, &h, 11).unwrap();
        let t2 = train(m2, &set, &set, 2, 4, &h, 11).unwrap();
        assert_eq!(t1.history, t2.history);
        for (k, v) in &t1.params {
            assert_eq!(v, &t2.params[k]);
        }
    }

    #[test]
    fn best_checkpoint_matches_minimum_val_loss() {
        let h = small_h(16);
        let set = blobs(8, 32, 6);
        let m: Model<f32> = build_model(ArchId::EfficientLike, &h, (32, 32), 2).unwrap();
        let trained = train(m, &set, &set, 4, 8, &h, 3).unwrap();
        let min_val = trained
            .history
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        let (val_loss, _) = trained.evaluate(&set).unwrap();
        assert!((val_loss - min_val).abs() < 1e-9);
    }

    #[test]
    fn one_training_step_decreases_single_sample_loss() {
        let mut h = small_h(16);
        h.learning_rate = 1e-3;
        h.momentum = 0.0;
        h.dropout_rate = 0.0;
        for seed in 0..10 {
            let m: Model<f64> = build_model(ArchId::MobileLike, &h, (24, 24), seed).unwrap();
            let set = blobs(1, 24, seed + 50);
            let one = LabeledImages {
                images: vec![set.images[0].clone()],
                labels: vec![set.labels[0]],
            };
            let (before, _) = m.evaluate(&one).unwrap();
            let trained = train(m, &one, &one, 1, 1, &h, seed).unwrap();
            // Best-val snapshotting cannot hide a regression with one epoch:
            // evaluate the final parameters directly.
            let (after, _) = trained.evaluate(&one).unwrap();
            assert!(after < before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn overfits_one_sample_to_high_confidence() {
        let mut h = small_h(16);
        h.learning_rate = 0.05;
        h.dropout_rate = 0.0;
        let set = blobs(1, 24, 77);
        let one = LabeledImages {
            images: vec![set.images[0].clone()],
            labels: vec![set.labels[0]],
        };
        let m: Model<f32> = build_model(ArchId::MobileLike, &h, (24, 24), 1).unwrap();
        let trained = train(m, &one, &one, 60, 1, &h, 2).unwrap();
        let p = trained.predict_proba(&one.images).unwrap();
        assert!(p[0][one.labels[0] as usize] >= 0.99, "{:?}", p[0]);
    }

    #[test]
    fn separable_blobs_reach_95_percent_validation() {
        let mut h = small_h(16);
        h.learning_rate = 0.02;
        let train_set = blobs(20, 32, 8);
        let val_set = blobs(8, 32, 9);
        let m: Model<f32> = build_model(ArchId::MobileLike, &h, (32, 32), 4).unwrap();
        let trained = train(m, &train_set, &val_set, 20, 8, &h, 5).unwrap();
        let best = trained
            .history
            .iter()
            .map(|e| e.val_acc)
            .fold(0.0, f64::max);
        assert!(best >= 0.95, "history: {:?}", trained.history);
    }

    #[test]
    fn overfit_capacity_eight_samples() {
        let mut h = small_h(16);
        h.learning_rate = 0.03;
        h.dropout_rate = 0.0;
        for arch in ArchId::ALL {
            for seed in 0..3 {
                let set = blobs(4, 32, 100 + seed);
                let m: Model<f32> = build_model(arch, &h, (32, 32), seed).unwrap();
                let mut reached = false;
                let mut model = m;
                for _ in 0..10 {
                    model = train(model, &set, &set, 20, 8, &h, seed).unwrap();
                    if model.history.iter().any(|e| e.train_acc == 1.0) {
                        reached = true;
                        break;
                    }
                }
                assert!(reached, "{:?} seed {} never reached 100% on 8 samples", arch, seed);
            }
        }
    }

    #[test]
    fn batch_size_larger_than_set_is_error() {
        let h = small_h(16);
        let set = blobs(2, 32, 1);
        let m: Model<f32> = build_model(ArchId::MobileLike, &h, (32, 32), 5).unwrap();
        assert!(train(m, &set, &set, 1, 64, &h, 1).is_err());
    }
}
