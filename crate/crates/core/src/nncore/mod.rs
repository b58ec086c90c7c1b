//! A small multilayer perceptron with a hand-written backward pass.
//!
//! Parameters live in one flat vector, layer by layer: the weight matrix of
//! shape `(fan_in, fan_out)` in row-major order, then the bias. The last
//! linear layer is the classifier; everything before it is the backbone.

mod checkpoint;
mod train;

use std::ops::Range;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BtmError, Result};
use crate::rng;

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC};
pub use train::{
    class_balanced_batches, cosine_lr, mixup_batch, mixup_with, one_hot, shuffled_batches, train,
    train_logged, Freeze, Schedule, TrainConfig, TrainOutcome,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
}

/// Offsets of one linear layer inside a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSlice {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

impl Architecture {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        let arch = Self {
            layer_dims,
            activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// `d_in -> hidden... -> n_classes`.
    pub fn mlp(
        d_in: usize,
        hidden: &[usize],
        n_classes: usize,
        activation: Activation,
    ) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(d_in);
        dims.extend_from_slice(hidden);
        dims.push(n_classes);
        Self::new(dims, activation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(BtmError::InvalidArchitecture(
                "need at least input and output dimensions".into(),
            ));
        }
        if self.layer_dims.contains(&0) {
            return Err(BtmError::InvalidArchitecture(format!(
                "zero-width layer in {:?}",
                self.layer_dims
            )));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn layers(&self) -> Vec<LayerSlice> {
        let mut offset = 0;
        self.layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = offset..offset + fan_in * fan_out;
                let bias = weights.end..weights.end + fan_out;
                offset = bias.end;
                LayerSlice {
                    fan_in,
                    fan_out,
                    weights,
                    bias,
                }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Index range of the final linear layer.
    pub fn classifier_range(&self) -> Range<usize> {
        let last = self.layers().pop().expect("validated");
        last.weights.start..last.bias.end
    }

    /// Index range of every layer before the classifier (empty for a
    /// single-layer model).
    pub fn backbone_range(&self) -> Range<usize> {
        0..self.classifier_range().start
    }
}

/// Flat model weights tied to their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    arch: Architecture,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, arch: Architecture) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.param_count() {
            return Err(BtmError::InvalidParams(format!(
                "{} values for an architecture with {} parameters",
                values.len(),
                arch.param_count()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(BtmError::InvalidParams(format!(
                "non-finite value {} at index {i}",
                values[i]
            )));
        }
        Ok(Self { values, arch })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        let n = arch.param_count();
        Self::new(vec![0.0; n], arch)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn backbone(&self) -> &[f64] {
        &self.values[self.arch.backbone_range()]
    }

    pub fn classifier(&self) -> &[f64] {
        &self.values[self.arch.classifier_range()]
    }

    /// Rounds every entry to the nearest f32, as stored in checkpoints.
    pub fn quantized(&self) -> Self {
        Self {
            values: self.values.iter().map(|&v| (v as f32) as f64).collect(),
            arch: self.arch.clone(),
        }
    }

    pub(crate) fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub(crate) fn ensure_same_arch(&self, other: &ParamVector) -> Result<()> {
        if self.arch != other.arch {
            return Err(BtmError::ArchitectureMismatch {
                left: self.arch.layer_dims.clone(),
                right: other.arch.layer_dims.clone(),
            });
        }
        Ok(())
    }

    fn layer_views(&self) -> Vec<(ArrayView2<'_, f64>, ArrayView1<'_, f64>)> {
        self.arch
            .layers()
            .into_iter()
            .map(|l| {
                let w = ArrayView2::from_shape((l.fan_in, l.fan_out), &self.values[l.weights])
                    .expect("layer shape");
                let b = ArrayView1::from(&self.values[l.bias]);
                (w, b)
            })
            .collect()
    }
}

/// Uniform weights in `±1/sqrt(fan_in)`, zero biases.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<ParamVector> {
    arch.validate()?;
    let mut rng = rng::seeded(seed);
    let mut values = vec![0.0; arch.param_count()];
    for layer in arch.layers() {
        let bound = 1.0 / (layer.fan_in as f64).sqrt();
        for w in &mut values[layer.weights] {
            *w = rng.random_range(-bound..bound);
        }
    }
    ParamVector::new(values, arch.clone())
}

fn activate(z: &mut Array2<f64>, activation: Activation) {
    match activation {
        Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
        Activation::Tanh => z.mapv_inplace(f64::tanh),
    }
}

fn check_features(params: &ParamVector, features: &Array2<f64>) -> Result<()> {
    if features.ncols() != params.arch.d_in() {
        return Err(BtmError::DimensionMismatch(format!(
            "features have {} columns, model expects {}",
            features.ncols(),
            params.arch.d_in()
        )));
    }
    Ok(())
}

/// Logits for each feature row.
pub fn forward(params: &ParamVector, features: &Array2<f64>) -> Result<Array2<f64>> {
    check_features(params, features)?;
    let views = params.layer_views();
    let last = views.len() - 1;
    let mut a = features.clone();
    for (l, (w, b)) in views.into_iter().enumerate() {
        let mut z = a.dot(&w) + &b;
        if l < last {
            activate(&mut z, params.arch.activation);
        }
        a = z;
    }
    Ok(a)
}

/// Mean softmax cross-entropy and its gradient.
///
/// Targets are rows of a probability matrix (one-hot, smoothed or mixed);
/// `label_smoothing = eps` replaces them by `(1 - eps) * t + eps / C`.
pub fn loss_and_grad(
    params: &ParamVector,
    features: &Array2<f64>,
    targets: &Array2<f64>,
    label_smoothing: f64,
) -> Result<(f64, ParamVector)> {
    check_features(params, features)?;
    let n_classes = params.arch.n_classes();
    if targets.dim() != (features.nrows(), n_classes) {
        return Err(BtmError::DimensionMismatch(format!(
            "targets {:?}, expected ({}, {n_classes})",
            targets.dim(),
            features.nrows()
        )));
    }
    if features.nrows() == 0 {
        return Err(BtmError::Empty("training batch"));
    }
    if !(0.0..=1.0).contains(&label_smoothing) {
        return Err(BtmError::InvalidConfig(format!(
            "label smoothing {label_smoothing} outside [0, 1]"
        )));
    }
    for (row, t) in targets.rows().into_iter().enumerate() {
        let sum = t.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(BtmError::TargetsNotNormalized { row, sum });
        }
    }
    let targets = if label_smoothing > 0.0 {
        targets.mapv(|t| (1.0 - label_smoothing) * t + label_smoothing / n_classes as f64)
    } else {
        targets.clone()
    };

    let views = params.layer_views();
    let last = views.len() - 1;
    // inputs[l] feeds layer l
    let mut inputs = Vec::with_capacity(views.len());
    let mut a = features.clone();
    for (l, (w, b)) in views.iter().enumerate() {
        let mut z = a.dot(w) + b;
        if l < last {
            activate(&mut z, params.arch.activation);
        }
        inputs.push(a);
        a = z;
    }
    let logits = a;

    let batch = features.nrows() as f64;
    let mut delta = Array2::<f64>::zeros(logits.dim());
    let mut loss = 0.0;
    for ((z, t), mut d) in logits
        .rows()
        .into_iter()
        .zip(targets.rows())
        .zip(delta.rows_mut())
    {
        let peak = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = peak + z.iter().map(|v| (v - peak).exp()).sum::<f64>().ln();
        for ((dj, &zj), &tj) in d.iter_mut().zip(z).zip(t) {
            let log_p = zj - lse;
            loss -= tj * log_p;
            *dj = (log_p.exp() - tj) / batch;
        }
    }
    loss /= batch;

    let mut grad = vec![0.0; params.len()];
    let layers = params.arch.layers();
    for l in (0..views.len()).rev() {
        let input = &inputs[l];
        let dw = input.t().dot(&delta);
        let db = delta.sum_axis(Axis(0));
        grad[layers[l].weights.clone()].copy_from_slice(dw.as_slice().expect("standard layout"));
        grad[layers[l].bias.clone()].copy_from_slice(db.as_slice().expect("standard layout"));
        if l > 0 {
            let mut back = delta.dot(&views[l].0.t());
            // `input` is the activation of layer l-1
            match params.arch.activation {
                Activation::Relu => back.zip_mut_with(input, |g, &x| {
                    if x <= 0.0 {
                        *g = 0.0
                    }
                }),
                Activation::Tanh => back.zip_mut_with(input, |g, &x| *g *= 1.0 - x * x),
            }
            delta = back;
        }
    }
    Ok((loss, ParamVector::new(grad, params.arch.clone())?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng::seeded(seed);
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn param_count_and_partition() {
        let arch = Architecture::new(vec![4, 8, 3], Activation::Relu).unwrap();
        assert_eq!(arch.param_count(), 4 * 8 + 8 + 8 * 3 + 3);
        assert_eq!(arch.backbone_range(), 0..40);
        assert_eq!(arch.classifier_range(), 40..67);
        let single = Architecture::new(vec![4, 3], Activation::Relu).unwrap();
        assert!(single.backbone_range().is_empty());
        assert!(Architecture::new(vec![4], Activation::Relu).is_err());
        assert!(Architecture::new(vec![4, 0, 2], Activation::Relu).is_err());
    }

    #[test]
    fn init_is_seeded_with_zero_bias() {
        let arch = Architecture::new(vec![5, 7, 2], Activation::Tanh).unwrap();
        let a = init_params(&arch, 3).unwrap();
        assert_eq!(a, init_params(&arch, 3).unwrap());
        assert_ne!(a, init_params(&arch, 4).unwrap());
        for layer in arch.layers() {
            assert!(a.values()[layer.bias].iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn init_spread_matches_scaled_uniform() {
        // U(-1/sqrt(n), 1/sqrt(n)) has standard deviation 1/sqrt(3n).
        let arch = Architecture::new(vec![256, 256, 10], Activation::Relu).unwrap();
        let p = init_params(&arch, 0).unwrap();
        let layer = &arch.layers()[0];
        let w = &p.values()[layer.weights.clone()];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let sd = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let expected = 1.0 / (3.0 * 256.0f64).sqrt();
        assert!((sd / expected - 1.0).abs() < 0.1, "sd {sd} vs {expected}");
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let arch = Architecture::new(vec![3, 4, 2], Activation::Relu).unwrap();
        let p = ParamVector::zeros(arch).unwrap();
        let logits = forward(&p, &random_matrix(5, 3, 1)).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_layer() {
        let arch = Architecture::new(vec![1, 1], Activation::Relu).unwrap();
        let p = ParamVector::new(vec![1.0, 0.0], arch).unwrap();
        let x = array![[-2.0], [0.5], [3.0]];
        assert_eq!(forward(&p, &x).unwrap(), x);
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let arch = Architecture::new(vec![3, 5, 4, 2], Activation::Tanh).unwrap();
        let p = init_params(&arch, 9).unwrap();
        let x = random_matrix(6, 3, 2);
        let got = forward(&p, &x).unwrap();
        for (r, row) in x.rows().into_iter().enumerate() {
            let mut a: Vec<f64> = row.to_vec();
            for (l, layer) in arch.layers().iter().enumerate() {
                let v = p.values();
                let mut z = vec![0.0; layer.fan_out];
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj = v[layer.bias.start + j];
                    for (i, ai) in a.iter().enumerate() {
                        *zj += ai * v[layer.weights.start + i * layer.fan_out + j];
                    }
                }
                if l + 1 < arch.n_layers() {
                    z.iter_mut().for_each(|v| *v = v.tanh());
                }
                a = z;
            }
            for (j, expected) in a.iter().enumerate() {
                assert!((got[[r, j]] - expected).abs() <= 1e-6 * expected.abs().max(1.0));
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let arch = Architecture::new(vec![3, 2], Activation::Relu).unwrap();
        let p = ParamVector::zeros(arch).unwrap();
        assert!(matches!(
            forward(&p, &random_matrix(2, 4, 0)),
            Err(BtmError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn uniform_logits_loss_is_log_classes() {
        let arch = Architecture::new(vec![2, 5], Activation::Relu).unwrap();
        let p = ParamVector::zeros(arch).unwrap();
        let x = random_matrix(3, 2, 0);
        let t = one_hot(&[0, 4, 2], 5);
        let (loss, _) = loss_and_grad(&p, &x, &t, 0.0).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn full_smoothing_bias_grad_sums_to_zero() {
        let arch = Architecture::new(vec![3, 4, 6], Activation::Relu).unwrap();
        let p = init_params(&arch, 1).unwrap();
        let (_, g) = loss_and_grad(
            &p,
            &random_matrix(7, 3, 3),
            &one_hot(&[0, 1, 2, 3, 4, 5, 0], 6),
            1.0,
        )
        .unwrap();
        let bias = &g.values()[arch.layers()[1].bias.clone()];
        assert!(bias.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn rejects_unnormalized_targets() {
        let arch = Architecture::new(vec![2, 2], Activation::Relu).unwrap();
        let p = ParamVector::zeros(arch).unwrap();
        let t = array![[0.5, 0.2]];
        assert!(matches!(
            loss_and_grad(&p, &array![[1.0, 1.0]], &t, 0.0),
            Err(BtmError::TargetsNotNormalized { row: 0, .. })
        ));
    }

    #[test]
    fn gradient_matches_central_differences() {
        for (seed, activation) in [
            (0, Activation::Tanh),
            (1, Activation::Relu),
            (2, Activation::Tanh),
        ] {
            let arch = Architecture::new(vec![3, 5, 4], activation).unwrap();
            let p = init_params(&arch, seed).unwrap();
            let x = random_matrix(6, 3, seed + 10);
            let t = one_hot(&[0, 1, 2, 3, 0, 1], 4);
            let (_, g) = loss_and_grad(&p, &x, &t, 0.1).unwrap();
            let h = 1e-5;
            for i in 0..p.len() {
                let mut plus = p.values().to_vec();
                let mut minus = p.values().to_vec();
                plus[i] += h;
                minus[i] -= h;
                let lp = loss_and_grad(&ParamVector::new(plus, arch.clone()).unwrap(), &x, &t, 0.1)
                    .unwrap()
                    .0;
                let lm =
                    loss_and_grad(&ParamVector::new(minus, arch.clone()).unwrap(), &x, &t, 0.1)
                        .unwrap()
                        .0;
                let fd = (lp - lm) / (2.0 * h);
                let scale = g.values()[i].abs().max(fd.abs()).max(1e-3);
                assert!(
                    (g.values()[i] - fd).abs() / scale < 1e-4,
                    "param {i}: {} vs {fd}",
                    g.values()[i]
                );
            }
        }
    }
}
