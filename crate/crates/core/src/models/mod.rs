//! Differentiable classifiers and the classification functionals built on their logits.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{decode_container, encode_container, read_container, write_container};

use crate::autodiff::{runner_up_index, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Architecture descriptor; determines parameter shapes and order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    /// Fully connected layers `widths[0] -> ... -> widths[last]`; the last width is the class count.
    Mlp { widths: Vec<usize>, activation: Activation },
    /// `2 x (conv3x3 -> act -> maxpool2) -> dense`.
    Conv {
        in_channels: usize,
        height: usize,
        width: usize,
        channels: [usize; 2],
        classes: usize,
        activation: Activation,
    },
}

impl Architecture {
    pub fn mlp(widths: &[usize], activation: Activation) -> Self {
        Architecture::Mlp { widths: widths.to_vec(), activation }
    }

    /// Desk-scale MNIST default: 784-512-256-10 ReLU.
    pub fn mnist_mlp() -> Self {
        Self::mlp(&[784, 512, 256, 10], Activation::Relu)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Mlp { widths, .. } => {
                if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
                    return Err(Error::Config(format!("invalid MLP widths {widths:?}")));
                }
                if *widths.last().unwrap() < 2 {
                    return Err(Error::Config("need at least two classes".into()));
                }
            }
            Architecture::Conv { in_channels, height, width, channels, classes, .. } => {
                if *in_channels == 0 || *height < 4 || *width < 4 || channels.contains(&0) || *classes < 2 {
                    return Err(Error::Config(format!("invalid conv architecture {self:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Architecture::Mlp { widths, .. } => *widths.last().unwrap(),
            Architecture::Conv { classes, .. } => *classes,
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Architecture::Mlp { widths, .. } => vec![widths[0]],
            Architecture::Conv { in_channels, height, width, .. } => vec![*in_channels, *height, *width],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape().iter().product()
    }

    pub fn activation(&self) -> Activation {
        match self {
            Architecture::Mlp { activation, .. } | Architecture::Conv { activation, .. } => *activation,
        }
    }

    /// Parameter shapes in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            Architecture::Mlp { widths, .. } => widths
                .windows(2)
                .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
                .collect(),
            Architecture::Conv { in_channels, height, width, channels, classes, .. } => {
                let flat = channels[1] * (height / 4) * (width / 4);
                vec![
                    vec![channels[0], *in_channels, 3, 3],
                    vec![channels[0]],
                    vec![channels[1], channels[0], 3, 3],
                    vec![channels[1]],
                    vec![flat, *classes],
                    vec![*classes],
                ]
            }
        }
    }

    fn fan_in(shape: &[usize]) -> usize {
        match shape.len() {
            4 => shape[1] * shape[2] * shape[3],
            _ => shape[0],
        }
    }
}

/// Labeled examples; `x` is `[batch, ..input shape]` with values in the model's input range.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch<T: Scalar = f32> {
    pub x: Tensor<T>,
    pub y: Vec<usize>,
}

impl<T: Scalar> LabeledBatch<T> {
    pub fn new(x: Tensor<T>, y: Vec<usize>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::shape("batch", format!("{} rows, {} labels", x.rows(), y.len())));
        }
        Ok(LabeledBatch { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if let Some(&bad) = self.y.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(())
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        LabeledBatch { x: self.x.select_rows(idx), y: idx.iter().map(|&i| self.y[i]).collect() }
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        LabeledBatch { x: self.x.slice_rows(start, end), y: self.y[start..end].to_vec() }
    }
}

/// Output of [`Model::record`].
pub struct RecordedForward {
    pub logits: Var,
    pub params: Vec<Var>,
}

/// Parameterized classifier `f_theta: input -> K logits`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    arch: Architecture,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        let mut params = Vec::with_capacity(shapes.len());
        for pair in shapes.chunks(2) {
            let bound = 1.0 / (Architecture::fan_in(&pair[0]) as f64).sqrt();
            for shape in pair {
                let n = shape.iter().product();
                let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
                params.push(Tensor::new(shape.clone(), data)?);
            }
        }
        Ok(Model { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<Tensor<T>>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(Error::shape(
                "model",
                format!(
                    "parameters {:?} do not match architecture {:?}",
                    params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>(),
                    shapes
                ),
            ));
        }
        Ok(Model { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { arch: self.arch.clone(), params: self.params.iter().map(Tensor::cast).collect() }
    }

    /// SHA-256 over the architecture and the exact parameter bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).unwrap_or_default());
        for p in &self.params {
            for &v in p.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Record the forward pass on `tape`. Parameters become leaves so callers may request
    /// their gradients.
    pub fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<RecordedForward> {
        let xs = tape.value(x).shape().to_vec();
        let batch = xs.first().copied().unwrap_or(0);
        let per_example: usize = xs.iter().skip(1).product();
        if xs.len() < 2 || per_example != self.input_dim() {
            return Err(Error::shape(
                "forward",
                format!("input {xs:?} does not match model input {:?}", self.arch.input_shape()),
            ));
        }
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone())).collect::<Result<_>>()?;
        let act = self.arch.activation();
        let apply = |tape: &mut Tape<T>, v: Var| match act {
            Activation::Relu => tape.relu(v),
            Activation::Tanh => tape.tanh(v),
        };
        let logits = match &self.arch {
            Architecture::Mlp { widths, .. } => {
                let mut h = tape.reshape(x, &[batch, widths[0]])?;
                let layers = params.len() / 2;
                for l in 0..layers {
                    h = tape.matmul(h, params[2 * l])?;
                    h = tape.add_bias(h, params[2 * l + 1])?;
                    if l + 1 < layers {
                        h = apply(tape, h)?;
                    }
                }
                h
            }
            Architecture::Conv { in_channels, height, width, channels, .. } => {
                let mut h = tape.reshape(x, &[batch, *in_channels, *height, *width])?;
                h = tape.conv2d(h, params[0], params[1], 1)?;
                h = apply(tape, h)?;
                h = tape.max_pool2(h)?;
                h = tape.conv2d(h, params[2], params[3], 1)?;
                h = apply(tape, h)?;
                h = tape.max_pool2(h)?;
                let flat = channels[1] * (height / 2 / 2) * (width / 2 / 2);
                h = tape.reshape(h, &[batch, flat])?;
                h = tape.matmul(h, params[4])?;
                tape.add_bias(h, params[5])?
            }
        };
        Ok(RecordedForward { logits, params })
    }

    /// Logits `[batch, K]` without gradient bookkeeping.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone())?;
        let fwd = self.record(&mut tape, xv)?;
        Ok(tape.value(fwd.logits).clone())
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(predict_from_logits(&self.logits(x)?))
    }

    /// Per-example cross-entropy losses and their input gradients (sum reduction, so row `i`
    /// of the gradient is `d loss_i / d x_i`). The model is not modified.
    pub fn loss_and_input_grad(&self, x: &Tensor<T>, y: &[usize]) -> Result<(Vec<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone())?;
        let fwd = self.record(&mut tape, xv)?;
        let ones = vec![T::one(); y.len()];
        let loss = tape.cross_entropy(fwd.logits, y, &ones)?;
        let losses = cross_entropy_per_example(tape.value(fwd.logits), y)?;
        let grad = tape.backward(loss, &[xv])?.into_tensors().remove(0);
        Ok((losses, grad))
    }
}

/// Gradient of the per-example cross-entropy with respect to the input.
pub fn grad_x_loss<T: Scalar>(model: &Model<T>, x: &Tensor<T>, y: &[usize]) -> Result<Tensor<T>> {
    Ok(model.loss_and_input_grad(x, y)?.1)
}

/// Row-wise softmax of `[batch, K]` logits (max-subtracted).
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.row_len();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k.max(1)) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v.as_f64()));
        let z: f64 = row.iter().map(|&v| (v.as_f64() - m).exp()).sum();
        for v in row.iter_mut() {
            *v = T::of((v.as_f64() - m).exp() / z);
        }
    }
    out
}

/// `-log softmax(logits_i)[y_i]` per example, computed as `lse - f_y` in f64.
pub fn cross_entropy_per_example<T: Scalar>(logits: &Tensor<T>, y: &[usize]) -> Result<Vec<T>> {
    check_batch(logits, y)?;
    Ok(logits
        .rows_iter()
        .zip(y)
        .map(|(row, &yi)| {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v.as_f64()));
            // log-sum-exp relative to the label logit keeps saturated cases accurate.
            let rel: f64 = row.iter().map(|&v| (v.as_f64() - m).exp()).sum::<f64>();
            let loss = (m - row[yi].as_f64()) + rel.ln();
            T::of(loss.max(0.0))
        })
        .collect())
}

/// Mean cross-entropy over the batch as a scalar tensor.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, y: &[usize]) -> Result<Tensor<T>> {
    let per = cross_entropy_per_example(logits, y)?;
    let mean = per.iter().map(|v| v.as_f64()).sum::<f64>() / per.len().max(1) as f64;
    Ok(Tensor::scalar(T::of(mean)))
}

/// Classification margin `f_y - max_{j != y} f_j` per example; positive iff correct.
pub fn margin<T: Scalar>(logits: &Tensor<T>, y: &[usize]) -> Result<Vec<T>> {
    check_batch(logits, y)?;
    if logits.row_len() < 2 {
        return Err(Error::shape("margin", "need at least two classes"));
    }
    Ok(logits
        .rows_iter()
        .zip(y)
        .map(|(row, &yi)| row[yi] - row[runner_up_index(row, yi)])
        .collect())
}

/// Argmax per row, lowest index on ties.
pub fn predict_from_logits<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    logits
        .rows_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    100.0 * pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64
}

fn check_batch<T: Scalar>(logits: &Tensor<T>, y: &[usize]) -> Result<()> {
    if logits.shape().len() != 2 || logits.rows() != y.len() {
        return Err(Error::shape("logits", format!("{:?} with {} labels", logits.shape(), y.len())));
    }
    let k = logits.row_len();
    if let Some(&bad) = y.iter().find(|&&v| v >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::from_rows(&[v.to_vec()]).unwrap()
    }

    #[test]
    fn identity_and_zero_linear_models() {
        let eye = Tensor::new(vec![2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let m = Model::from_params(Architecture::mlp(&[2, 2], Activation::Relu), vec![eye, Tensor::zeros(&[2])])
            .unwrap();
        let x = Tensor::from_rows(&[vec![1.0f32, 2.0]]).unwrap();
        assert_eq!(m.logits(&x).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(m.predict(&Tensor::from_rows(&[vec![0.0f32, 1.0]]).unwrap()).unwrap(), vec![1]);

        let z = Model::from_params(
            Architecture::mlp(&[2, 3], Activation::Relu),
            vec![Tensor::zeros(&[2, 3]), Tensor::zeros(&[3])],
        )
        .unwrap();
        assert!(z.logits(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_forward_matches_dense_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let m: Model<f64> = Model::init(Architecture::mlp(&[3, 5, 4], Activation::Relu), &mut rng).unwrap();
        let x = [0.2, -0.7, 1.1];
        let p = m.params();
        let mut h = vec![0.0; 5];
        for (j, hj) in h.iter_mut().enumerate() {
            let s: f64 = (0..3).map(|i| x[i] * p[0].data()[i * 5 + j]).sum::<f64>() + p[1].data()[j];
            *hj = s.max(0.0);
        }
        let want: Vec<f64> = (0..4)
            .map(|k| (0..5).map(|j| h[j] * p[2].data()[j * 4 + k]).sum::<f64>() + p[3].data()[k])
            .collect();
        let got = m.logits(&row(&x)).unwrap();
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::<f64>::zeros(&[1, 10]);
        let l = cross_entropy(&uniform, &[3]).unwrap().data()[0];
        assert!((l - 10f64.ln()).abs() < 1e-12);
        let dominant = row(&[50.0, 0.0, 0.0]);
        assert!(cross_entropy(&dominant, &[0]).unwrap().data()[0] < 1e-9);
        let l = cross_entropy(&row(&[2.0, 1.0, 0.0]), &[0]).unwrap().data()[0];
        let want = -2.0 + (2f64.exp() + 1f64.exp() + 1.0).ln();
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.40761).abs() < 1e-5);
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin(&row(&[2.0, 1.0, 0.0]), &[0]).unwrap(), vec![1.0]);
        assert_eq!(margin(&row(&[2.0, 1.0, 0.0]), &[2]).unwrap(), vec![-2.0]);
        assert_eq!(predict_from_logits(&row(&[1.0, 1.0])), vec![0]);
    }

    #[test]
    fn margin_sign_and_argmax_agree_with_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y = rng.gen_range(0..6);
            let t = row(&v);
            let m = margin(&t, &[y]).unwrap()[0];
            let arg = predict_from_logits(&t)[0];
            assert_eq!(m > 0.0, arg == y);
            let probs = softmax(&t);
            let parg = predict_from_logits(&probs)[0];
            assert_eq!(arg, parg);
        }
    }

    #[test]
    fn linear_softmax_input_gradient_is_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m: Model<f64> = Model::init(Architecture::mlp(&[4, 3], Activation::Relu), &mut rng).unwrap();
        let x = row(&[0.1, 0.9, -0.3, 0.5]);
        let g = grad_x_loss(&m, &x, &[1]).unwrap();
        let p = softmax(&m.logits(&x).unwrap());
        let w = m.params()[0].data();
        for i in 0..4 {
            let want: f64 = (0..3).map(|k| (p.data()[k] - if k == 1 { 1.0 } else { 0.0 }) * w[i * 3 + k]).sum();
            assert!((g.data()[i] - want).abs() < 1e-12);
        }
        let again = grad_x_loss(&m, &x, &[1]).unwrap();
        assert_eq!(g, again);
    }

    #[test]
    fn saturated_point_has_vanishing_input_gradient() {
        let w = Tensor::new(vec![2, 2], vec![40.0f32, -40.0, -40.0, 40.0]).unwrap();
        let m = Model::from_params(Architecture::mlp(&[2, 2], Activation::Relu), vec![w, Tensor::zeros(&[2])])
            .unwrap();
        let x = Tensor::from_rows(&[vec![1.0f32, 0.0]]).unwrap();
        let g = grad_x_loss(&m, &x, &[0]).unwrap();
        assert!(g.data().iter().map(|v| v * v).sum::<f32>().sqrt() < 1e-4);
    }

    #[test]
    fn conv_model_runs_and_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arch = Architecture::Conv {
            in_channels: 1,
            height: 8,
            width: 8,
            channels: [2, 3],
            classes: 4,
            activation: Activation::Relu,
        };
        let m: Model<f32> = Model::init(arch, &mut rng).unwrap();
        let x = Tensor::new(vec![2, 64], (0..128).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let (losses, g) = m.loss_and_input_grad(&x, &[0, 3]).unwrap();
        assert_eq!(losses.len(), 2);
        assert_eq!(g.shape(), &[2, 64]);
    }

    #[test]
    fn input_shape_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m: Model<f32> = Model::init(Architecture::mlp(&[3, 2], Activation::Relu), &mut rng).unwrap();
        assert!(m.logits(&Tensor::zeros(&[1, 4])).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(v in prop::collection::vec(-20.0f64..20.0, 2..12)) {
            let p = softmax(&row(&v));
            let s: f64 = p.data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(p.data().iter().all(|&q| q > 0.0 && q <= 1.0));
        }

        #[test]
        fn margin_is_shift_invariant(v in prop::collection::vec(-20.0f64..20.0, 2..12), c in -50.0f64..50.0, y in 0usize..2) {
            let shifted: Vec<f64> = v.iter().map(|a| a + c).collect();
            let m1 = margin(&row(&v), &[y]).unwrap()[0];
            let m2 = margin(&row(&shifted), &[y]).unwrap()[0];
            prop_assert!((m1 - m2).abs() < 1e-6 * (1.0 + c.abs()));
            let ce = cross_entropy(&row(&v), &[y]).unwrap().data()[0];
            prop_assert!(ce >= 0.0);
        }
    }
}
