//! A small deterministic network engine: fully-connected and 5×5
//! convolution layers, ReLU, 2×2 max pooling and a softmax cross-entropy
//! head. Parameters of each layer live in one flat buffer already in the
//! serialized gradient layout, weights first and bias last:
//!
//! * fully connected: `W[out][in]`, then `bias[out]`;
//! * convolution: `W[out_maps][in_maps][5][5]`, then `bias[out_maps]`.

pub mod kernels;
pub mod layers;
pub mod tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::GradientVector;
use crate::error::{Error, Result};
use kernels::ConvGeometry;

/// Layer inputs and pooling argmaxes kept by the forward pass for backward.
type Saved<'a> = (&'a mut Vec<Vec<f32>>, &'a mut Vec<Vec<u32>>);

pub use tensor::Tensor;

pub const CONV_KERNEL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    FullyConnected {
        inputs: usize,
        outputs: usize,
    },
    Conv5x5 {
        in_maps: usize,
        out_maps: usize,
        stride: usize,
    },
    Relu,
    MaxPool2x2,
    SoftmaxXent {
        classes: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    FullyConnected,
    Convolution,
}

impl LayerSpec {
    /// Per-sample output shape for a per-sample `input` shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let len: usize = input.iter().product();
        match *self {
            LayerSpec::FullyConnected { inputs, outputs } => {
                if inputs != len {
                    return Err(Error::TensorShape(format!(
                        "fully-connected layer expects {inputs} inputs, previous layer yields {len}"
                    )));
                }
                if outputs == 0 {
                    return Err(Error::TensorShape(
                        "fully-connected layer with zero outputs".into(),
                    ));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv5x5 {
                in_maps,
                out_maps,
                stride,
            } => {
                let [c, h, w] = three_d(input)?;
                if c != in_maps {
                    return Err(Error::TensorShape(format!(
                        "convolution expects {in_maps} input maps, got {c}"
                    )));
                }
                if h < CONV_KERNEL || w < CONV_KERNEL || stride == 0 || out_maps == 0 {
                    return Err(Error::TensorShape(format!(
                        "convolution cannot apply to {h}x{w} maps with stride {stride}"
                    )));
                }
                Ok(vec![
                    out_maps,
                    (h - CONV_KERNEL) / stride + 1,
                    (w - CONV_KERNEL) / stride + 1,
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2x2 => {
                let [c, h, w] = three_d(input)?;
                if h < 2 || w < 2 {
                    return Err(Error::TensorShape(format!("cannot pool {h}x{w} maps")));
                }
                Ok(vec![c, h / 2, w / 2])
            }
            LayerSpec::SoftmaxXent { classes } => {
                if classes != len || classes < 2 {
                    return Err(Error::TensorShape(format!(
                        "softmax over {classes} classes fed with {len} scores"
                    )));
                }
                Ok(vec![classes])
            }
        }
    }

    pub fn param_kind(&self) -> Option<ParamKind> {
        match self {
            LayerSpec::FullyConnected { .. } => Some(ParamKind::FullyConnected),
            LayerSpec::Conv5x5 { .. } => Some(ParamKind::Convolution),
            _ => None,
        }
    }

    fn param_count(&self) -> usize {
        match *self {
            LayerSpec::FullyConnected { inputs, outputs } => inputs * outputs + outputs,
            LayerSpec::Conv5x5 {
                in_maps, out_maps, ..
            } => out_maps * in_maps * CONV_KERNEL * CONV_KERNEL + out_maps,
            _ => 0,
        }
    }

    /// `(fan_in, fan_out)` for initialization.
    fn fans(&self) -> (usize, usize) {
        let k2 = CONV_KERNEL * CONV_KERNEL;
        match *self {
            LayerSpec::FullyConnected { inputs, outputs } => (inputs, outputs),
            LayerSpec::Conv5x5 {
                in_maps, out_maps, ..
            } => (in_maps * k2, out_maps * k2),
            _ => (0, 0),
        }
    }
}

fn three_d(shape: &[usize]) -> Result<[usize; 3]> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::TensorShape(format!(
            "expected [maps, rows, cols] input, got {shape:?}"
        ))),
    }
}

/// Flat position of kernel element `(o, i, r, c)` in a convolution layer's
/// serialized vector.
pub fn conv_weight_index(in_maps: usize, o: usize, i: usize, r: usize, c: usize) -> usize {
    ((o * in_maps + i) * CONV_KERNEL + r) * CONV_KERNEL + c
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    spec: LayerSpec,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    params: Vec<f32>,
}

impl Layer {
    fn geometry(&self) -> Option<ConvGeometry> {
        match self.spec {
            LayerSpec::Conv5x5 { stride, .. } => Some(ConvGeometry {
                channels: self.in_shape[0],
                height: self.in_shape[1],
                width: self.in_shape[2],
                kernel: CONV_KERNEL,
                stride,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    batch: usize,
    /// Input of every layer; the last entry feeds the loss head.
    inputs: Vec<Vec<f32>>,
    pool_argmax: Vec<Vec<u32>>,
    /// Softmax probabilities.
    probs: Vec<f32>,
}

impl Activations {
    pub fn probabilities(&self) -> &[f32] {
        &self.probs
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub activations: Activations,
    pub loss: f32,
    pub predictions: Vec<usize>,
}

/// Per-parameterized-layer gradients in serialization order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub layers: Vec<GradientVector>,
}

impl Model {
    /// Builds a model and initializes it from `seed`: He-uniform for layers
    /// feeding a ReLU, Glorot-uniform otherwise (including the final layer).
    /// Biases start at zero.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::TensorShape(format!("input shape {input_shape:?}")));
        }
        match specs.last() {
            Some(LayerSpec::SoftmaxXent { .. }) => {}
            _ => {
                return Err(Error::TensorShape(
                    "the last layer must be softmax_xent".into(),
                ))
            }
        }
        if specs[..specs.len() - 1]
            .iter()
            .any(|s| matches!(s, LayerSpec::SoftmaxXent { .. }))
        {
            return Err(Error::TensorShape(
                "softmax_xent may only appear last".into(),
            ));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (idx, spec) in specs.iter().enumerate() {
            let out_shape = spec
                .output_shape(&shape)
                .map_err(|e| Error::TensorShape(format!("layer {idx}: {e}")))?;
            let mut params = vec![0.0; spec.param_count()];
            if spec.param_kind().is_some() {
                let (fan_in, fan_out) = spec.fans();
                let feeds_relu = specs[idx + 1..]
                    .iter()
                    .find(|s| !matches!(s, LayerSpec::MaxPool2x2))
                    .is_some_and(|s| matches!(s, LayerSpec::Relu));
                let limit = if feeds_relu {
                    (6.0 / fan_in as f64).sqrt()
                } else {
                    (6.0 / (fan_in + fan_out) as f64).sqrt()
                } as f32;
                let weights = params.len() - out_shape[0];
                for w in &mut params[..weights] {
                    *w = rng.random_range(-limit..limit);
                }
            }
            layers.push(Layer {
                spec: *spec,
                in_shape: shape,
                out_shape: out_shape.clone(),
                params,
            });
            shape = out_shape;
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        match self.layers.last().map(|l| l.spec) {
            Some(LayerSpec::SoftmaxXent { classes }) => classes,
            _ => unreachable!("constructor enforces a softmax head"),
        }
    }

    pub fn specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().map(|l| &l.spec)
    }

    fn param_layers(&self) -> impl Iterator<Item = &Layer> {
        self.layers.iter().filter(|l| l.spec.param_kind().is_some())
    }

    pub fn param_layer_count(&self) -> usize {
        self.param_layers().count()
    }

    /// Kind of each parameterized layer in serialization order.
    pub fn param_kinds(&self) -> Vec<ParamKind> {
        self.param_layers()
            .filter_map(|l| l.spec.param_kind())
            .collect()
    }

    pub fn param_lens(&self) -> Vec<usize> {
        self.param_layers().map(|l| l.params.len()).collect()
    }

    pub fn params(&self) -> Vec<&[f32]> {
        self.param_layers().map(|l| l.params.as_slice()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        self.layers
            .iter_mut()
            .filter(|l| l.spec.param_kind().is_some())
            .map(|l| l.params.as_mut_slice())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.param_lens().iter().sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.sample_len() != self.input_len() {
            return Err(Error::TensorShape(format!(
                "batch samples have {} values, model input {:?} needs {}",
                batch.sample_len(),
                self.input_shape,
                self.input_len()
            )));
        }
        Ok(())
    }

    /// Runs every layer up to (not including) the loss head, optionally
    /// keeping layer inputs for backward. Returns the logits.
    fn run(&self, batch: &Tensor, mut keep: Option<Saved<'_>>) -> Vec<f32> {
        let b = batch.batch();
        let mut x = batch.data().to_vec();
        for layer in &self.layers[..self.layers.len() - 1] {
            let mut argmax = Vec::new();
            let y = match layer.spec {
                LayerSpec::FullyConnected { inputs, outputs } => {
                    layers::fc_forward(&layer.params, inputs, outputs, b, &x)
                }
                LayerSpec::Conv5x5 { out_maps, .. } => {
                    let g = layer.geometry().expect("conv geometry");
                    layers::conv_forward(&layer.params, &g, out_maps, b, &x)
                }
                LayerSpec::Relu => layers::relu_forward(&x),
                LayerSpec::MaxPool2x2 => {
                    let [c, h, w] = three_d(&layer.in_shape).expect("validated shape");
                    let (y, arg) = layers::maxpool_forward(c, h, w, b, &x);
                    argmax = arg;
                    y
                }
                LayerSpec::SoftmaxXent { .. } => unreachable!("head handled by caller"),
            };
            match keep.as_mut() {
                Some((inputs, pools)) => {
                    inputs.push(std::mem::replace(&mut x, y));
                    pools.push(argmax);
                }
                None => x = y,
            }
        }
        x
    }

    pub fn forward(&self, batch: &Tensor, labels: &[usize]) -> Result<ForwardPass> {
        self.check_batch(batch)?;
        if labels.len() != batch.batch() {
            return Err(Error::TensorShape(format!(
                "{} labels for a batch of {}",
                labels.len(),
                batch.batch()
            )));
        }
        let classes = self.classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::TensorShape(format!(
                "label {bad} with {classes} classes"
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pools = Vec::with_capacity(self.layers.len());
        let logits = self.run(batch, Some((&mut inputs, &mut pools)));
        let loss = layers::xent_loss(classes, &logits, labels);
        let probs = layers::softmax(classes, &logits);
        let predictions = layers::argmax_rows(classes, &logits);
        inputs.push(logits);
        Ok(ForwardPass {
            activations: Activations {
                batch: batch.batch(),
                inputs,
                pool_argmax: pools,
                probs,
            },
            loss,
            predictions,
        })
    }

    /// Predicted class per sample.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        self.check_batch(batch)?;
        let logits = self.run(batch, None);
        Ok(layers::argmax_rows(self.classes(), &logits))
    }

    /// Gradients of the mean batch loss with respect to every parameter.
    pub fn backward(&self, acts: &Activations, labels: &[usize]) -> Result<ModelGradients> {
        if labels.len() != acts.batch || acts.inputs.len() != self.layers.len() {
            return Err(Error::TensorShape(
                "activations do not belong to this model and label set".into(),
            ));
        }
        let b = acts.batch;
        let mut dy = layers::xent_backward(self.classes(), &acts.probs, labels);
        let mut grads = Vec::with_capacity(self.param_layer_count());
        for (idx, layer) in self.layers[..self.layers.len() - 1]
            .iter()
            .enumerate()
            .rev()
        {
            let x = &acts.inputs[idx];
            dy = match layer.spec {
                LayerSpec::FullyConnected { inputs, outputs } => {
                    let (dx, dp) = layers::fc_backward(&layer.params, inputs, outputs, b, x, &dy);
                    grads.push(dp);
                    dx
                }
                LayerSpec::Conv5x5 { out_maps, .. } => {
                    let g = layer.geometry().expect("conv geometry");
                    let (dx, dp) = layers::conv_backward(&layer.params, &g, out_maps, b, x, &dy);
                    grads.push(dp);
                    dx
                }
                LayerSpec::Relu => layers::relu_backward(x, &dy),
                LayerSpec::MaxPool2x2 => {
                    layers::maxpool_backward(x.len(), &acts.pool_argmax[idx], &dy)
                }
                LayerSpec::SoftmaxXent { .. } => unreachable!(),
            };
        }
        grads.reverse();
        let layers = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| GradientVector::new(i as u16, g))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelGradients { layers })
    }
}

/// Per-layer gradient vectors in serialization order, tagged with their
/// parameterized-layer ordinal.
pub fn serialize_grad(g: &ModelGradients) -> Vec<GradientVector> {
    g.layers.clone()
}

/// Inverse of [`serialize_grad`], checked against the model's layer sizes.
pub fn deserialize_grad(model: &Model, vectors: Vec<GradientVector>) -> Result<ModelGradients> {
    let lens = model.param_lens();
    if vectors.len() != lens.len() {
        return Err(Error::TensorShape(format!(
            "{} gradient vectors for {} parameterized layers",
            vectors.len(),
            lens.len()
        )));
    }
    for (i, (v, &len)) in vectors.iter().zip(&lens).enumerate() {
        if v.len() != len || v.layer_id() as usize != i {
            return Err(Error::TensorShape(format!(
                "vector {i} (layer {}) has {} values, layer needs {len}",
                v.layer_id(),
                v.len()
            )));
        }
    }
    Ok(ModelGradients { layers: vectors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp() -> Model {
        Model::new(
            &[4],
            &[
                LayerSpec::FullyConnected {
                    inputs: 4,
                    outputs: 3,
                },
                LayerSpec::Relu,
                LayerSpec::FullyConnected {
                    inputs: 3,
                    outputs: 2,
                },
                LayerSpec::SoftmaxXent { classes: 2 },
            ],
            7,
        )
        .unwrap()
    }

    #[test]
    fn conv_layout_matches_canonical_order() {
        assert_eq!(conv_weight_index(3, 1, 2, 4, 4), 149);
        assert_eq!(conv_weight_index(3, 0, 0, 0, 0), 0);
        let spec = LayerSpec::Conv5x5 {
            in_maps: 3,
            out_maps: 2,
            stride: 1,
        };
        assert_eq!(spec.param_count(), 150 + 2);
    }

    #[test]
    fn shapes_must_compose() {
        let err = Model::new(
            &[1, 8, 8],
            &[
                LayerSpec::FullyConnected {
                    inputs: 10,
                    outputs: 2,
                },
                LayerSpec::SoftmaxXent { classes: 2 },
            ],
            0,
        );
        assert!(err.is_err());
        let err = Model::new(
            &[4],
            &[LayerSpec::FullyConnected {
                inputs: 4,
                outputs: 2,
            }],
            0,
        );
        assert!(err.is_err());
        let ok = Model::new(
            &[1, 12, 12],
            &[
                LayerSpec::Conv5x5 {
                    in_maps: 1,
                    out_maps: 2,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                LayerSpec::FullyConnected {
                    inputs: 32,
                    outputs: 3,
                },
                LayerSpec::SoftmaxXent { classes: 3 },
            ],
            0,
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn init_is_seeded_and_biases_start_at_zero() {
        let a = mlp();
        let b = mlp();
        assert_eq!(a, b);
        let p = a.params();
        assert_eq!(&p[0][12..], &[0.0; 3]);
        let he = (6.0f32 / 4.0).sqrt();
        assert!(p[0][..12].iter().all(|w| w.abs() <= he));
        let glorot = (6.0f32 / 5.0).sqrt();
        assert!(p[1][..6].iter().all(|w| w.abs() <= glorot));
        assert_ne!(
            a,
            Model::new(
                &[4],
                &[
                    LayerSpec::FullyConnected {
                        inputs: 4,
                        outputs: 3
                    },
                    LayerSpec::Relu,
                    LayerSpec::FullyConnected {
                        inputs: 3,
                        outputs: 2
                    },
                    LayerSpec::SoftmaxXent { classes: 2 },
                ],
                8
            )
            .unwrap()
        );
    }

    #[test]
    fn batch_shape_errors() {
        let m = mlp();
        let x = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(m.forward(&x, &[0, 1]).is_err());
        let x = Tensor::new(vec![2, 4], vec![0.0; 8]).unwrap();
        assert!(m.forward(&x, &[0]).is_err());
        assert!(m.forward(&x, &[0, 2]).is_err());
    }

    #[test]
    fn serialize_roundtrip() {
        let m = mlp();
        let x = Tensor::new(vec![2, 4], vec![0.1, -0.2, 0.3, 0.4, 1.0, 0.5, -0.5, 0.0]).unwrap();
        let labels = [0, 1];
        let f = m.forward(&x, &labels).unwrap();
        let g = m.backward(&f.activations, &labels).unwrap();
        let v = serialize_grad(&g);
        assert_eq!(v.iter().map(|v| v.len()).collect::<Vec<_>>(), vec![15, 8]);
        assert_eq!(deserialize_grad(&m, v.clone()).unwrap(), g);
        assert!(deserialize_grad(&m, v[..1].to_vec()).is_err());
    }

    #[test]
    fn final_bias_grad_is_mean_of_softmax_minus_onehot() {
        let m = mlp();
        let x = Tensor::new(
            vec![3, 4],
            (0..12).map(|i| (i as f32 * 0.37).sin()).collect(),
        )
        .unwrap();
        let labels = [1, 0, 1];
        let f = m.forward(&x, &labels).unwrap();
        let g = m.backward(&f.activations, &labels).unwrap();
        let probs = f.activations.probabilities();
        for k in 0..2 {
            let mut mean = 0.0f64;
            for (b, &label) in labels.iter().enumerate() {
                let onehot = if label == k { 1.0 } else { 0.0 };
                mean += probs[b * 2 + k] as f64 - onehot;
            }
            mean /= 3.0;
            let got = g.layers[1].values()[6 + k] as f64;
            assert!((got - mean).abs() < 1e-6, "{got} vs {mean}");
        }
    }

    #[test]
    fn forward_backward_are_deterministic() {
        let m = mlp();
        let x = Tensor::new(vec![2, 4], vec![0.3, -0.7, 0.2, 0.9, -0.1, 0.5, 0.5, -0.3]).unwrap();
        let run = || {
            let f = m.forward(&x, &[1, 0]).unwrap();
            (
                f.loss.to_bits(),
                m.backward(&f.activations, &[1, 0]).unwrap(),
            )
        };
        assert_eq!(run(), run());
    }
}
