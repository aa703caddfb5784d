use std::sync::Arc;

use ndarray::{linalg::general_mat_mul, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

use super::layers;
use super::model::{Activation, LayerKind, ModelConfig, Shape};
use super::params::{ParamLayout, ParamVector, TensorRole};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// ReLU gating function: 1 for `z > 0`, 0 for `z <= 0` (including `z = 0`).
#[inline]
pub fn gate<F: Scalar>(z: F) -> bool {
    z > F::zero()
}

/// Pre-activations of one ReLU layer for a batch, `(batch, units)`.
#[derive(Clone, Debug)]
pub struct TraceLayer<F> {
    pub layer: usize,
    pub psp: Array2<F>,
}

impl<F: Scalar> TraceLayer<F> {
    pub fn activations(&self) -> Array2<F> {
        self.psp.mapv(|z| if gate(z) { z } else { F::zero() })
    }

    pub fn gates(&self) -> Array2<bool> {
        self.psp.mapv(gate)
    }
}

/// Post-synaptic potentials of every hidden neuron for one batch.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace<F> {
    pub layers: Vec<TraceLayer<F>>,
}

/// Loss and accuracy over a set of samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Clone, Debug)]
struct Resolved {
    kind: LayerKind,
    activation: Activation,
    input: Shape,
    output: Shape,
    weight: Option<(usize, usize)>,
    bias: Option<(usize, usize)>,
}

struct ForwardState<F> {
    acts: Vec<Array2<F>>,
    cols: Vec<Option<Array2<F>>>,
    pool_arg: Vec<Option<Vec<u32>>>,
    trace: Option<ForwardTrace<F>>,
}

/// Feed-forward network engine. Holds no mutable state, so one instance can
/// evaluate many parameter vectors concurrently.
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    layers: Vec<Resolved>,
    layout: Arc<ParamLayout>,
    /// Backprop stops here; nothing below it has parameters.
    first_param: usize,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let shapes = config.resolve_shapes()?;
        let layout = ParamLayout::for_model(&config)?;
        let layers = config
            .layers
            .iter()
            .zip(shapes)
            .enumerate()
            .map(|(l, (spec, (input, output)))| {
                let span = |role| {
                    layout.slot_for(l, role).map(|s| (s.offset, s.offset + s.len()))
                };
                Resolved {
                    kind: spec.kind.clone(),
                    activation: spec.activation,
                    input,
                    output,
                    weight: span(TensorRole::Weight),
                    bias: span(TensorRole::Bias),
                }
            })
            .collect::<Vec<Resolved>>();
        let first_param = layers.iter().position(|l| l.weight.is_some()).unwrap_or(0);
        Ok(Network { config, layers, layout: Arc::new(layout), first_param })
    }

    pub fn preset(name: &str) -> Result<Self> {
        let cfg = ModelConfig::preset(name)
            .ok_or_else(|| Error::Config(format!("unknown model preset `{name}`")))?;
        Self::new(cfg)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    pub fn input_shape(&self) -> Shape {
        self.config.input
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map(|l| l.output.features()).unwrap_or(0)
    }

    /// Indices of the layers whose outputs pass through a ReLU.
    pub fn hidden_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.activation == Activation::Relu)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn layer_units(&self, layer: usize) -> usize {
        self.layers[layer].output.features()
    }

    pub fn init_params(&self, seed: u64) -> ParamVector<f32> {
        ParamVector::new(self.layout.clone(), self.layout.kaiming_init(seed))
            .expect("init matches layout")
    }

    fn check_input<F: Scalar>(&self, params: &[F], input: &ArrayView2<F>) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(Error::Layout(format!(
                "{} parameters given, model `{}` has {}",
                params.len(),
                self.config.name,
                self.layout.len()
            )));
        }
        let want = self.config.input.features();
        if input.ncols() != want {
            return Err(Error::Dimension {
                layer: 0,
                detail: format!("batch has {} features per sample, expected {want}", input.ncols()),
            });
        }
        Ok(())
    }

    fn forward_state<F: Scalar>(
        &self,
        params: &[F],
        input: ArrayView2<F>,
        keep: bool,
        capture: bool,
    ) -> Result<ForwardState<F>> {
        self.check_input(params, &input)?;
        let n = self.layers.len();
        let mut state = ForwardState {
            acts: Vec::with_capacity(if keep { n + 1 } else { 1 }),
            cols: (0..n).map(|_| None).collect(),
            pool_arg: (0..n).map(|_| None).collect(),
            trace: capture.then(ForwardTrace::default),
        };
        let batch = input.nrows();
        let mut x = input.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = match layer.kind {
                LayerKind::Dense { .. } => {
                    let w = weight_view(params, layer);
                    let b = bias_view(params, layer);
                    layers::dense_forward(x.view(), w, b)
                }
                LayerKind::Conv2d { kernel, stride, .. } => {
                    let cols = layers::im2col(x.view(), layer.input, kernel, stride, layer.output);
                    let w = conv_weight_matrix(params, layer);
                    let zmat = cols.dot(&w.t());
                    let positions = layer.output.height * layer.output.width;
                    let z = layers::conv_output(&zmat, batch, positions, bias_view(params, layer));
                    if keep {
                        state.cols[l] = Some(cols);
                    }
                    z
                }
                LayerKind::MaxPool2d { kernel, stride } => {
                    let (y, arg) =
                        layers::max_pool_forward(x.view(), layer.input, kernel, stride, layer.output);
                    if keep {
                        state.pool_arg[l] = Some(arg);
                    }
                    y
                }
                LayerKind::Flatten => x.clone(),
            };
            if layer.activation == Activation::Relu {
                if let Some(trace) = state.trace.as_mut() {
                    trace.layers.push(TraceLayer { layer: l, psp: z.clone() });
                }
                layers::relu_in_place(&mut z);
            }
            if keep {
                state.acts.push(std::mem::replace(&mut x, z));
            } else {
                x = z;
            }
        }
        state.acts.push(x);
        Ok(state)
    }

    /// Logits `(batch, classes)`; with `capture`, the PSP of every hidden neuron.
    pub fn forward<F: Scalar>(
        &self,
        params: &[F],
        input: ArrayView2<F>,
        capture: bool,
    ) -> Result<(Array2<F>, Option<ForwardTrace<F>>)> {
        let mut st = self.forward_state(params, input, false, capture)?;
        let logits = st.acts.pop().expect("forward produces output");
        Ok((logits, st.trace))
    }

    /// Mean softmax cross-entropy and its gradient in parameter layout.
    pub fn loss_and_grad<F: Scalar>(
        &self,
        params: &ParamVector<F>,
        input: ArrayView2<F>,
        labels: &[u8],
    ) -> Result<(f64, ParamVector<F>)> {
        let mut grad = ParamVector::zeros(self.layout.clone());
        let loss = self.loss_and_grad_into(params.values(), input, labels, grad.values_mut())?;
        Ok((loss, grad))
    }

    /// Like [`Network::loss_and_grad`] but writes into a caller-owned buffer.
    pub fn loss_and_grad_into<F: Scalar>(
        &self,
        params: &[F],
        input: ArrayView2<F>,
        labels: &[u8],
        grad: &mut [F],
    ) -> Result<f64> {
        if grad.len() != params.len() {
            return Err(Error::Layout("gradient buffer length differs from parameters".into()));
        }
        let batch = input.nrows();
        if labels.len() != batch {
            return Err(Error::Dimension {
                layer: 0,
                detail: format!("{} labels for a batch of {batch}", labels.len()),
            });
        }
        let mut st = self.forward_state(params, input, true, false)?;
        let logits = st.acts.last().expect("output");
        let (loss_sum, _, delta) = softmax_xent(logits, labels, true)?;
        let loss = loss_sum / batch as f64;
        if !loss.is_finite() {
            return Err(Error::NumericOverflow(format!("loss = {loss}")));
        }
        let mut delta = delta.expect("requested");
        let inv = F::from_f64(1.0 / batch as f64);
        delta.mapv_inplace(|d| d * inv);

        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                layers::relu_backward(&mut delta, &st.acts[l + 1]);
            }
            let x = &st.acts[l];
            delta = match layer.kind {
                LayerKind::Dense { outputs } => {
                    let (ws, we) = layer.weight.expect("dense has weights");
                    let mut gw = ArrayViewMut2::from_shape(
                        (outputs, layer.input.features()),
                        &mut grad[ws..we],
                    )
                    .expect("slot shape");
                    general_mat_mul(F::one(), &delta.t(), x, F::zero(), &mut gw);
                    write_bias_grad(grad, layer, &layers::column_sums(&delta));
                    if l <= self.first_param {
                        break;
                    }
                    delta.dot(&weight_view(params, layer))
                }
                LayerKind::Conv2d { out_channels, .. } => {
                    let positions = layer.output.height * layer.output.width;
                    let dz = layers::conv_delta_matrix(&delta, out_channels, positions);
                    let cols = st.cols[l].take().expect("cols kept for backward");
                    let (ws, we) = layer.weight.expect("conv has weights");
                    let mut gw = ArrayViewMut2::from_shape((out_channels, cols.ncols()), &mut grad[ws..we])
                        .expect("slot shape");
                    general_mat_mul(F::one(), &dz.t(), &cols, F::zero(), &mut gw);
                    write_bias_grad(grad, layer, &layers::column_sums(&dz));
                    if l <= self.first_param {
                        break;
                    }
                    let dcols = dz.dot(&conv_weight_matrix(params, layer));
                    let LayerKind::Conv2d { kernel, stride, .. } = layer.kind else { unreachable!() };
                    layers::col2im(dcols.view(), batch, layer.input, kernel, stride, layer.output)
                }
                LayerKind::MaxPool2d { .. } => {
                    let arg = st.pool_arg[l].take().expect("argmax kept for backward");
                    layers::max_pool_backward(&delta, &arg, layer.input.features())
                }
                LayerKind::Flatten => delta,
            };
        }
        Ok(loss)
    }

    /// Summed loss and number of correct predictions for one batch.
    pub fn batch_metrics<F: Scalar>(
        &self,
        params: &[F],
        input: ArrayView2<F>,
        labels: &[u8],
    ) -> Result<(f64, usize)> {
        let (logits, _) = self.forward(params, input, false)?;
        let (loss, correct, _) = softmax_xent(&logits, labels, false)?;
        Ok((loss, correct))
    }

    /// Mean loss and accuracy over a dataset, processed in chunks.
    pub fn evaluate(&self, params: &[f32], data: &LabeledDataset) -> Result<Metrics> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut loss = 0.0;
        let mut correct = 0;
        for range in data.chunks(EVAL_CHUNK) {
            let (l, c) = self.batch_metrics(params, data.images().slice(ndarray::s![range.clone(), ..]), &data.labels()[range])?;
            loss += l;
            correct += c;
        }
        let n = data.len();
        let loss = loss / n as f64;
        if !loss.is_finite() {
            return Err(Error::NumericOverflow(format!("evaluation loss = {loss}")));
        }
        Ok(Metrics { loss, accuracy: correct as f64 / n as f64, samples: n })
    }

    /// Mean loss and gradient over a whole dataset in precision `F`.
    pub fn dataset_loss_and_grad<F: Scalar>(
        &self,
        params: &[F],
        data: &LabeledDataset,
    ) -> Result<(f64, Vec<F>)> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = data.len() as f64;
        let mut total = vec![F::zero(); params.len()];
        let mut chunk_grad = vec![F::zero(); params.len()];
        let mut loss = 0.0;
        for range in data.chunks(EVAL_CHUNK) {
            let w = range.len() as f64 / n;
            let x = data.images().slice(ndarray::s![range.clone(), ..]).mapv(|v| F::from_f64(v as f64));
            let l = self.loss_and_grad_into(params, x.view(), &data.labels()[range], &mut chunk_grad)?;
            loss += w * l;
            let wf = F::from_f64(w);
            for (t, g) in total.iter_mut().zip(&chunk_grad) {
                *t = *t + wf * *g;
            }
        }
        Ok((loss, total))
    }

    /// Mean loss over a whole dataset in precision `F`.
    pub fn dataset_loss<F: Scalar>(&self, params: &[F], data: &LabeledDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut loss = 0.0;
        for range in data.chunks(EVAL_CHUNK) {
            let x = data.images().slice(ndarray::s![range.clone(), ..]).mapv(|v| F::from_f64(v as f64));
            loss += self.batch_metrics(params, x.view(), &data.labels()[range])?.0;
        }
        Ok(loss / data.len() as f64)
    }
}

const EVAL_CHUNK: usize = 1000;

fn weight_view<'a, F: Scalar>(params: &'a [F], layer: &Resolved) -> ArrayView2<'a, F> {
    let (s, e) = layer.weight.expect("layer has weights");
    let outputs = layer.output.features();
    ArrayView2::from_shape((outputs, layer.input.features()), &params[s..e]).expect("slot shape")
}

fn conv_weight_matrix<'a, F: Scalar>(params: &'a [F], layer: &Resolved) -> ArrayView2<'a, F> {
    let (s, e) = layer.weight.expect("conv has weights");
    let channels = layer.output.channels;
    ArrayView2::from_shape((channels, (e - s) / channels), &params[s..e]).expect("slot shape")
}

fn bias_view<'a, F: Scalar>(params: &'a [F], layer: &Resolved) -> ArrayView1<'a, F> {
    let (s, e) = layer.bias.expect("layer has bias");
    ArrayView1::from(&params[s..e])
}

fn write_bias_grad<F: Scalar>(grad: &mut [F], layer: &Resolved, sums: &ndarray::Array1<F>) {
    let (s, e) = layer.bias.expect("layer has bias");
    ArrayViewMut1::from(&mut grad[s..e]).assign(sums);
}

/// Summed cross-entropy, correct count, and (optionally) `softmax - onehot`.
pub(crate) fn softmax_xent<F: Scalar>(
    logits: &Array2<F>,
    labels: &[u8],
    want_grad: bool,
) -> Result<(f64, usize, Option<Array2<F>>)> {
    let classes = logits.ncols();
    let mut grad = want_grad.then(|| Array2::<F>::zeros(logits.dim()));
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let y = labels[i] as usize;
        if y >= classes {
            return Err(Error::Config(format!("label {y} outside [0, {classes})")));
        }
        let mut arg = 0;
        let mut max = row[0];
        for (k, &v) in row.iter().enumerate() {
            if v > max {
                max = v;
                arg = k;
            }
        }
        if arg == y {
            correct += 1;
        }
        let mut sum = F::zero();
        for &v in row.iter() {
            sum = sum + (v - max).exp();
        }
        let lse = max + sum.ln();
        loss += (lse - row[y]).as_f64();
        if let Some(g) = grad.as_mut() {
            let mut gr = g.row_mut(i);
            for (k, &v) in row.iter().enumerate() {
                gr[k] = (v - lse).exp();
            }
            gr[y] = gr[y] - F::one();
        }
    }
    Ok((loss, correct, grad))
}
