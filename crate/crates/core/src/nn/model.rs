use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{LayerSpec, ModelSpec};
use super::NnError;
use crate::autodiff::{ConvGeometry, Graph, ParamId, ParamSet, PoolGeometry, Var};
use crate::real::Real;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, batch-norm on batch statistics.
    Training,
    /// Dropout is identity, batch-norm on running statistics.
    Evaluation,
}

/// How a forward pass enters the computation record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pass {
    /// Register parameters as trainable leaves (otherwise as constants).
    pub trainable: bool,
    /// Fold batch statistics into the running statistics (training mode only).
    pub update_stats: bool,
}

impl Pass {
    pub const TRAIN: Pass = Pass {
        trainable: true,
        update_stats: true,
    };
    pub const FROZEN: Pass = Pass {
        trainable: false,
        update_stats: false,
    };
}

/// An instantiated [`ModelSpec`].
///
/// Parameters are named `"{layer}.{param}"`; their [`ParamId`] in a graph is
/// `"{instance}/{layer}.{param}"`, so two instances of one spec (a source and
/// a target mapper) never share gradient entries.
#[derive(Debug, Clone)]
pub struct Model<T> {
    instance: String,
    spec: ModelSpec,
    params: Vec<(String, Tensor<T>)>,
    buffers: Vec<(String, Tensor<T>)>,
    mode: Mode,
}

impl<T: Real> Model<T> {
    /// Glorot-uniform weights, zero biases, unit batch-norm scale.
    pub fn build(spec: &ModelSpec, instance: &str, seed: u64) -> Result<Self, NnError> {
        let shapes = spec.propagate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            let input = &shapes[i];
            match *layer {
                LayerSpec::Conv2d {
                    filters, kernel, ..
                } => {
                    let channels = input[0];
                    let area = kernel.0 * kernel.1;
                    let shape = [filters, channels, kernel.0, kernel.1];
                    params.push((
                        format!("{i}.weight"),
                        glorot(&mut rng, &shape, channels * area, filters * area),
                    ));
                    params.push((format!("{i}.bias"), Tensor::zeros(&[filters])));
                }
                LayerSpec::Linear { outputs, .. } => {
                    let inputs = input[0];
                    params.push((
                        format!("{i}.weight"),
                        glorot(&mut rng, &[inputs, outputs], inputs, outputs),
                    ));
                    params.push((format!("{i}.bias"), Tensor::zeros(&[outputs])));
                }
                LayerSpec::BatchNorm => {
                    let channels = input[0];
                    params.push((format!("{i}.gamma"), Tensor::full(&[channels], T::one())));
                    params.push((format!("{i}.beta"), Tensor::zeros(&[channels])));
                    buffers.push((format!("{i}.running_mean"), Tensor::zeros(&[channels])));
                    buffers.push((
                        format!("{i}.running_var"),
                        Tensor::full(&[channels], T::one()),
                    ));
                }
                _ => {}
            }
        }
        Ok(Model {
            instance: instance.to_string(),
            spec: spec.clone(),
            params,
            buffers,
            mode: Mode::Training,
        })
    }

    pub fn instance(&self) -> &str {
        &self.instance
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn train(&mut self) {
        self.mode = Mode::Training;
    }

    pub fn eval(&mut self) {
        self.mode = Mode::Evaluation;
    }

    /// A copy with identical parameters and buffers under another instance name.
    pub fn renamed(&self, instance: &str) -> Self {
        Model {
            instance: instance.to_string(),
            ..self.clone()
        }
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_id(&self, name: &str) -> ParamId {
        ParamId::new(&self.instance, name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Parameters keyed by their graph ids.
    pub fn param_set(&self) -> ParamSet<T> {
        let mut set = ParamSet::new();
        for (name, t) in &self.params {
            set.push(self.param_id(name), t.clone());
        }
        set
    }

    /// Overwrites parameters present in `set` (matched by graph id).
    pub fn load_param_set(&mut self, set: &ParamSet<T>) {
        let instance = self.instance.clone();
        for (name, t) in self.params.iter_mut() {
            if let Some(v) = set.get(ParamId::new(&instance, name).as_str()) {
                *t = v.clone();
            }
        }
    }

    /// Replaces a named parameter or buffer; shapes must agree.
    pub fn set_tensor(&mut self, name: &str, value: Tensor<T>) -> Result<(), NnError> {
        let slot = self
            .params
            .iter_mut()
            .chain(self.buffers.iter_mut())
            .find(|(n, _)| n == name)
            .ok_or_else(|| NnError::UnknownTensor(name.to_string()))?;
        if slot.1.shape() != value.shape() {
            return Err(NnError::Input {
                what: format!("tensor `{name}`"),
                expected: slot.1.shape().to_vec(),
                actual: value.shape().to_vec(),
            });
        }
        slot.1 = value;
        Ok(())
    }

    /// Every parameter and buffer bitwise equal to `other`'s.
    pub fn same_weights(&self, other: &Model<T>) -> bool {
        let eq = |a: &[(String, Tensor<T>)], b: &[(String, Tensor<T>)]| {
            a.len() == b.len()
                && a.iter()
                    .zip(b)
                    .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
        };
        self.spec == other.spec
            && eq(&self.params, &other.params)
            && eq(&self.buffers, &other.buffers)
    }

    /// Records the model applied to `x` (shape `[N, ..input_shape]`).
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        pass: Pass,
        rng: &mut R,
    ) -> Result<Var, NnError> {
        let xs = g.shape(x)?;
        if xs.len() != self.spec.input_shape.len() + 1
            || xs[1..] != self.spec.input_shape[..]
            || xs[0] == 0
        {
            let mut expected = vec![xs.first().copied().unwrap_or(0).max(1)];
            expected.extend(&self.spec.input_shape);
            return Err(NnError::Input {
                what: format!("input of `{}`", self.spec.name),
                expected,
                actual: xs.to_vec(),
            });
        }
        let training = self.mode == Mode::Training;
        let mut h = x;
        for i in 0..self.spec.layers.len() {
            let layer = self.spec.layers[i].clone();
            h = match layer {
                LayerSpec::Conv2d {
                    stride, padding, ..
                } => {
                    let w = self.leaf(g, &format!("{i}.weight"), pass.trainable)?;
                    let b = self.leaf(g, &format!("{i}.bias"), pass.trainable)?;
                    let y = g.conv2d(h, w, ConvGeometry { stride, padding })?;
                    g.add_bias(y, b)?
                }
                LayerSpec::MaxPool2d { kernel, stride } => {
                    g.max_pool2d(h, PoolGeometry { kernel, stride })?
                }
                LayerSpec::BatchNorm => {
                    let gamma = self.leaf(g, &format!("{i}.gamma"), pass.trainable)?;
                    let beta = self.leaf(g, &format!("{i}.beta"), pass.trainable)?;
                    if training {
                        let (y, mean, var) = g.batch_norm(h, gamma, beta, T::c(BN_EPS))?;
                        if pass.update_stats {
                            self.fold_stats(i, &mean, &var);
                        }
                        y
                    } else {
                        let mean = self
                            .buffer(&format!("{i}.running_mean"))
                            .unwrap()
                            .data()
                            .to_vec();
                        let var = self
                            .buffer(&format!("{i}.running_var"))
                            .unwrap()
                            .data()
                            .to_vec();
                        g.batch_norm_fixed(h, gamma, beta, &mean, &var, T::c(BN_EPS))?
                    }
                }
                LayerSpec::Linear { .. } => {
                    let w = self.leaf(g, &format!("{i}.weight"), pass.trainable)?;
                    let b = self.leaf(g, &format!("{i}.bias"), pass.trainable)?;
                    let y = g.matmul(h, w)?;
                    g.add_bias(y, b)?
                }
                LayerSpec::Relu => g.relu(h)?,
                LayerSpec::Dropout { p } => {
                    if training && p > 0.0 {
                        g.dropout(h, p, rng)?
                    } else {
                        h
                    }
                }
                LayerSpec::Flatten => g.flatten(h)?,
                LayerSpec::Softmax => g.softmax(h)?,
                LayerSpec::Sigmoid => g.sigmoid(h)?,
            };
        }
        Ok(h)
    }

    /// Evaluation-mode forward of a whole batch outside any training record.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut model = self.clone();
        model.eval();
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let y = model.forward(&mut g, xv, Pass::FROZEN, &mut unused)?;
        Ok(g.value(y)?.clone())
    }

    fn leaf(&self, g: &mut Graph<T>, name: &str, trainable: bool) -> Result<Var, NnError> {
        let t = self
            .param(name)
            .ok_or_else(|| NnError::UnknownTensor(name.to_string()))?
            .clone();
        Ok(if trainable {
            g.param(self.param_id(name), t)?
        } else {
            g.constant(t)?
        })
    }

    fn fold_stats(&mut self, layer: usize, mean: &[T], var: &[T]) {
        let m = T::c(BN_MOMENTUM);
        let keep = T::one() - m;
        let mean_name = format!("{layer}.running_mean");
        let var_name = format!("{layer}.running_var");
        for (name, t) in self.buffers.iter_mut() {
            let batch = if *name == mean_name {
                mean
            } else if *name == var_name {
                var
            } else {
                continue;
            };
            for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                *r = keep * *r + m * b;
            }
        }
    }
}

fn glorot<T: Real>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::c(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}
