//! Layer building blocks and parameter bookkeeping.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::{batchnorm, conv2d, relu, Mode, Scalar, Shape, Tensor};

pub use crate::tensor::Mode as ForwardMode;

/// Named map of trainable parameters plus non-trainable buffers (batch-norm
/// running statistics). Iteration order is the sorted name order, which keeps
/// optimizer updates and serialization deterministic.
#[derive(Default)]
pub struct ParamSet<T: Scalar> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Rc<RefCell<Vec<T>>>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    fn register_param(&mut self, name: String, t: Tensor<T>) {
        assert!(t.requires_grad(), "parameters must require grad: {name}");
        let prev = self.params.insert(name.clone(), t);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    fn register_buffer(&mut self, name: String, b: Rc<RefCell<Vec<T>>>) {
        let prev = self.buffers.insert(name.clone(), b);
        assert!(prev.is_none(), "duplicate buffer name {name}");
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Rc<RefCell<Vec<T>>>)> {
        self.buffers.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_buffer(&self, name: &str) -> Option<&Rc<RefCell<Vec<T>>>> {
        self.buffers.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.shape().numel()).sum()
    }

    pub fn zero_grads(&self) {
        for t in self.params.values() {
            t.zero_grad();
        }
    }
}

/// Builds parameters with dotted-path names and deterministic seeded init.
pub struct ParamBuilder<'a, T: Scalar> {
    pub set: &'a mut ParamSet<T>,
    rng: ChaCha20Rng,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(set: &'a mut ParamSet<T>, seed: u64) -> Self {
        ParamBuilder { set, rng: ChaCha20Rng::seed_from_u64(seed) }
    }

    /// Uniform `U(-bound, bound)` init with `bound = 1/sqrt(fan_in)`.
    fn kaiming_uniform(&mut self, shape: Shape, fan_in: usize) -> Vec<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        (0..shape.numel()).map(|_| T::fl(self.rng.random_range(-bound..bound))).collect()
    }

    pub fn tensor(&mut self, name: &str, shape: Shape, data: Vec<T>) -> Tensor<T> {
        let t = Tensor::param(shape, data).expect("valid param shape");
        self.set.register_param(name.to_string(), t.clone());
        t
    }

    pub fn weight(&mut self, name: &str, shape: Shape, fan_in: usize) -> Tensor<T> {
        let data = self.kaiming_uniform(shape, fan_in);
        self.tensor(name, shape, data)
    }

    pub fn zeros(&mut self, name: &str, shape: Shape) -> Tensor<T> {
        self.tensor(name, shape, vec![T::zero(); shape.numel()])
    }

    pub fn constant(&mut self, name: &str, shape: Shape, value: f64) -> Tensor<T> {
        self.tensor(name, shape, vec![T::fl(value); shape.numel()])
    }

    pub fn buffer(&mut self, name: &str, values: Vec<T>) -> Rc<RefCell<Vec<T>>> {
        let b = Rc::new(RefCell::new(values));
        self.set.register_buffer(name.to_string(), b.clone());
        b
    }
}

/// Plain 2-D convolution layer.
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub pad: (usize, usize),
    pub groups: usize,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: (usize, usize),
        groups: usize,
        bias: bool,
    ) -> Self {
        let cin_g = cin / groups;
        let fan_in = cin_g * kernel.0 * kernel.1;
        let weight =
            pb.weight(&format!("{name}.weight"), Shape([cout, cin_g, kernel.0, kernel.1]), fan_in);
        let bias = if bias {
            Some(pb.zeros(&format!("{name}.bias"), Shape([1, cout, 1, 1])))
        } else {
            None
        };
        Conv2d { weight, bias, stride, pad, groups }
    }

    /// 1x1 pointwise convolution.
    pub fn pointwise(
        pb: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> Self {
        Self::new(pb, name, cin, cout, (1, 1), 1, (0, 0), 1, bias)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.pad, self.groups)
    }
}

/// Batch normalization layer; running stats live in shared buffers so the
/// checkpoint can persist them.
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Rc<RefCell<Vec<T>>>,
    pub running_var: Rc<RefCell<Vec<T>>>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(pb: &mut ParamBuilder<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: pb.constant(&format!("{name}.gamma"), Shape([1, channels, 1, 1]), 1.0),
            beta: pb.zeros(&format!("{name}.beta"), Shape([1, channels, 1, 1])),
            running_mean: pb.buffer(&format!("{name}.running_mean"), vec![T::zero(); channels]),
            running_var: pb.buffer(&format!("{name}.running_var"), vec![T::one(); channels]),
            momentum: T::fl(0.03),
            eps: T::fl(1e-3),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        batchnorm(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.momentum,
            self.eps,
            mode,
        )
    }
}

/// Conv + BN + ReLU, the stage workhorse.
pub struct ConvBnRelu<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Scalar> ConvBnRelu<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(
                pb,
                &format!("{name}.conv"),
                cin,
                cout,
                (kernel, kernel),
                stride,
                (pad, pad),
                1,
                false,
            ),
            bn: BatchNorm2d::new(pb, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        relu(&self.bn.forward(&self.conv.forward(x)?, mode)?)
    }
}

/// Conv + BN without activation (the transformer FFN "CB" blocks).
pub struct ConvBn<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn pointwise(pb: &mut ParamBuilder<T>, name: &str, cin: usize, cout: usize) -> Self {
        ConvBn {
            conv: Conv2d::pointwise(pb, &format!("{name}.conv"), cin, cout, false),
            bn: BatchNorm2d::new(pb, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.bn.forward(&self.conv.forward(x)?, mode)
    }
}

/// Validates that `value` divides evenly, as a config error otherwise.
pub fn require_divisible(value: usize, by: usize, what: &str) -> Result<()> {
    if by == 0 || value % by != 0 {
        return Err(Error::config(format!("{what}: {value} not divisible by {by}")));
    }
    Ok(())
}
