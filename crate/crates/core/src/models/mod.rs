//! Regression networks split into a feature extractor and a linear head.
//!
//! The extractor maps a batch of inputs to hidden features `z` of shape
//! `[batch, z_dim]`; the head is a single affine map `z -> y_hat` with a
//! bias. Keeping the split explicit lets regularizers act on `z` directly.

mod checkpoint;

pub use checkpoint::{read_container, write_container, CheckpointError, CONTAINER_MAGIC, CONTAINER_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{kernels::conv_out_extent, AutodiffError, Graph, Scalar, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("input shape {got:?} does not match model input {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Small plain CNN: stride-2 conv + relu blocks, global average pool, and an
/// optional linear projection when `z_dim` differs from the last channel count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnSpec {
    /// Side length of the square grayscale input.
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub z_dim: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_padding")]
    pub padding: usize,
}

fn default_kernel() -> usize {
    3
}
fn default_stride() -> usize {
    2
}
fn default_padding() -> usize {
    1
}

impl Default for CnnSpec {
    fn default() -> Self {
        Self {
            input_size: 28,
            channels: vec![8, 16, 32],
            z_dim: 16,
            kernel: 3,
            stride: 2,
            padding: 1,
        }
    }
}

/// Dense relu layers followed by a linear layer to `z_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub z_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Cnn(CnnSpec),
    Mlp(MlpSpec),
}

impl ModelSpec {
    /// Per-sample input shape the model expects.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ModelSpec::Cnn(c) => vec![1, c.input_size, c.input_size],
            ModelSpec::Mlp(m) => vec![m.input_dim],
        }
    }

    pub fn z_dim(&self) -> usize {
        match self {
            ModelSpec::Cnn(c) => c.z_dim,
            ModelSpec::Mlp(m) => m.z_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv { weight: usize, bias: usize, stride: usize, padding: usize },
    Dense { weight: usize, bias: usize },
    Relu,
    GlobalAvgPool,
}

/// Parameters bound into one graph, in the same order as [`SplitModel::params`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct SplitModel<T> {
    spec: ModelSpec,
    extractor: Vec<Layer>,
    head_weight: usize,
    head_bias: usize,
    params: Vec<Tensor<T>>,
}

fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

impl<T: Scalar> SplitModel<T> {
    pub fn from_spec<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self, ModelError> {
        match spec {
            ModelSpec::Cnn(c) => Self::build_small_cnn(c, rng),
            ModelSpec::Mlp(m) => Self::build_mlp(m, rng),
        }
    }

    pub fn build_small_cnn<R: Rng + ?Sized>(spec: &CnnSpec, rng: &mut R) -> Result<Self, ModelError> {
        if spec.z_dim == 0 || spec.input_size == 0 {
            return Err(ModelError::Architecture("input size and z_dim must be at least 1".into()));
        }
        if spec.stride == 0 || spec.kernel == 0 {
            return Err(ModelError::Architecture("kernel and stride must be at least 1".into()));
        }
        let mut params = Vec::new();
        let mut layers = Vec::new();
        let mut side = spec.input_size;
        let mut in_c = 1;
        for (i, &out_c) in spec.channels.iter().enumerate() {
            side = conv_out_extent(side, spec.kernel, spec.stride, spec.padding).ok_or_else(|| {
                ModelError::Architecture(format!(
                    "conv block {i} shrinks a {side}x{side} map below 1x1"
                ))
            })?;
            let fan_in = in_c * spec.kernel * spec.kernel;
            params.push(kaiming_uniform(vec![out_c, in_c, spec.kernel, spec.kernel], fan_in, rng));
            params.push(Tensor::zeros(vec![out_c, 1, 1]));
            layers.push(Layer::Conv {
                weight: params.len() - 2,
                bias: params.len() - 1,
                stride: spec.stride,
                padding: spec.padding,
            });
            layers.push(Layer::Relu);
            in_c = out_c;
        }
        layers.push(Layer::GlobalAvgPool);
        if in_c != spec.z_dim {
            params.push(kaiming_uniform(vec![in_c, spec.z_dim], in_c, rng));
            params.push(Tensor::zeros(vec![spec.z_dim]));
            layers.push(Layer::Dense {
                weight: params.len() - 2,
                bias: params.len() - 1,
            });
        }
        Ok(Self::with_head(ModelSpec::Cnn(spec.clone()), layers, params, spec.z_dim, rng))
    }

    pub fn build_mlp<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Result<Self, ModelError> {
        if spec.z_dim == 0 || spec.input_dim == 0 || spec.hidden.contains(&0) {
            return Err(ModelError::Architecture("layer widths must be at least 1".into()));
        }
        let mut params = Vec::new();
        let mut layers = Vec::new();
        let mut width = spec.input_dim;
        for &h in &spec.hidden {
            params.push(kaiming_uniform(vec![width, h], width, rng));
            params.push(Tensor::zeros(vec![h]));
            layers.push(Layer::Dense {
                weight: params.len() - 2,
                bias: params.len() - 1,
            });
            layers.push(Layer::Relu);
            width = h;
        }
        params.push(kaiming_uniform(vec![width, spec.z_dim], width, rng));
        params.push(Tensor::zeros(vec![spec.z_dim]));
        layers.push(Layer::Dense {
            weight: params.len() - 2,
            bias: params.len() - 1,
        });
        Ok(Self::with_head(ModelSpec::Mlp(spec.clone()), layers, params, spec.z_dim, rng))
    }

    fn with_head<R: Rng + ?Sized>(
        spec: ModelSpec,
        extractor: Vec<Layer>,
        mut params: Vec<Tensor<T>>,
        z_dim: usize,
        rng: &mut R,
    ) -> Self {
        params.push(kaiming_uniform(vec![z_dim, 1], z_dim, rng));
        params.push(Tensor::zeros(vec![1]));
        let head_weight = params.len() - 2;
        Self {
            spec,
            extractor,
            head_weight,
            head_bias: head_weight + 1,
            params,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn z_dim(&self) -> usize {
        self.spec.z_dim()
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Index of the head weight `[z_dim, 1]` in [`SplitModel::params`]; the bias follows it.
    pub fn head_index(&self) -> usize {
        self.head_weight
    }

    /// Replaces all parameters, checking shapes against the architecture.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<(), ModelError> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(ModelError::Architecture(
                "parameter list does not match the architecture".into(),
            ));
        }
        self.params = params;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> SplitModel<U> {
        SplitModel {
            spec: self.spec.clone(),
            extractor: self.extractor.clone(),
            head_weight: self.head_weight,
            head_bias: self.head_bias,
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| g.param(p.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant (evaluation without gradients).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| g.constant(p.clone())).collect(),
        }
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<(), ModelError> {
        let shape = g.shape(x);
        let expected = self.spec.input_shape();
        if shape.len() != expected.len() + 1 || shape[1..] != expected[..] {
            let mut want = vec![0];
            want.extend(expected);
            return Err(ModelError::InputShape {
                expected: want,
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    fn apply_layer(&self, g: &mut Graph<T>, p: &BoundParams, layer: &Layer, h: Var) -> Result<Var, ModelError> {
        Ok(match *layer {
            Layer::Conv { weight, bias, stride, padding } => {
                let c = g.conv2d(h, p.vars[weight], stride, padding)?;
                g.add(c, p.vars[bias])?
            }
            Layer::Dense { weight, bias } => {
                let m = g.matmul(h, p.vars[weight])?;
                g.add(m, p.vars[bias])?
            }
            Layer::Relu => g.relu(h)?,
            Layer::GlobalAvgPool => g.adaptive_avg_pool(h)?,
        })
    }

    /// Hidden features `z`, shape `[batch, z_dim]`.
    pub fn extract(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var, ModelError> {
        self.check_input(g, x)?;
        let mut h = x;
        for layer in &self.extractor {
            h = self.apply_layer(g, p, layer, h)?;
        }
        Ok(h)
    }

    /// Head output `[batch, 1]` for features `z`.
    pub fn predict_from_z(&self, g: &mut Graph<T>, p: &BoundParams, z: Var) -> Result<Var, ModelError> {
        let shape = g.shape(z);
        if shape.len() != 2 || shape[1] != self.z_dim() {
            return Err(ModelError::InputShape {
                expected: vec![0, self.z_dim()],
                got: shape.to_vec(),
            });
        }
        self.apply_layer(
            g,
            p,
            &Layer::Dense {
                weight: self.head_weight,
                bias: self.head_bias,
            },
            z,
        )
    }

    /// Full forward pass through extractor and head in one sweep.
    pub fn forward(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var, ModelError> {
        self.check_input(g, x)?;
        let head = Layer::Dense {
            weight: self.head_weight,
            bias: self.head_bias,
        };
        let mut h = x;
        for layer in self.extractor.iter().chain(std::iter::once(&head)) {
            h = self.apply_layer(g, p, layer, h)?;
        }
        Ok(h)
    }

    /// Predictions for a flat batch of inputs, without recording gradients.
    pub fn predict(&self, inputs: &[T], batch: usize) -> Result<Vec<T>, ModelError> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let mut shape = vec![batch];
        shape.extend(self.spec.input_shape());
        let x = g.constant(Tensor::new(shape, inputs.to_vec())?);
        let y = self.forward(&mut g, &p, x)?;
        Ok(g.value(y).data().to_vec())
    }
}

impl SplitModel<f32> {
    /// Writes the architecture and parameters in the `AMXM` container format.
    pub fn save_checkpoint<W: std::io::Write>(&self, w: W) -> Result<(), ModelError> {
        let spec = serde_json::to_string(&self.spec)
            .map_err(|e| ModelError::Architecture(e.to_string()))?;
        write_container(w, &spec, &self.params)?;
        Ok(())
    }

    pub fn load_checkpoint<R: std::io::Read>(r: R) -> Result<Self, ModelError> {
        let (spec, tensors) = read_container(r)?;
        let spec: ModelSpec = serde_json::from_str(&spec)
            .map_err(|e| ModelError::Architecture(format!("checkpoint spec: {e}")))?;
        // Weights are overwritten below; the seed is irrelevant.
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let mut model = Self::from_spec(&spec, &mut rng)?;
        model.set_params(tensors)?;
        Ok(model)
    }
}
