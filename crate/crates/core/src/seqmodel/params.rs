use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Half-width of the uniform weight initialization interval.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.embed == 0 || self.hidden == 0 {
            return Err(Error::Config("embedding and hidden sizes must be positive".into()));
        }
        // Room for the four special symbols plus at least one real token.
        if self.source_vocab < 5 || self.target_vocab < 5 {
            return Err(Error::Config(format!(
                "vocabularies must hold at least 5 entries (got {} / {})",
                self.source_vocab, self.target_vocab
            )));
        }
        Ok(())
    }

    /// Shapes of every tensor, in [`TENSOR_NAMES`] order.
    pub fn shapes(&self) -> [[usize; 2]; 13] {
        let (e, h) = (self.embed, self.hidden);
        [
            [self.source_vocab, e],
            [self.target_vocab, e],
            [3 * h, e],
            [3 * h, h],
            [3 * h, 1],
            [3 * h, e],
            [3 * h, h],
            [3 * h, 1],
            [h, h],
            [h, 2 * h],
            [h, 1],
            [self.target_vocab, h],
            [self.target_vocab, 1],
        ]
    }
}

pub const TENSOR_NAMES: [&str; 13] = [
    "source_embed",
    "target_embed",
    "encoder.input",
    "encoder.recurrent",
    "encoder.bias",
    "decoder.input",
    "decoder.recurrent",
    "decoder.bias",
    "attention",
    "combine",
    "combine.bias",
    "output",
    "output.bias",
];

/// Gated recurrent cell. Rows are laid out as `[update | reset | candidate]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<T> {
    pub input: Matrix<T>,
    pub recurrent: Matrix<T>,
    pub bias: Matrix<T>,
}

/// All learnable tensors of one attention encoder-decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    dims: ModelDims,
    pub source_embed: Matrix<T>,
    pub target_embed: Matrix<T>,
    pub encoder: GruParams<T>,
    pub decoder: GruParams<T>,
    /// Bilinear attention score matrix.
    pub attention: Matrix<T>,
    /// Maps `[context; hidden]` to the attentional hidden state.
    pub combine: Matrix<T>,
    pub combine_bias: Matrix<T>,
    pub output: Matrix<T>,
    pub output_bias: Matrix<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(dims: ModelDims) -> Self {
        let s = dims.shapes();
        let z = |i: usize| Matrix::zeros(s[i][0], s[i][1]);
        Self {
            dims,
            source_embed: z(0),
            target_embed: z(1),
            encoder: GruParams {
                input: z(2),
                recurrent: z(3),
                bias: z(4),
            },
            decoder: GruParams {
                input: z(5),
                recurrent: z(6),
                bias: z(7),
            },
            attention: z(8),
            combine: z(9),
            combine_bias: z(10),
            output: z(11),
            output_bias: z(12),
        }
    }

    /// Weights uniform in `[-INIT_SCALE, INIT_SCALE]`, biases zero.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        Self::init_scaled(dims, seed, INIT_SCALE)
    }

    pub fn init_scaled(dims: ModelDims, seed: u64, scale: f64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(dims);
        for (name, t) in TENSOR_NAMES.iter().zip(params.tensors_mut()) {
            if !name.ends_with("bias") {
                *t = Matrix::uniform(t.rows(), t.cols(), scale, &mut rng);
            }
        }
        Ok(params)
    }

    /// Builds from tensors given in [`TENSOR_NAMES`] order.
    pub fn from_tensors(dims: ModelDims, tensors: Vec<Matrix<T>>) -> Result<Self> {
        dims.validate()?;
        if tensors.len() != TENSOR_NAMES.len() {
            return Err(Error::Shape(format!("expected 13 tensors, got {}", tensors.len())));
        }
        let mut params = Self::zeros(dims);
        for ((slot, t), (shape, name)) in params
            .tensors_mut()
            .into_iter()
            .zip(tensors)
            .zip(dims.shapes().iter().zip(TENSOR_NAMES))
        {
            if t.shape() != *shape {
                return Err(Error::Shape(format!(
                    "tensor {name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(params)
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn tensors(&self) -> [&Matrix<T>; 13] {
        [
            &self.source_embed,
            &self.target_embed,
            &self.encoder.input,
            &self.encoder.recurrent,
            &self.encoder.bias,
            &self.decoder.input,
            &self.decoder.recurrent,
            &self.decoder.bias,
            &self.attention,
            &self.combine,
            &self.combine_bias,
            &self.output,
            &self.output_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix<T>; 13] {
        [
            &mut self.source_embed,
            &mut self.target_embed,
            &mut self.encoder.input,
            &mut self.encoder.recurrent,
            &mut self.encoder.bias,
            &mut self.decoder.input,
            &mut self.decoder.recurrent,
            &mut self.decoder.bias,
            &mut self.attention,
            &mut self.combine,
            &mut self.combine_bias,
            &mut self.output,
            &mut self.output_bias,
        ]
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&'static str, &Matrix<T>)> {
        TENSOR_NAMES.into_iter().zip(self.tensors())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.as_slice().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims == other.dims
    }
}

/// Tensor-for-tensor mirror of a [`ModelParams`] holding derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T>(pub(crate) ModelParams<T>);

impl<T: Scalar> Gradients<T> {
    pub fn zeros(dims: ModelDims) -> Self {
        Self(ModelParams::zeros(dims))
    }

    pub fn dims(&self) -> ModelDims {
        self.0.dims
    }

    pub fn tensors(&self) -> [&Matrix<T>; 13] {
        self.0.tensors()
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix<T>; 13] {
        self.0.tensors_mut()
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&'static str, &Matrix<T>)> {
        self.0.named_tensors()
    }

    pub fn norm(&self) -> T {
        self.tensors().iter().map(|t| t.sum_squares()).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            for v in t.as_mut_slice() {
                *v = *v * factor;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            crate::tensor::add_assign(a.as_mut_slice(), b.as_slice());
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors()
            .iter()
            .flat_map(|t| t.as_slice().iter().copied())
            .collect()
    }
}
