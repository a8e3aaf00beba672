use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ExpertConfig;

/// Floating-point element type of a model. Training and inference use `f32`;
/// `f64` exists for gradient checking.
pub trait Scalar:
    Float + FromPrimitive + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub(crate) fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Embedding,
    AttnNorm,
    Query,
    Key,
    Value,
    AttnOut,
    FfnNorm,
    Gate,
    Up,
    Down,
    FinalNorm,
}

impl TensorKind {
    pub fn is_norm(self) -> bool {
        matches!(self, Self::AttnNorm | Self::FfnNorm | Self::FinalNorm)
    }
}

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerOffsets {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn_norm: usize,
    pub gate: usize,
    pub up: usize,
    pub down: usize,
}

/// Fixed tensor order of the flat parameter vector:
///
/// ```text
/// embed            [vocab, hidden]
/// per layer l:
///   layers.l.attn_norm [hidden]
///   layers.l.wq        [hidden, hidden]
///   layers.l.wk        [hidden, hidden]
///   layers.l.wv        [hidden, hidden]
///   layers.l.wo        [hidden, hidden]
///   layers.l.ffn_norm  [hidden]
///   layers.l.w_gate    [hidden, intermediate]
///   layers.l.w_up      [hidden, intermediate]
///   layers.l.w_down    [intermediate, hidden]
/// final_norm       [hidden]
/// ```
///
/// Matrices are row-major `[in, out]`, so a projection is `x · W`.
/// The output head reuses `embed` transposed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
    pub(crate) embed: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) final_norm: usize,
}

impl ParamLayout {
    pub fn new(config: &ExpertConfig) -> Self {
        let (h, i, v) = (config.hidden_size, config.intermediate_size, config.vocab_size);
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, kind: TensorKind, shape: Vec<usize>| {
            let spec = TensorSpec {
                name,
                kind,
                shape,
                offset,
            };
            offset += spec.len();
            let at = spec.offset;
            tensors.push(spec);
            at
        };
        let embed = push("embed".into(), TensorKind::Embedding, vec![v, h]);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerOffsets {
                attn_norm: push(p("attn_norm"), TensorKind::AttnNorm, vec![h]),
                wq: push(p("wq"), TensorKind::Query, vec![h, h]),
                wk: push(p("wk"), TensorKind::Key, vec![h, h]),
                wv: push(p("wv"), TensorKind::Value, vec![h, h]),
                wo: push(p("wo"), TensorKind::AttnOut, vec![h, h]),
                ffn_norm: push(p("ffn_norm"), TensorKind::FfnNorm, vec![h]),
                gate: push(p("w_gate"), TensorKind::Gate, vec![h, i]),
                up: push(p("w_up"), TensorKind::Up, vec![h, i]),
                down: push(p("w_down"), TensorKind::Down, vec![i, h]),
            });
        }
        let final_norm = push("final_norm".into(), TensorKind::FinalNorm, vec![h]);
        Self {
            tensors,
            total: offset,
            embed,
            layers,
            final_norm,
        }
    }
}

/// Flat parameter vector of one expert. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub data: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(config: &ExpertConfig) -> Self {
        Self {
            data: vec![T::zero(); config.param_count()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap())
                .collect(),
        }
    }

    pub fn tensor<'a>(&'a self, spec: &TensorSpec) -> &'a [T] {
        &self.data[spec.range()]
    }
}

/// Deterministic in `(config, seed)`. Norm gains start at exactly 1; every
/// matrix is drawn from N(0, init_std²), with the two residual output
/// projections additionally scaled by 1/sqrt(2 · num_layers).
pub fn init_model(config: &ExpertConfig, rng_seed: u64) -> ModelParams<f32> {
    let layout = ParamLayout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let base = Normal::new(0.0f64, config.init_std).expect("positive std");
    let residual_scale = 1.0 / ((2 * config.num_layers) as f64).sqrt();
    let mut data = vec![0.0f32; layout.total];
    for spec in &layout.tensors {
        let slot = &mut data[spec.range()];
        if spec.kind.is_norm() {
            slot.fill(1.0);
            continue;
        }
        let scale = match spec.kind {
            TensorKind::AttnOut | TensorKind::Down => residual_scale,
            _ => 1.0,
        };
        for x in slot {
            *x = (base.sample(&mut rng) * scale) as f32;
        }
    }
    ModelParams { data }
}
