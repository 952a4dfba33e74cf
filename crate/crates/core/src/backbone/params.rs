use std::fmt::Debug;

use ndarray::{Array1, Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{FEATURE_DIM, WINDOW_LEN};

/// Numeric type the model runs in: f32 for training, f64 for gradient checks.
pub trait Scalar:
    Float + NumAssign + LinalgScalar + ScalarOperand + FromPrimitive + Debug + Default + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + NumAssign + LinalgScalar + ScalarOperand + FromPrimitive + Debug + Default + Send + Sync + 'static
{
}

pub(crate) fn c<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("representable constant")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub window_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: FEATURE_DIM,
            window_len: WINDOW_LEN,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
        }
    }
}

impl ModelConfig {
    /// The reduced model used for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 16,
            n_layers: 1,
            d_ff: 64,
            ..Default::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config("d_model must be even for the sinusoidal table".into()));
        }
        if self.feature_dim == 0 || self.window_len == 0 {
            return Err(Error::Config("feature_dim and window_len must be positive".into()));
        }
        Ok(())
    }
}

/// Sinusoidal table: sin at even dims, cos at odd dims.
pub fn positional_table<T: Scalar>(len: usize, d: usize) -> Array2<T> {
    Array2::from_shape_fn((len, d), |(pos, j)| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
        c(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// A named view of one parameter tensor.
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct TensorMut<'a, T> {
    pub name: String,
    pub data: &'a mut [T],
}

fn uniform<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<T> {
    let bound = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| c(rng.random_range(-bound..bound)))
}

macro_rules! tensor_list {
    ($self:ident, $prefix:expr, [$($f:ident),*]) => {
        vec![$(TensorRef {
            name: format!("{}{}", $prefix, stringify!($f)),
            shape: $self.$f.shape().to_vec(),
            data: $self.$f.as_slice().expect("standard layout"),
        }),*]
    };
}

macro_rules! tensor_list_mut {
    ($self:ident, $prefix:expr, [$($f:ident),*]) => {
        vec![$(TensorMut {
            name: format!("{}{}", $prefix, stringify!($f)),
            data: $self.$f.as_slice_mut().expect("standard layout"),
        }),*]
    };
}

/// One pre-LN encoder layer. Weight matrices are stored input × output.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Array1<T>,
    pub ln1_b: Array1<T>,
    pub wq: Array2<T>,
    pub bq: Array1<T>,
    pub wk: Array2<T>,
    pub bk: Array1<T>,
    pub wv: Array2<T>,
    pub bv: Array1<T>,
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    pub ln2_g: Array1<T>,
    pub ln2_b: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn zeros(cfg: &ModelConfig) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        LayerParams {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
        }
    }

    fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let mut p = Self::zeros(cfg);
        p.ln1_g.fill(T::one());
        p.ln2_g.fill(T::one());
        p.wq = uniform(rng, d, d);
        p.wk = uniform(rng, d, d);
        p.wv = uniform(rng, d, d);
        p.wo = uniform(rng, d, d);
        p.w1 = uniform(rng, d, f);
        p.w2 = uniform(rng, f, d);
        p
    }

    fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_, T>> {
        tensor_list!(
            self,
            prefix,
            [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2]
        )
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorMut<'_, T>> {
        tensor_list_mut!(
            self,
            prefix,
            [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2]
        )
    }
}

/// Shared encoder plus prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<T> {
    pub cfg: ModelConfig,
    pub w_in: Array2<T>,
    pub b_in: Array1<T>,
    pub layers: Vec<LayerParams<T>>,
    pub w_head: Array2<T>,
    pub b_head: Array1<T>,
    pub pos: Array2<T>,
}

impl<T: Scalar> BackboneParams<T> {
    pub fn zeros(cfg: ModelConfig) -> Self {
        let d = cfg.d_model;
        BackboneParams {
            w_in: Array2::zeros((cfg.feature_dim, d)),
            b_in: Array1::zeros(d),
            layers: (0..cfg.n_layers).map(|_| LayerParams::zeros(&cfg)).collect(),
            w_head: Array2::zeros((d, cfg.feature_dim)),
            b_head: Array1::zeros(cfg.feature_dim),
            pos: positional_table(cfg.window_len, d),
            cfg,
        }
    }

    /// Fan-in uniform weights, zero biases, unit layer-norm gains.
    pub fn init<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        p.w_in = uniform(rng, cfg.feature_dim, cfg.d_model);
        p.layers = (0..cfg.n_layers).map(|_| LayerParams::init(&cfg, rng)).collect();
        p.w_head = uniform(rng, cfg.d_model, cfg.feature_dim);
        p
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut v = tensor_list!(self, "", [w_in, b_in]);
        for (i, l) in self.layers.iter().enumerate() {
            v.extend(l.tensors(&format!("layer{i}.")));
        }
        v.extend(tensor_list!(self, "", [w_head, b_head]));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut v = tensor_list_mut!(self, "", [w_in, b_in]);
        for (i, l) in self.layers.iter_mut().enumerate() {
            v.extend(l.tensors_mut(&format!("layer{i}.")));
        }
        v.extend(tensor_list_mut!(self, "", [w_head, b_head]));
        v
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U + Copy) -> BackboneParams<U> {
        let mut out = BackboneParams::<U>::zeros(self.cfg);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d = f(*s);
            }
        }
        out
    }
}

/// Per-user residual MLP: h + relu(h·w1 + b1)·w2 + b2.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

impl<T: Scalar> AdapterParams<T> {
    pub fn zeros(d: usize) -> Self {
        AdapterParams {
            w1: Array2::zeros((d, d)),
            b1: Array1::zeros(d),
            w2: Array2::zeros((d, d)),
            b2: Array1::zeros(d),
        }
    }

    /// Random first layer, zero second layer: starts as the identity.
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        let mut a = Self::zeros(d);
        a.w1 = uniform(rng, d, d);
        a
    }

    pub fn d_model(&self) -> usize {
        self.w1.nrows()
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        tensor_list!(self, "", [w1, b1, w2, b2])
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        tensor_list_mut!(self, "", [w1, b1, w2, b2])
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U + Copy) -> AdapterParams<U> {
        AdapterParams {
            w1: self.w1.mapv(f),
            b1: self.b1.mapv(f),
            w2: self.w2.mapv(f),
            b2: self.b2.mapv(f),
        }
    }
}

/// Adam moments for any tensor collection.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, params: Vec<TensorMut<'_, f32>>, grads: Vec<TensorRef<'_, f32>>) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.data.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let step_size = (self.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in p.data.iter_mut().zip(g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= step_size * *mi / ((*vi).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn positional_table_values() {
        let p: Array2<f64> = positional_table(48, 64);
        assert_eq!(p[(0, 0)], 0.0);
        assert_eq!(p[(0, 1)], 1.0);
        assert!((p[(3, 0)] - 3f64.sin()).abs() < 1e-15);
        assert!((p[(3, 2)] - (3.0 / 10000f64.powf(2.0 / 64.0)).sin()).abs() < 1e-15);
        assert_eq!(p, positional_table::<f64>(48, 64));
    }

    #[test]
    fn tensor_listing_is_complete() {
        let cfg = ModelConfig::default();
        let p = BackboneParams::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let t = p.tensors();
        assert_eq!(t.len(), 4 + 16 * 2);
        let expected = 8 * 64 + 64 + 2 * (4 * 64 * 64 + 4 * 64 + 4 * 64 + 64 * 256 * 2 + 256 + 64) + 64 * 8 + 8;
        assert_eq!(p.n_params(), expected);
        assert!(t.iter().any(|x| x.name == "layer1.w2" && x.shape == vec![256, 64]));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig {
            n_heads: 3,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut a = AdapterParams::<f32>::zeros(2);
        let mut g = AdapterParams::<f32>::zeros(2);
        g.b1.fill(0.5);
        g.b2.fill(-2.0);
        let mut opt = Adam::new(1e-3);
        opt.update(a.tensors_mut(), g.tensors());
        for v in a.b1.iter() {
            assert!((v + 1e-3).abs() < 1e-6);
        }
        for v in a.b2.iter() {
            assert!((v - 1e-3).abs() < 1e-6);
        }
        assert!(a.w1.iter().all(|&v| v == 0.0));
    }
}
