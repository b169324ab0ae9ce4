//! Minimal dense tensor plus hand-rolled layers with explicit backward
//! passes. Everything is generic over the scalar so the same graph runs in
//! f32 for training and f64 for finite-difference gradient checks.

mod act;
mod adam;
mod conv;
mod linear;

pub use act::{LeakyRelu, Relu, Sigmoid, Tanh};
pub use adam::{Adam, AdamConfig};
pub use conv::{Conv2d, Upsample2x};
pub use linear::Linear;

use num_traits::{Float, NumAssign, NumCast};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use std::fmt::Debug;

pub trait Scalar:
    Float + NumAssign + NumCast + Default + Debug + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self {
        <Self as NumCast>::from(x).unwrap()
    }
    fn to_f64(self) -> f64 {
        <f64 as NumCast>::from(self).unwrap()
    }
    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Self;
}

impl Scalar for f32 {
    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Self {
        Uniform::new(lo as f32, hi as f32).sample(rng)
    }
}

impl Scalar for f64 {
    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Self {
        Uniform::new(lo, hi).sample(rng)
    }
}

/// Dense row-major tensor. Layout for 4-d data is NCHW.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data length mismatch");
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Dims as (n, c, h, w); panics unless rank 4.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..shape.iter().product())
            .map(|_| T::sample_normal(rng) * T::from_f64(std))
            .collect();
        Tensor { shape: shape.to_vec(), data }
    }

    /// Kaiming-style uniform init over fan-in.
    pub fn kaiming<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        let data = (0..shape.iter().product())
            .map(|_| T::sample_uniform(rng, -bound, bound))
            .collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Mutable view over one named parameter and its gradient accumulator.
pub struct ParamRef<'a, T> {
    pub name: String,
    pub value: &'a mut Tensor<T>,
    pub grad: &'a mut Tensor<T>,
}

/// Concatenate along the channel axis of NCHW tensors.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    assert_eq!((n, h, w), (nb, hb, wb), "concat spatial/batch mismatch");
    let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
    let plane = h * w;
    for i in 0..n {
        let dst = &mut out.data[i * (ca + cb) * plane..(i + 1) * (ca + cb) * plane];
        dst[..ca * plane].copy_from_slice(&a.data[i * ca * plane..(i + 1) * ca * plane]);
        dst[ca * plane..].copy_from_slice(&b.data[i * cb * plane..(i + 1) * cb * plane]);
    }
    out
}

/// Inverse of [`concat_channels`] for the backward pass.
pub fn split_channels<T: Scalar>(g: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = g.dims4();
    assert!(ca < c);
    let cb = c - ca;
    let plane = h * w;
    let mut ga = Tensor::zeros(&[n, ca, h, w]);
    let mut gb = Tensor::zeros(&[n, cb, h, w]);
    for i in 0..n {
        let src = &g.data[i * c * plane..(i + 1) * c * plane];
        ga.data[i * ca * plane..(i + 1) * ca * plane].copy_from_slice(&src[..ca * plane]);
        gb.data[i * cb * plane..(i + 1) * cb * plane].copy_from_slice(&src[ca * plane..]);
    }
    (ga, gb)
}
