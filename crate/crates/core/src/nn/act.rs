use super::{Scalar, Tensor};

/// Stateless activations that cache what their backward pass needs.

#[derive(Clone, Debug, Default)]
pub struct Tanh<T> {
    cache: Option<Tensor<T>>, // output
}

impl<T: Scalar> Tanh<T> {
    pub fn new() -> Self {
        Tanh { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = x.map(|v| v.tanh());
        self.cache = Some(y.clone());
        y
    }

    pub fn backward(&self, grad_out: &Tensor<T>) -> Tensor<T> {
        let y = self.cache.as_ref().expect("tanh backward before forward");
        let mut g = grad_out.clone();
        for (gi, yi) in g.data.iter_mut().zip(&y.data) {
            *gi *= T::one() - *yi * *yi;
        }
        g
    }
}

#[derive(Clone, Debug, Default)]
pub struct Sigmoid<T> {
    cache: Option<Tensor<T>>, // output
}

impl<T: Scalar> Sigmoid<T> {
    pub fn new() -> Self {
        Sigmoid { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = x.map(|v| T::one() / (T::one() + (-v).exp()));
        self.cache = Some(y.clone());
        y
    }

    pub fn backward(&self, grad_out: &Tensor<T>) -> Tensor<T> {
        let y = self.cache.as_ref().expect("sigmoid backward before forward");
        let mut g = grad_out.clone();
        for (gi, yi) in g.data.iter_mut().zip(&y.data) {
            *gi *= *yi * (T::one() - *yi);
        }
        g
    }
}

#[derive(Clone, Debug)]
pub struct LeakyRelu<T> {
    pub slope: T,
    cache: Option<Tensor<T>>, // input
}

impl<T: Scalar> LeakyRelu<T> {
    pub fn new(slope: f64) -> Self {
        LeakyRelu { slope: T::from_f64(slope), cache: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let s = self.slope;
        let y = x.map(|v| if v > T::zero() { v } else { v * s });
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&self, grad_out: &Tensor<T>) -> Tensor<T> {
        let x = self.cache.as_ref().expect("leaky relu backward before forward");
        let s = self.slope;
        let mut g = grad_out.clone();
        for (gi, xi) in g.data.iter_mut().zip(&x.data) {
            if *xi <= T::zero() {
                *gi *= s;
            }
        }
        g
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu<T> {
    cache: Option<Tensor<T>>, // input
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Relu { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&self, grad_out: &Tensor<T>) -> Tensor<T> {
        let x = self.cache.as_ref().expect("relu backward before forward");
        let mut g = grad_out.clone();
        for (gi, xi) in g.data.iter_mut().zip(&x.data) {
            if *xi <= T::zero() {
                *gi = T::zero();
            }
        }
        g
    }
}
