use super::{ParamRef, Scalar, Tensor};
use rand::Rng;

/// Fully connected layer over rank-2 input (n, in_f).
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub in_f: usize,
    pub out_f: usize,
    pub weight: Tensor<T>, // (out_f, in_f)
    pub bias: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_f: usize, out_f: usize, rng: &mut R) -> Self {
        Linear {
            in_f,
            out_f,
            weight: Tensor::kaiming(&[out_f, in_f], in_f, rng),
            bias: Tensor::zeros(&[out_f]),
            grad_weight: Tensor::zeros(&[out_f, in_f]),
            grad_bias: Tensor::zeros(&[out_f]),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.shape.len(), 2);
        let n = x.shape[0];
        assert_eq!(x.shape[1], self.in_f, "linear input features");
        let mut out = Tensor::zeros(&[n, self.out_f]);
        for i in 0..n {
            for o in 0..self.out_f {
                let mut acc = self.bias.data[o];
                let wrow = o * self.in_f;
                let xrow = i * self.in_f;
                for k in 0..self.in_f {
                    acc += self.weight.data[wrow + k] * x.data[xrow + k];
                }
                out.data[i * self.out_f + o] = acc;
            }
        }
        self.cache = Some(x.clone());
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>, accumulate_params: bool) -> Tensor<T> {
        let x = self.cache.as_ref().expect("linear backward before forward");
        let n = x.shape[0];
        assert_eq!(grad_out.shape, vec![n, self.out_f]);
        let mut gx = Tensor::zeros(&[n, self.in_f]);
        for i in 0..n {
            for o in 0..self.out_f {
                let g = grad_out.data[i * self.out_f + o];
                if accumulate_params {
                    self.grad_bias.data[o] += g;
                }
                let wrow = o * self.in_f;
                let xrow = i * self.in_f;
                for k in 0..self.in_f {
                    gx.data[xrow + k] += self.weight.data[wrow + k] * g;
                    if accumulate_params {
                        self.grad_weight.data[wrow + k] += x.data[xrow + k] * g;
                    }
                }
            }
        }
        gx
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(T::zero());
        self.grad_bias.fill(T::zero());
    }

    pub fn params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push(ParamRef {
            name: format!("{prefix}.weight"),
            value: &mut self.weight,
            grad: &mut self.grad_weight,
        });
        out.push(ParamRef {
            name: format!("{prefix}.bias"),
            value: &mut self.bias,
            grad: &mut self.grad_bias,
        });
    }
}
