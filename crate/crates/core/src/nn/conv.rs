use super::{ParamRef, Scalar, Tensor};
use rand::Rng;

/// 2-d convolution with square kernel, zero padding, caching forward inputs
/// so `backward` can produce both the input gradient and parameter
/// gradients.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        Conv2d {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            weight: Tensor::kaiming(&[out_c, in_c, kernel, kernel], fan_in, rng),
            bias: Tensor::zeros(&[out_c]),
            grad_weight: Tensor::zeros(&[out_c, in_c, kernel, kernel]),
            grad_bias: Tensor::zeros(&[out_c]),
            cache: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let mut out = Tensor::zeros(&[n, self.out_c, oh, ow]);
        let k = self.kernel;
        for ni in 0..n {
            for oc in 0..self.out_c {
                let b = self.bias.data[oc];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b;
                        for ic in 0..self.in_c {
                            let wbase = ((oc * self.in_c) + ic) * k * k;
                            let xbase = (ni * c + ic) * h * w;
                            for ky in 0..k {
                                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = xbase + iy as usize * w;
                                let wrow = wbase + ky * k;
                                for kx in 0..k {
                                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += self.weight.data[wrow + kx] * x.data[xrow + ix as usize];
                                }
                            }
                        }
                        out.data[((ni * self.out_c + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        self.cache = Some(x.clone());
        out
    }

    /// Input gradient; parameter gradients accumulate unless
    /// `accumulate_params` is false (used when a frozen or foreign network
    /// only relays gradients to its input).
    pub fn backward(&mut self, grad_out: &Tensor<T>, accumulate_params: bool) -> Tensor<T> {
        let x = self.cache.as_ref().expect("conv backward before forward");
        let (n, c, h, w) = x.dims4();
        let (gn, goc, oh, ow) = grad_out.dims4();
        assert_eq!((gn, goc), (n, self.out_c), "conv grad shape");
        let mut gx = Tensor::zeros(&[n, c, h, w]);
        let k = self.kernel;
        for ni in 0..n {
            for oc in 0..self.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = grad_out.data[((ni * self.out_c + oc) * oh + oy) * ow + ox];
                        if accumulate_params {
                            self.grad_bias.data[oc] += g;
                        }
                        for ic in 0..self.in_c {
                            let wbase = ((oc * self.in_c) + ic) * k * k;
                            let xbase = (ni * c + ic) * h * w;
                            for ky in 0..k {
                                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = xbase + iy as usize * w;
                                let wrow = wbase + ky * k;
                                for kx in 0..k {
                                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    gx.data[xrow + ix as usize] += self.weight.data[wrow + kx] * g;
                                    if accumulate_params {
                                        self.grad_weight.data[wrow + kx] +=
                                            x.data[xrow + ix as usize] * g;
                                    }
                                }
                            }
                        }
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

/// Nearest-neighbour 2x spatial upsampling.
#[derive(Clone, Debug, Default)]
pub struct Upsample2x;

impl Upsample2x {
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        for nc in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x.data[(nc * h + y) * w + xx];
                    let base = nc * 4 * h * w;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            out.data[base + (2 * y + dy) * 2 * w + 2 * xx + dx] = v;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward<T: Scalar>(&self, grad_out: &Tensor<T>) -> Tensor<T> {
        let (n, c, oh, ow) = grad_out.dims4();
        let (h, w) = (oh / 2, ow / 2);
        let mut gx = Tensor::zeros(&[n, c, h, w]);
        for nc in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    let base = nc * oh * ow;
                    let mut acc = T::zero();
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += grad_out.data[base + (2 * y + dy) * ow + 2 * xx + dx];
                        }
                    }
                    gx.data[(nc * h + y) * w + xx] = acc;
                }
            }
        }
        gx
    }
}
