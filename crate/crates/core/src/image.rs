//! Complex-valued images stored as separate real and imaginary planes.

use crate::tensor::Tensor;

/// A complex image with `[h,w]` real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    re: Tensor,
    im: Tensor,
}

impl ComplexImage {
    pub fn new(re: Tensor, im: Tensor) -> Self {
        assert_eq!(re.shape().len(), 2, "complex image planes must be rank 2");
        assert_eq!(re.shape(), im.shape(), "re/im plane shapes differ");
        ComplexImage { re, im }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        ComplexImage {
            re: Tensor::zeros(&[h, w]),
            im: Tensor::zeros(&[h, w]),
        }
    }

    pub fn h(&self) -> usize {
        self.re.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.re.shape()[1]
    }

    pub fn re(&self) -> &Tensor {
        &self.re
    }

    pub fn im(&self) -> &Tensor {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut Tensor {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut Tensor {
        &mut self.im
    }

    /// Packs into a `[2,h,w]` tensor (channel 0 real, channel 1 imaginary),
    /// the layout used on the autodiff tape.
    pub fn to_channels(&self) -> Tensor {
        let mut data = Vec::with_capacity(2 * self.re.numel());
        data.extend_from_slice(self.re.data());
        data.extend_from_slice(self.im.data());
        Tensor::from_vec(&[2, self.h(), self.w()], data)
    }

    pub fn from_channels(t: &Tensor) -> Self {
        let s = t.shape();
        assert_eq!(s.len(), 3, "expected [2,h,w]");
        assert_eq!(s[0], 2, "expected [2,h,w]");
        let hw = s[1] * s[2];
        ComplexImage {
            re: Tensor::from_vec(&[s[1], s[2]], t.data()[..hw].to_vec()),
            im: Tensor::from_vec(&[s[1], s[2]], t.data()[hw..].to_vec()),
        }
    }

    pub fn magnitude(&self) -> Tensor {
        let data = self
            .re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(&r, &i)| (r * r + i * i).sqrt())
            .collect();
        Tensor::from_vec(self.re.shape(), data)
    }

    pub fn conj(&self) -> ComplexImage {
        ComplexImage {
            re: self.re.clone(),
            im: self.im.map(|x| -x),
        }
    }

    pub fn cmul(&self, other: &ComplexImage) -> ComplexImage {
        assert_eq!(self.re.shape(), other.re.shape(), "cmul shapes differ");
        let n = self.re.numel();
        let mut re = vec![0.0; n];
        let mut im = vec![0.0; n];
        let (ar, ai) = (self.re.data(), self.im.data());
        let (br, bi) = (other.re.data(), other.im.data());
        for k in 0..n {
            re[k] = ar[k] * br[k] - ai[k] * bi[k];
            im[k] = ar[k] * bi[k] + ai[k] * br[k];
        }
        ComplexImage {
            re: Tensor::from_vec(self.re.shape(), re),
            im: Tensor::from_vec(self.im.shape(), im),
        }
    }

    pub fn add(&self, other: &ComplexImage) -> ComplexImage {
        assert_eq!(self.re.shape(), other.re.shape(), "add shapes differ");
        let re = self
            .re
            .data()
            .iter()
            .zip(other.re.data())
            .map(|(&a, &b)| a + b)
            .collect();
        let im = self
            .im
            .data()
            .iter()
            .zip(other.im.data())
            .map(|(&a, &b)| a + b)
            .collect();
        ComplexImage {
            re: Tensor::from_vec(self.re.shape(), re),
            im: Tensor::from_vec(self.im.shape(), im),
        }
    }

    pub fn sub(&self, other: &ComplexImage) -> ComplexImage {
        assert_eq!(self.re.shape(), other.re.shape(), "sub shapes differ");
        let re = self
            .re
            .data()
            .iter()
            .zip(other.re.data())
            .map(|(&a, &b)| a - b)
            .collect();
        let im = self
            .im
            .data()
            .iter()
            .zip(other.im.data())
            .map(|(&a, &b)| a - b)
            .collect();
        ComplexImage {
            re: Tensor::from_vec(self.re.shape(), re),
            im: Tensor::from_vec(self.im.shape(), im),
        }
    }

    pub fn scale(&self, c: f64) -> ComplexImage {
        ComplexImage {
            re: self.re.map(|x| c * x),
            im: self.im.map(|x| c * x),
        }
    }

    /// Elementwise product with a real plane `[h,w]`.
    pub fn mul_real(&self, mask: &Tensor) -> ComplexImage {
        assert_eq!(self.re.shape(), mask.shape(), "mask shape differs");
        let re = self
            .re
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&a, &m)| a * m)
            .collect();
        let im = self
            .im
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&a, &m)| a * m)
            .collect();
        ComplexImage {
            re: Tensor::from_vec(self.re.shape(), re),
            im: Tensor::from_vec(self.im.shape(), im),
        }
    }

    /// Real inner product of the stacked (re,im) representations.
    pub fn dot_real(&self, other: &ComplexImage) -> f64 {
        let a: f64 = self
            .re
            .data()
            .iter()
            .zip(other.re.data())
            .map(|(&x, &y)| x * y)
            .sum();
        let b: f64 = self
            .im
            .data()
            .iter()
            .zip(other.im.data())
            .map(|(&x, &y)| x * y)
            .sum();
        a + b
    }

    pub fn norm(&self) -> f64 {
        self.dot_real(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.re.max_abs().max(self.im.max_abs())
    }

    pub fn is_finite(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}
