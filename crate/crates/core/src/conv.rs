//! Bias-free 2-D convolution (cross-correlation, zero padding), its adjoint,
//! the kernel gradient, and the explicit expanded matrix used as an oracle.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Largest input size `explicit_conv_matrix` will expand.
pub const EXPLICIT_MATRIX_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelShape {
    pub c_out: usize,
    pub c_in: usize,
    pub k_h: usize,
    pub k_w: usize,
}

impl KernelShape {
    pub fn new(c_out: usize, c_in: usize, k_h: usize, k_w: usize) -> Result<Self> {
        let ks = Self {
            c_out,
            c_in,
            k_h,
            k_w,
        };
        ks.validate()?;
        Ok(ks)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_out == 0 || self.c_in == 0 || self.k_h == 0 || self.k_w == 0 {
            return Err(shape_err(format!("kernel dims must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.k_h, self.k_w]
    }

    pub fn numel(&self) -> usize {
        self.c_out * self.c_in * self.k_h * self.k_w
    }

    pub fn taps(&self) -> usize {
        self.k_h * self.k_w
    }

    /// `c_in·k_h·k_w`
    pub fn fan_in(&self) -> usize {
        self.c_in * self.taps()
    }

    /// `c_out·k_h·k_w`
    pub fn fan_out(&self) -> usize {
        self.c_out * self.taps()
    }

    pub fn of(kernel: &Tensor) -> Result<Self> {
        match kernel.shape()[..] {
            [c_out, c_in, k_h, k_w] => Self::new(c_out, c_in, k_h, k_w),
            _ => Err(shape_err(format!(
                "kernel must have 4 dims, got {:?}",
                kernel.shape()
            ))),
        }
    }
}

/// Input geometry `(channels, height, width)` plus stride and padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub input: [usize; 3],
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(input: [usize; 3], stride: usize, pad: usize) -> Self {
        Self { input, stride, pad }
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    /// `(H', W')`, or a shape error when either is non-positive.
    pub fn output_hw(&self, ks: &KernelShape) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(shape_err("stride must be >= 1"));
        }
        let [_, h, w] = self.input;
        let span = |n: usize, k: usize| -> Result<usize> {
            let padded = n + 2 * self.pad;
            if padded < k {
                return Err(shape_err(format!(
                    "kernel {k} larger than padded input {padded}"
                )));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok((span(h, ks.k_h)?, span(w, ks.k_w)?))
    }

    pub fn output_shape(&self, ks: &KernelShape) -> Result<[usize; 3]> {
        let (oh, ow) = self.output_hw(ks)?;
        Ok([ks.c_out, oh, ow])
    }

    pub fn check(&self, ks: &KernelShape) -> Result<()> {
        if self.input[0] != ks.c_in {
            return Err(shape_err(format!(
                "input has {} channels, kernel expects {}",
                self.input[0], ks.c_in
            )));
        }
        if self.input.contains(&0) {
            return Err(shape_err("input dims must be >= 1"));
        }
        self.output_hw(ks).map(|_| ())
    }
}

/// Iterates the valid `(input index, output index, kernel index)` triples.
/// Every other routine here is a different contraction over this set.
#[inline]
fn for_each_tap(ks: &KernelShape, geom: &ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
    let [c_in, h, w] = geom.input;
    let (oh, ow) = geom
        .output_hw(ks)
        .expect("geometry validated by caller");
    let (s, p) = (geom.stride as isize, geom.pad as isize);
    for co in 0..ks.c_out {
        for ci in 0..c_in {
            for kh in 0..ks.k_h {
                for kw in 0..ks.k_w {
                    let k_idx = ((co * c_in + ci) * ks.k_h + kh) * ks.k_w + kw;
                    for y in 0..oh {
                        let iy = y as isize * s + kh as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = (ci * h + iy as usize) * w;
                        let out_row = (co * oh + y) * ow;
                        for x in 0..ow {
                            let ix = x as isize * s + kw as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            f(in_row + ix as usize, out_row + x, k_idx);
                        }
                    }
                }
            }
        }
    }
}

/// Slice-level forward convolution; `input` is `c_in×H×W` flattened.
pub fn conv2d_raw(input: &[f64], kernel: &[f64], ks: &KernelShape, geom: &ConvGeometry) -> Vec<f64> {
    let [co, oh, ow] = geom.output_shape(ks).expect("geometry validated by caller");
    let mut out = vec![0.0; co * oh * ow];
    for_each_tap(ks, geom, |i, o, k| out[o] += kernel[k] * input[i]);
    out
}

/// Slice-level adjoint: maps an output-shaped vector back to input space.
pub fn conv2d_adjoint_raw(grad_out: &[f64], kernel: &[f64], ks: &KernelShape, geom: &ConvGeometry) -> Vec<f64> {
    let mut out = vec![0.0; geom.input_len()];
    for_each_tap(ks, geom, |i, o, k| out[i] += kernel[k] * grad_out[o]);
    out
}

/// Gradient of `⟨grad_out, conv2d(input; K)⟩` with respect to `K`.
pub fn conv2d_kernel_grad_raw(
    input: &[f64],
    grad_out: &[f64],
    ks: &KernelShape,
    geom: &ConvGeometry,
) -> Vec<f64> {
    let mut out = vec![0.0; ks.numel()];
    for_each_tap(ks, geom, |i, o, k| out[k] += grad_out[o] * input[i]);
    out
}

fn check_input(input: &Tensor, ks: &KernelShape, stride: usize, pad: usize) -> Result<ConvGeometry> {
    let dims: [usize; 3] = input
        .shape()
        .try_into()
        .map_err(|_| shape_err(format!("input must be c×H×W, got {:?}", input.shape())))?;
    let geom = ConvGeometry::new(dims, stride, pad);
    geom.check(ks)?;
    Ok(geom)
}

/// Cross-correlation of a `c_in×H×W` input with a `c_out×c_in×k_h×k_w`
/// kernel. No bias.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let ks = KernelShape::of(kernel)?;
    let geom = check_input(input, &ks, stride, pad)?;
    let out = conv2d_raw(input.data(), kernel.data(), &ks, &geom);
    Tensor::new(geom.output_shape(&ks)?.to_vec(), out)
}

/// Exact adjoint of [`conv2d`] for the given input geometry.
pub fn conv2d_adjoint(
    grad_out: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    input_shape: [usize; 3],
) -> Result<Tensor> {
    let ks = KernelShape::of(kernel)?;
    let geom = ConvGeometry::new(input_shape, stride, pad);
    geom.check(&ks)?;
    let expected = geom.output_shape(&ks)?;
    if grad_out.shape() != expected {
        return Err(shape_err(format!(
            "grad_out shape {:?} does not match conv output {expected:?}",
            grad_out.shape()
        )));
    }
    let out = conv2d_adjoint_raw(grad_out.data(), kernel.data(), &ks, &geom);
    Tensor::new(input_shape.to_vec(), out)
}

/// The expanded matrix `M` with `M·vec(x) = vec(conv2d(x))`. Rows index
/// output entries, columns input entries.
pub fn explicit_conv_matrix(kernel: &Tensor, input_shape: [usize; 3], stride: usize, pad: usize) -> Result<Tensor> {
    let ks = KernelShape::of(kernel)?;
    let geom = ConvGeometry::new(input_shape, stride, pad);
    geom.check(&ks)?;
    let n_in = geom.input_len();
    if n_in > EXPLICIT_MATRIX_CAP {
        return Err(Error::Capacity {
            size: n_in,
            cap: EXPLICIT_MATRIX_CAP,
        });
    }
    let n_out: usize = geom.output_shape(&ks)?.iter().product();
    let mut m = vec![0.0; n_out * n_in];
    let kd = kernel.data();
    for_each_tap(&ks, &geom, |i, o, k| m[o * n_in + i] += kd[k]);
    Tensor::matrix(n_out, n_in, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::dot;

    fn delta3(c: usize) -> Tensor {
        let mut k = Tensor::zeros(&[c, c, 3, 3]);
        for i in 0..c {
            k.data_mut()[((i * c + i) * 3 + 1) * 3 + 1] = 1.0;
        }
        k
    }

    #[test]
    fn one_by_one_scales() {
        let mut rng = Rng::new(0);
        let x = Tensor::from_fn(&[1, 4, 5], || rng.gaussian());
        let k = Tensor::new(vec![1, 1, 1, 1], vec![-2.5]).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y, x.scaled(-2.5));
        let back = conv2d_adjoint(&x, &k, 1, 0, [1, 4, 5]).unwrap();
        assert_eq!(back, x.scaled(-2.5));
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = Rng::new(1);
        let x = Tensor::from_fn(&[2, 5, 4], || rng.gaussian());
        let k = delta3(2);
        assert_eq!(conv2d(&x, &k, 1, 1).unwrap(), x);
        assert_eq!(conv2d_adjoint(&x, &k, 1, 1, [2, 5, 4]).unwrap(), x);
        let m = explicit_conv_matrix(&delta3(1), [1, 3, 3], 1, 1).unwrap();
        assert_eq!(m, Tensor::identity(9));
    }

    #[test]
    fn one_by_one_matrix_is_scaled_identity() {
        let k = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let m = explicit_conv_matrix(&k, [1, 2, 2], 1, 0).unwrap();
        assert_eq!(m, Tensor::identity(4).scaled(3.0));
    }

    #[test]
    fn matches_explicit_matrix() {
        let mut rng = Rng::new(0);
        let k = Tensor::from_fn(&[2, 3, 3, 3], || rng.gaussian());
        let x = Tensor::from_fn(&[3, 5, 5], || rng.gaussian());
        let m = explicit_conv_matrix(&k, [3, 5, 5], 1, 0).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        let (rows, cols) = m.dims2().unwrap();
        let my = crate::tensor::matvec(m.data(), rows, cols, x.data());
        for (a, b) in y.data().iter().zip(&my) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn explicit_matrix_apply_and_compare() {
        let mut rng = Rng::new(0);
        let k = Tensor::from_fn(&[1, 1, 3, 3], || rng.gaussian());
        let m = explicit_conv_matrix(&k, [1, 4, 4], 1, 0).unwrap();
        let (rows, cols) = m.dims2().unwrap();
        for _ in 0..50 {
            let x = Tensor::from_fn(&[1, 4, 4], || rng.gaussian());
            let y = conv2d(&x, &k, 1, 0).unwrap();
            let my = crate::tensor::matvec(m.data(), rows, cols, x.data());
            for (a, b) in y.data().iter().zip(&my) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_inner_product() {
        let mut rng = Rng::new(2);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let k = Tensor::from_fn(&[3, 2, 3, 2], || rng.gaussian());
            let shape = [2, 7, 6];
            let out_shape = ConvGeometry::new(shape, stride, pad)
                .output_shape(&KernelShape::of(&k).unwrap())
                .unwrap();
            for _ in 0..20 {
                let x = Tensor::from_fn(&shape, || rng.gaussian());
                let y = Tensor::from_fn(&out_shape, || rng.gaussian());
                let ax = conv2d(&x, &k, stride, pad).unwrap();
                let aty = conv2d_adjoint(&y, &k, stride, pad, shape).unwrap();
                let lhs = dot(ax.data(), y.data());
                let rhs = dot(x.data(), aty.data());
                assert!((lhs - rhs).abs() < 1e-10 * x.frobenius() * y.frobenius());
            }
        }
    }

    #[test]
    fn kernel_grad_matches_inner_product() {
        // ⟨y, conv(x; K)⟩ is linear in K, so its gradient applied to K
        // reproduces the value.
        let mut rng = Rng::new(5);
        let k = Tensor::from_fn(&[2, 2, 3, 3], || rng.gaussian());
        let ks = KernelShape::of(&k).unwrap();
        let geom = ConvGeometry::new([2, 6, 6], 2, 1);
        let x = rng.gaussian_vec(geom.input_len());
        let y_len: usize = geom.output_shape(&ks).unwrap().iter().product();
        let y = rng.gaussian_vec(y_len);
        let g = conv2d_kernel_grad_raw(&x, &y, &ks, &geom);
        let val = dot(&y, &conv2d_raw(&x, k.data(), &ks, &geom));
        assert!((dot(&g, k.data()) - val).abs() < 1e-10 * val.abs().max(1.0));
    }

    #[test]
    fn shape_errors() {
        let k = Tensor::zeros(&[1, 1, 5, 5]);
        let x = Tensor::zeros(&[1, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(Error::Shape(_))));
        assert!(conv2d(&x, &k, 0, 1).is_err());
        let wrong = Tensor::zeros(&[2, 3, 3]);
        assert!(conv2d(&wrong, &k, 1, 2).is_err());
        let k3 = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d_adjoint(&Tensor::zeros(&[1, 2, 2]), &k3, 1, 1, [1, 3, 3]).is_err());
    }

    #[test]
    fn explicit_matrix_cap() {
        let k = Tensor::zeros(&[1, 1, 1, 1]);
        assert!(matches!(
            explicit_conv_matrix(&k, [1, 65, 64], 1, 0),
            Err(Error::Capacity { .. })
        ));
    }
}
