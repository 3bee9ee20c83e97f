//! Forward and backward kernels.
//!
//! Every output element is reduced in a fixed order regardless of how the
//! work is split across threads, so results are bitwise reproducible.

use rayon::prelude::*;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Stride and zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            padding: 0,
        }
    }
}

fn dims4<T: Real>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::Shape(format!(
            "{what} must be 4-D, got {:?}",
            t.shape()
        ))),
    }
}

fn out_dim(input: usize, kernel: usize, spec: ConvSpec) -> Option<usize> {
    let padded = input + 2 * spec.padding;
    (spec.stride > 0 && padded >= kernel).then(|| (padded - kernel) / spec.stride + 1)
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn new<T: Real>(
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        spec: ConvSpec,
    ) -> Result<Self> {
        let [n, cin, h, w] = dims4(x, "conv input")?;
        let [cout, wcin, kh, kw] = dims4(weight, "conv weight")?;
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv weight expects {wcin} input channels, input has {cin}"
            )));
        }
        if bias.shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv bias shape {:?}, expected [{cout}]",
                bias.shape()
            )));
        }
        let (Some(oh), Some(ow)) = (out_dim(h, kh, spec), out_dim(w, kw, spec)) else {
            return Err(Error::Shape(format!(
                "conv of {h}x{w} input with {kh}x{kw} kernel, {spec:?} has no output"
            )));
        };
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            spec,
        })
    }

    /// Output positions `o` for which input coordinate `o * stride + k - pad` is in range.
    #[inline]
    fn valid_range(&self, k: usize, out: usize, input: usize) -> (usize, usize) {
        let s = self.spec.stride;
        let p = self.spec.padding;
        // o * s + k >= p
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // o * s + k - p <= input - 1
        let hi = if input + p > k {
            ((input + p - k - 1) / s + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Cross-correlation of `x` `[N, Cin, H, W]` with `weight` `[Cout, Cin, kH, kW]`
/// plus `bias` `[Cout]`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, weight, bias, spec)?;
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    out.par_chunks_mut(plane).enumerate().for_each(|(i, acc)| {
        let (n, oc) = (i / g.cout, i % g.cout);
        for ic in 0..g.cin {
            let xbase = (n * g.cin + ic) * g.h * g.w;
            for ky in 0..g.kh {
                let (y0, y1) = g.valid_range(ky, g.oh, g.h);
                for kx in 0..g.kw {
                    let (x0, x1) = g.valid_range(kx, g.ow, g.w);
                    let wv = wd[((oc * g.cin + ic) * g.kh + ky) * g.kw + kx];
                    for oy in y0..y1 {
                        let iy = oy * g.spec.stride + ky - g.spec.padding;
                        let row = xbase + iy * g.w;
                        for ox in x0..x1 {
                            let ix = ox * g.spec.stride + kx - g.spec.padding;
                            acc[oy * g.ow + ox] = acc[oy * g.ow + ox] + wv * xd[row + ix];
                        }
                    }
                }
            }
        }
        for v in acc.iter_mut() {
            *v = *v + bd[oc];
        }
    });
    Tensor::from_vec(&[g.n, g.cout, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(x, weight, bias, spec)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::Shape(
            "conv output gradient has the wrong shape".into(),
        ));
    }
    let plane = g.oh * g.ow;
    let (xd, wd, gd) = (x.data(), weight.data(), grad_out.data());

    let mut gb = vec![T::zero(); g.cout];
    gb.par_iter_mut().enumerate().for_each(|(oc, b)| {
        for n in 0..g.n {
            let base = (n * g.cout + oc) * plane;
            for v in &gd[base..base + plane] {
                *b = *b + *v;
            }
        }
    });

    let ksize = g.cin * g.kh * g.kw;
    let mut gw = vec![T::zero(); g.cout * ksize];
    gw.par_chunks_mut(ksize).enumerate().for_each(|(oc, gwo)| {
        for n in 0..g.n {
            let gbase = (n * g.cout + oc) * plane;
            for ic in 0..g.cin {
                let xbase = (n * g.cin + ic) * g.h * g.w;
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid_range(ky, g.oh, g.h);
                    for kx in 0..g.kw {
                        let (x0, x1) = g.valid_range(kx, g.ow, g.w);
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = oy * g.spec.stride + ky - g.spec.padding;
                            for ox in x0..x1 {
                                let ix = ox * g.spec.stride + kx - g.spec.padding;
                                acc = acc + gd[gbase + oy * g.ow + ox] * xd[xbase + iy * g.w + ix];
                            }
                        }
                        let k = (ic * g.kh + ky) * g.kw + kx;
                        gwo[k] = gwo[k] + acc;
                    }
                }
            }
        }
    });

    let in_plane = g.h * g.w;
    let mut gx = vec![T::zero(); g.n * g.cin * in_plane];
    gx.par_chunks_mut(g.cin * in_plane)
        .enumerate()
        .for_each(|(n, gxn)| {
            for oc in 0..g.cout {
                let gbase = (n * g.cout + oc) * plane;
                for ic in 0..g.cin {
                    let xbase = ic * in_plane;
                    for ky in 0..g.kh {
                        let (y0, y1) = g.valid_range(ky, g.oh, g.h);
                        for kx in 0..g.kw {
                            let (x0, x1) = g.valid_range(kx, g.ow, g.w);
                            let wv = wd[((oc * g.cin + ic) * g.kh + ky) * g.kw + kx];
                            for oy in y0..y1 {
                                let iy = oy * g.spec.stride + ky - g.spec.padding;
                                for ox in x0..x1 {
                                    let ix = ox * g.spec.stride + kx - g.spec.padding;
                                    let idx = xbase + iy * g.w + ix;
                                    gxn[idx] = gxn[idx] + wv * gd[gbase + oy * g.ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        });

    Ok((
        Tensor::from_vec(x.shape(), gx)?,
        Tensor::from_vec(weight.shape(), gw)?,
        Tensor::from_vec(bias.shape(), gb)?,
    ))
}

/// Window maxima of `x` `[N, C, H, W]`. Also returns, per output element, the
/// flat input index that produced it; ties keep the first in row-major order.
pub fn maxpool2d<T: Real>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = dims4(x, "max-pool input")?;
    if k == 0 || stride == 0 || h < k || w < k {
        return Err(Error::Shape(format!(
            "cannot max-pool {h}x{w} with window {k} and stride {stride}"
        )));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut arg = vec![0usize; out.len()];
    out.par_chunks_mut(oh * ow)
        .zip(arg.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(plane, (o, a))| {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    o[oy * ow + ox] = xd[best];
                    a[oy * ow + ox] = best;
                }
            }
        });
    Ok((Tensor::from_vec(&[n, c, oh, ow], out)?, arg))
}

pub fn maxpool2d_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::Shape(
            "max-pool gradient does not match its record".into(),
        ));
    }
    let mut gx = Tensor::zeros(input_shape);
    let gxd = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gxd[i] = gxd[i] + g;
    }
    Ok(gx)
}

/// Affine map of `x` `[N, in]` by `weight` `[out, in]` and `bias` `[out]`.
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, fin, fout) = linear_dims(x, weight, bias)?;
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let mut out = vec![T::zero(); n * fout];
    out.par_chunks_mut(fout).enumerate().for_each(|(i, row)| {
        let xi = &xd[i * fin..(i + 1) * fin];
        for (o, r) in row.iter_mut().enumerate() {
            let wo = &wd[o * fin..(o + 1) * fin];
            let mut acc = T::zero();
            for (a, b) in xi.iter().zip(wo) {
                acc = acc + *a * *b;
            }
            *r = acc + bd[o];
        }
    });
    Tensor::from_vec(&[n, fout], out)
}

fn linear_dims<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let [n, fin] = *x.shape() else {
        return Err(Error::Shape(format!(
            "linear input must be 2-D, got {:?}",
            x.shape()
        )));
    };
    let [fout, win] = *weight.shape() else {
        return Err(Error::Shape(format!(
            "linear weight must be 2-D, got {:?}",
            weight.shape()
        )));
    };
    if win != fin || bias.shape() != [fout] {
        return Err(Error::Shape(format!(
            "linear {:?} x {:?} + {:?} is inconsistent",
            x.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    Ok((n, fin, fout))
}

pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, fin, fout) = linear_dims(x, weight, bias)?;
    if grad_out.shape() != [n, fout] {
        return Err(Error::Shape(
            "linear output gradient has the wrong shape".into(),
        ));
    }
    let (xd, wd, gd) = (x.data(), weight.data(), grad_out.data());
    let mut gx = vec![T::zero(); n * fin];
    gx.par_chunks_mut(fin).enumerate().for_each(|(i, row)| {
        for o in 0..fout {
            let g = gd[i * fout + o];
            for (r, wv) in row.iter_mut().zip(&wd[o * fin..(o + 1) * fin]) {
                *r = *r + g * *wv;
            }
        }
    });
    let mut gw = vec![T::zero(); fout * fin];
    gw.par_chunks_mut(fin).enumerate().for_each(|(o, row)| {
        for i in 0..n {
            let g = gd[i * fout + o];
            for (r, xv) in row.iter_mut().zip(&xd[i * fin..(i + 1) * fin]) {
                *r = *r + g * *xv;
            }
        }
    });
    let mut gb = vec![T::zero(); fout];
    for i in 0..n {
        for (o, b) in gb.iter_mut().enumerate() {
            *b = *b + gd[i * fout + o];
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), gx)?,
        Tensor::from_vec(weight.shape(), gw)?,
        Tensor::from_vec(bias.shape(), gb)?,
    ))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::Shape("relu gradient has the wrong shape".into()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Mean of squared differences over all elements.
pub fn mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "mse of {:?} against {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let sum: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(sum / T::of(pred.len() as f64))
}

/// Gradient of [`mse`] with respect to `pred`, scaled by the upstream gradient.
pub fn mse_backward<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, grad: T) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape("mse gradient shapes differ".into()));
    }
    let k = T::of(2.0) * grad / T::of(pred.len() as f64);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| k * (p - t))
        .collect();
    Tensor::from_vec(pred.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_hand_sum() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, ConvSpec::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv_identity_and_bias() {
        let x = t(&[1, 1, 2, 3], vec![1.0, -2.0, 3.0, 4.5, 0.0, 6.0]);
        let y = conv2d(
            &x,
            &Tensor::full(&[1, 1, 1, 1], 1.0),
            &Tensor::zeros(&[1]),
            ConvSpec::default(),
        )
        .unwrap();
        assert_eq!(y, x);
        let y = conv2d(
            &x,
            &Tensor::zeros(&[2, 1, 2, 2]),
            &t(&[2], vec![0.5, -1.0]),
            ConvSpec {
                stride: 1,
                padding: 1,
            },
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 4]);
        assert!(y.data()[..12].iter().all(|&v| v == 0.5));
        assert!(y.data()[12..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn conv_output_dims() {
        let x = Tensor::<f64>::zeros(&[2, 3, 9, 7]);
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let y = conv2d(
            &x,
            &w,
            &Tensor::zeros(&[4]),
            ConvSpec {
                stride: 2,
                padding: 1,
            },
        )
        .unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 4]);
        assert!(conv2d(
            &x,
            &Tensor::zeros(&[4, 2, 3, 3]),
            &Tensor::zeros(&[4]),
            ConvSpec::default()
        )
        .is_err());
        assert!(conv2d(&x, &w, &Tensor::zeros(&[3]), ConvSpec::default()).is_err());
        assert!(conv2d(
            &x,
            &Tensor::zeros(&[4, 3, 10, 3]),
            &Tensor::zeros(&[4]),
            ConvSpec::default()
        )
        .is_err());
    }

    #[test]
    fn pool_cases() {
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.item(), 4.0);
        assert_eq!(arg, vec![3]);
        let c = Tensor::full(&[1, 2, 4, 4], 0.25);
        let (y, arg) = maxpool2d(&c, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
        // ties route to the first window element
        assert_eq!(arg[0], 0);
        assert_eq!(arg[5], 16 + 2);
        assert!(maxpool2d(&Tensor::<f64>::zeros(&[1, 1, 1, 3]), 2, 2).is_err());
    }

    #[test]
    fn linear_relu_mse() {
        let x = t(&[1, 2], vec![1.0, 2.0]);
        let w = t(&[1, 2], vec![3.0, -1.0]);
        assert_eq!(linear(&x, &w, &t(&[1], vec![0.5])).unwrap().item(), 1.5);
        assert!(linear(&x, &t(&[1, 3], vec![0.0; 3]), &t(&[1], vec![0.0])).is_err());
        assert_eq!(relu(&t(&[2], vec![-1.0, 3.0])).data(), &[0.0, 3.0]);
        let a = t(&[2], vec![0.0, 2.0]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &t(&[2], vec![1.0, 1.0])).unwrap(), 1.0);
        assert!(mse(&a, &t(&[3], vec![1.0; 3])).is_err());
    }
}
