//! Spatial operations on NCHW tensors.

use crate::float::{gemm, Layout};
use crate::{Error, Float, Graph, Result, Tensor, Var};

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    /// Stride-`stride` convolution whose padding keeps `ceil(size / stride)`
    /// outputs for odd kernels.
    pub fn same(kernel: usize, stride: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn output_size(&self, input: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

struct Im2Col {
    cin: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    geo: ConvGeometry,
}

impl Im2Col {
    fn rows(&self) -> usize {
        self.cin * self.geo.kernel * self.geo.kernel
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Input image (C×H×W) into a (C·k·k)×(Ho·Wo) column matrix.
    fn unfold<T: Float>(&self, x: &[T], cols: &mut [T]) {
        let k = self.geo.kernel;
        let p = self.cols();
        for c in 0..self.cin {
            let src = &x[c * self.h * self.w..][..self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * p..][..p];
                    let dy = (ki * self.geo.dilation) as isize - self.geo.padding as isize;
                    let dx = (kj * self.geo.dilation) as isize - self.geo.padding as isize;
                    for oy in 0..self.ho {
                        let iy = (oy * self.geo.stride) as isize + dy;
                        let out_row = &mut dst[oy * self.wo..][..self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let in_row = &src[iy as usize * self.w..][..self.w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.geo.stride) as isize + dx;
                            *o = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                in_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::unfold`]: scatter-adds columns back into an image.
    fn fold<T: Float>(&self, cols: &[T], x: &mut [T]) {
        let k = self.geo.kernel;
        let p = self.cols();
        for c in 0..self.cin {
            let dst = &mut x[c * self.h * self.w..][..self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * p..][..p];
                    let dy = (ki * self.geo.dilation) as isize - self.geo.padding as isize;
                    let dx = (kj * self.geo.dilation) as isize - self.geo.padding as isize;
                    for oy in 0..self.ho {
                        let iy = (oy * self.geo.stride) as isize + dy;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let in_row = &mut dst[iy as usize * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.geo.stride) as isize + dx;
                            if ix >= 0 && ix < self.w as isize {
                                in_row[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Float> Graph<T> {
    /// 2-D convolution: `x` N×Cin×H×W, `weight` Cout×Cin×k×k, `bias` Cout.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Var, geo: ConvGeometry) -> Result<Var> {
        let (n, cin, h, w) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        let bshape = self.shape(bias);
        if wcin != cin || kh != geo.kernel || kw != geo.kernel || bshape != [cout] {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!(
                    "input channels {cin}, weight {:?}, bias {bshape:?}, kernel {}",
                    [cout, wcin, kh, kw],
                    geo.kernel
                ),
            });
        }
        let (Some(ho), Some(wo)) = (geo.output_size(h), geo.output_size(w)) else {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("input {h}x{w} smaller than the kernel span"),
            });
        };
        let plan = Im2Col {
            cin,
            h,
            w,
            ho,
            wo,
            geo,
        };
        let (rows, p) = (plan.rows(), plan.cols());
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        {
            let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
            let mut cols = vec![T::zero(); rows * p];
            for b in 0..n {
                plan.unfold(&xv.data()[b * cin * h * w..][..cin * h * w], &mut cols);
                let o = &mut out.data_mut()[b * cout * p..][..cout * p];
                for (c, chunk) in o.chunks_mut(p).enumerate() {
                    chunk.fill(bv.data()[c]);
                }
                gemm(
                    cout,
                    rows,
                    p,
                    wv.data(),
                    Layout::Normal,
                    &cols,
                    Layout::Normal,
                    o,
                    true,
                );
            }
        }
        Ok(self.custom(&[x, weight, bias], out, move |args| {
            let (xv, wv) = (args.inputs[0], args.inputs[1]);
            let gy = args.grad.data();
            let mut gx = Tensor::zeros(&[n, cin, h, w]);
            let mut gw = Tensor::zeros(&[cout, cin, geo.kernel, geo.kernel]);
            let mut gb = Tensor::zeros(&[cout]);
            let mut cols = vec![T::zero(); rows * p];
            for b in 0..n {
                let gyb = &gy[b * cout * p..][..cout * p];
                for (c, chunk) in gyb.chunks(p).enumerate() {
                    gb.data_mut()[c] += chunk.iter().copied().sum::<T>();
                }
                plan.unfold(&xv.data()[b * cin * h * w..][..cin * h * w], &mut cols);
                gemm(
                    cout,
                    p,
                    rows,
                    gyb,
                    Layout::Normal,
                    &cols,
                    Layout::Transposed,
                    gw.data_mut(),
                    true,
                );
                gemm(
                    rows,
                    cout,
                    p,
                    wv.data(),
                    Layout::Transposed,
                    gyb,
                    Layout::Normal,
                    &mut cols,
                    false,
                );
                plan.fold(&cols, &mut gx.data_mut()[b * cin * h * w..][..cin * h * w]);
            }
            vec![Some(gx), Some(gw), Some(gb)]
        }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        {
            let xv = self.value(x);
            for plane in 0..n * c {
                let src = &xv.data()[plane * h * w..][..h * w];
                let dst = &mut out.data_mut()[plane * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        dst[oy * wo + ox] = src[(oy / factor) * w + ox / factor];
                    }
                }
            }
        }
        Ok(self.custom(&[x], out, move |args| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for plane in 0..n * c {
                let src = &args.grad.data()[plane * ho * wo..][..ho * wo];
                let dst = &mut gx.data_mut()[plane * h * w..][..h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        dst[(oy / factor) * w + ox / factor] += src[oy * wo + ox];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::Shape {
                op: "max_pool2",
                detail: format!("input {h}x{w} too small"),
            });
        }
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0usize; n * c * ho * wo];
        {
            let xv = self.value(x);
            for plane in 0..n * c {
                let src = &xv.data()[plane * h * w..][..h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = (2 * oy) * w + 2 * ox;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = (2 * oy + dy) * w + 2 * ox + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                        let o = plane * ho * wo + oy * wo + ox;
                        out.data_mut()[o] = src[best];
                        argmax[o] = plane * h * w + best;
                    }
                }
            }
        }
        Ok(self.custom(&[x], out, move |args| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for (o, &src) in argmax.iter().enumerate() {
                gx.data_mut()[src] += args.grad.data()[o];
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    /// Direct seven-loop convolution.
    #[allow(clippy::too_many_arguments)]
    fn direct_conv(
        x: &[f64],
        (n, cin, h, w): (usize, usize, usize, usize),
        wt: &[f64],
        b: &[f64],
        cout: usize,
        geo: ConvGeometry,
    ) -> (Vec<f64>, usize, usize) {
        let ho = geo.output_size(h).unwrap();
        let wo = geo.output_size(w).unwrap();
        let k = geo.kernel;
        let mut out = vec![0.0; n * cout * ho * wo];
        for bi in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * geo.stride + ki * geo.dilation) as isize
                                        - geo.padding as isize;
                                    let ix = (ox * geo.stride + kj * geo.dilation) as isize
                                        - geo.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        acc += wt[((co * cin + ci) * k + ki) * k + kj]
                                            * x[((bi * cin + ci) * h + iy as usize) * w
                                                + ix as usize];
                                    }
                                }
                            }
                        }
                        out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        (out, ho, wo)
    }

    #[test]
    fn conv2d_matches_direct_convolution_for_several_geometries() {
        let geos = [
            ConvGeometry::same(3, 1, 1),
            ConvGeometry::same(3, 2, 1),
            ConvGeometry::same(3, 1, 2),
            ConvGeometry {
                kernel: 1,
                stride: 1,
                padding: 0,
                dilation: 1,
            },
            ConvGeometry {
                kernel: 3,
                stride: 2,
                padding: 0,
                dilation: 1,
            },
        ];
        let (n, cin, h, w, cout) = (2, 3, 7, 6, 4);
        for geo in geos {
            let x = lcg(1, n * cin * h * w);
            let wt = lcg(2, cout * cin * geo.kernel * geo.kernel);
            let b = lcg(3, cout);
            let (want, ho, wo) = direct_conv(&x, (n, cin, h, w), &wt, &b, cout, geo);
            let g = Graph::new();
            let vx = g.leaf(Tensor::from_vec(&[n, cin, h, w], x).unwrap());
            let vw = g.leaf(Tensor::from_vec(&[cout, cin, geo.kernel, geo.kernel], wt).unwrap());
            let vb = g.leaf(Tensor::from_vec(&[cout], b).unwrap());
            let y = g.conv2d(vx, vw, vb, geo).unwrap();
            assert_eq!(g.shape(y), vec![n, cout, ho, wo]);
            for (a, e) in g.value(y).data().iter().zip(&want) {
                assert!((a - e).abs() < 1e-12, "{geo:?}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let geo = ConvGeometry::same(3, 2, 1);
        let (n, cin, h, w, cout) = (1, 2, 5, 4, 3);
        let x0 = lcg(7, n * cin * h * w);
        let w0 = lcg(8, cout * cin * 9);
        let b0 = lcg(9, cout);
        let probe = lcg(10, n * cout * 3 * 2);
        let loss = |x: &[f64], wt: &[f64], b: &[f64]| -> f64 {
            let (y, _, _) = direct_conv(x, (n, cin, h, w), wt, b, cout, geo);
            y.iter().zip(&probe).map(|(a, p)| a * p).sum()
        };

        let g = Graph::new();
        let vx = g.leaf(Tensor::from_vec(&[n, cin, h, w], x0.clone()).unwrap());
        let vw = g.leaf(Tensor::from_vec(&[cout, cin, 3, 3], w0.clone()).unwrap());
        let vb = g.leaf(Tensor::from_vec(&[cout], b0.clone()).unwrap());
        let y = g.conv2d(vx, vw, vb, geo).unwrap();
        let pv = g.constant(Tensor::from_vec(&g.shape(y), probe.clone()).unwrap());
        let s = g.mul(y, pv).unwrap();
        let s = g.sum_all(s);
        let grads = g.backward(s);

        let eps = 1e-6;
        let check = |analytic: &[f64], base: &[f64], which: usize| {
            for i in 0..base.len() {
                let mut plus = base.to_vec();
                plus[i] += eps;
                let mut minus = base.to_vec();
                minus[i] -= eps;
                let (fp, fm) = match which {
                    0 => (loss(&plus, &w0, &b0), loss(&minus, &w0, &b0)),
                    1 => (loss(&x0, &plus, &b0), loss(&x0, &minus, &b0)),
                    _ => (loss(&x0, &w0, &plus), loss(&x0, &w0, &minus)),
                };
                let num = (fp - fm) / (2.0 * eps);
                assert!(
                    (num - analytic[i]).abs() < 1e-6,
                    "arg {which} idx {i}: {num} vs {}",
                    analytic[i]
                );
            }
        };
        check(grads.get(vx).unwrap().data(), &x0, 0);
        check(grads.get(vw).unwrap().data(), &w0, 1);
        check(grads.get(vb).unwrap().data(), &b0, 2);
    }

    #[test]
    fn upsample_and_pool_shapes_and_gradients() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap());
        let up = g.upsample_nearest(x, 2).unwrap();
        assert_eq!(g.shape(up), vec![1, 1, 4, 4]);
        let s = g.sum_all(up);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[4.0; 4]);

        let pooled = g.max_pool2(x).unwrap();
        assert_eq!(g.value(pooled).data(), &[4.0]);
        let grads = g.backward(pooled);
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn conv2d_rejects_mismatched_channels() {
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.leaf(Tensor::zeros(&[3, 1, 3, 3]));
        let b = g.leaf(Tensor::zeros(&[3]));
        assert!(g.conv2d(x, w, b, ConvGeometry::same(3, 1, 1)).is_err());
    }
}
