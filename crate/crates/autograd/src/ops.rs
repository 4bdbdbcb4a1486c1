//! Element-wise operations, activations and reductions.

use crate::{Error, Float, Graph, Result, Tensor, Var};

/// Point-wise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Elu(f64),
    Sigmoid,
}

#[inline]
pub fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl Activation {
    #[inline]
    pub fn apply<T: Float>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu(s) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(s)
                }
            }
            Activation::Elu(a) => {
                if x > T::zero() {
                    x
                } else {
                    T::lit(a) * x.exp_m1()
                }
            }
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative at input `x` with output `y = apply(x)`.
    #[inline]
    pub fn derivative<T: Float>(self, x: T, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(s) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(s)
                }
            }
            Activation::Elu(a) => {
                if x > T::zero() {
                    T::one()
                } else {
                    y + T::lit(a)
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

/// `m·g + (1−m)·i`, the blend used by [`Graph::compose`].
#[inline]
pub fn blend<T: Float>(m: T, g: T, i: T) -> T {
    m * g + (T::one() - m) * i
}

fn same_shape<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

impl<T: Float> Graph<T> {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            same_shape("add", &va, &vb)?;
            va.zip_map(&vb, |x, y| x + y)
        };
        Ok(self.custom(&[a, b], out, |args| {
            vec![Some(args.grad.clone()), Some(args.grad.clone())]
        }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            same_shape("sub", &va, &vb)?;
            va.zip_map(&vb, |x, y| x - y)
        };
        Ok(self.custom(&[a, b], out, |args| {
            vec![Some(args.grad.clone()), Some(args.grad.map(|g| -g))]
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            same_shape("mul", &va, &vb)?;
            va.zip_map(&vb, |x, y| x * y)
        };
        Ok(self.custom(&[a, b], out, |args| {
            vec![
                Some(args.grad.zip_map(args.inputs[1], |g, y| g * y)),
                Some(args.grad.zip_map(args.inputs[0], |g, x| g * x)),
            ]
        }))
    }

    /// `scale·a + shift`.
    pub fn affine(&self, a: Var, scale: T, shift: T) -> Var {
        let out = self.value(a).map(|x| scale * x + shift);
        self.custom(&[a], out, move |args| {
            vec![Some(args.grad.map(|g| g * scale))]
        })
    }

    pub fn scale(&self, a: Var, scale: T) -> Var {
        let out = self.value(a).map(|x| scale * x);
        self.custom(&[a], out, move |args| {
            vec![Some(args.grad.map(|g| g * scale))]
        })
    }

    pub fn activation(&self, x: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return x;
        }
        let out = self.value(x).map(|v| act.apply(v));
        self.custom(&[x], out, move |args| {
            let mut gx = args.grad.clone();
            for ((g, &x), &y) in gx
                .data_mut()
                .iter_mut()
                .zip(args.inputs[0].data())
                .zip(args.output.data())
            {
                *g *= act.derivative(x, y);
            }
            vec![Some(gx)]
        })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.custom(&[a], out, |args| {
            let g = args.grad.item();
            vec![Some(Tensor::full(args.inputs[0].shape(), g))]
        })
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = T::lit(self.value(a).len().max(1) as f64);
        let s = self.sum_all(a);
        self.scale(s, T::one() / n)
    }

    /// Gated activation: splits `x` (N×2C×H×W) into feature and gate halves
    /// and returns `act(feature) ⊙ sigmoid(gate)` (N×C×H×W).
    pub fn gate(&self, x: Var, act: Activation) -> Result<Var> {
        let (n, c2, h, w) = self.value(x).dims4()?;
        if c2 % 2 != 0 {
            return Err(Error::Shape {
                op: "gate",
                detail: format!("channel count {c2} is odd"),
            });
        }
        let c = c2 / 2;
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        {
            let xv = self.value(x);
            let xd = xv.data();
            let od = out.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    let f = &xd[(b * c2 + ch) * plane..][..plane];
                    let gt = &xd[(b * c2 + c + ch) * plane..][..plane];
                    let o = &mut od[(b * c + ch) * plane..][..plane];
                    for p in 0..plane {
                        o[p] = act.apply(f[p]) * sigmoid(gt[p]);
                    }
                }
            }
        }
        Ok(self.custom(&[x], out, move |args| {
            let xd = args.inputs[0].data();
            let gd = args.grad.data();
            let mut gx = Tensor::zeros(args.inputs[0].shape());
            let gxd = gx.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    let fo = (b * c2 + ch) * plane;
                    let go = (b * c2 + c + ch) * plane;
                    let oo = (b * c + ch) * plane;
                    for p in 0..plane {
                        let xf = xd[fo + p];
                        let a = act.apply(xf);
                        let s = sigmoid(xd[go + p]);
                        let g = gd[oo + p];
                        gxd[fo + p] = g * s * act.derivative(xf, a);
                        gxd[go + p] = g * a * s * (T::one() - s);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Repeats a single-channel map N×1×H×W across `c` channels.
    pub fn expand_channels(&self, m: Var, c: usize) -> Result<Var> {
        let (n, one, h, w) = self.value(m).dims4()?;
        if one != 1 {
            return Err(Error::Shape {
                op: "expand_channels",
                detail: format!("expected 1 channel, got {one}"),
            });
        }
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        {
            let mv = self.value(m);
            for b in 0..n {
                let src = &mv.data()[b * plane..][..plane];
                for ch in 0..c {
                    out.data_mut()[(b * c + ch) * plane..][..plane].copy_from_slice(src);
                }
            }
        }
        Ok(self.custom(&[m], out, move |args| {
            let mut gm = Tensor::zeros(&[n, 1, h, w]);
            for b in 0..n {
                for ch in 0..c {
                    let src = &args.grad.data()[(b * c + ch) * plane..][..plane];
                    for (d, &s) in gm.data_mut()[b * plane..][..plane].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            vec![Some(gm)]
        }))
    }

    /// `mask ⊙ generated + (1 − mask) ⊙ input` with a single-channel mask
    /// (N×1×H×W) broadcast over the image channels (N×C×H×W).
    pub fn compose(&self, mask: Var, generated: Var, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(generated).dims4()?;
        {
            let (mv, gv, iv) = (self.value(mask), self.value(generated), self.value(input));
            same_shape("compose", &gv, &iv)?;
            if mv.shape() != [n, 1, h, w] {
                return Err(Error::Shape {
                    op: "compose",
                    detail: format!("mask {:?} vs image {:?}", mv.shape(), gv.shape()),
                });
            }
        }
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        {
            let (mv, gv, iv) = (self.value(mask), self.value(generated), self.value(input));
            let od = out.data_mut();
            for b in 0..n {
                let m = &mv.data()[b * plane..][..plane];
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    for p in 0..plane {
                        od[off + p] = blend(m[p], gv.data()[off + p], iv.data()[off + p]);
                    }
                }
            }
        }
        Ok(self.custom(&[mask, generated, input], out, move |args| {
            let (md, gd, id) = (
                args.inputs[0].data(),
                args.inputs[1].data(),
                args.inputs[2].data(),
            );
            let up = args.grad.data();
            let mut gm = Tensor::zeros(&[n, 1, h, w]);
            let mut gg = Tensor::zeros(&[n, c, h, w]);
            let mut gi = Tensor::zeros(&[n, c, h, w]);
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    for p in 0..plane {
                        let m = md[b * plane + p];
                        let g = up[off + p];
                        gm.data_mut()[b * plane + p] += g * (gd[off + p] - id[off + p]);
                        gg.data_mut()[off + p] = g * m;
                        gi.data_mut()[off + p] = g * (T::one() - m);
                    }
                }
            }
            vec![Some(gm), Some(gg), Some(gi)]
        }))
    }

    /// Mean absolute difference, a scalar.
    pub fn mean_abs_diff(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            same_shape("mean_abs_diff", &va, &vb)?;
            let n = T::lit(va.len().max(1) as f64);
            let s: T = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| (x - y).abs())
                .sum();
            Tensor::scalar(s / n)
        };
        Ok(self.custom(&[a, b], out, |args| {
            let n = T::lit(args.inputs[0].len().max(1) as f64);
            let k = args.grad.item() / n;
            let ga = args.inputs[0].zip_map(args.inputs[1], |x, y| {
                let d = x - y;
                if d > T::zero() {
                    k
                } else if d < T::zero() {
                    -k
                } else {
                    T::zero()
                }
            });
            let gb = ga.map(|g| -g);
            vec![Some(ga), Some(gb)]
        }))
    }

    /// Root-mean-square difference, a scalar. Its gradient at zero is taken as zero.
    pub fn rms_diff(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            same_shape("rms_diff", &va, &vb)?;
            let n = T::lit(va.len().max(1) as f64);
            let s: T = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            Tensor::scalar((s / n).sqrt())
        };
        Ok(self.custom(&[a, b], out, |args| {
            let r = args.output.item();
            if r == T::zero() {
                return vec![None, None];
            }
            let n = T::lit(args.inputs[0].len().max(1) as f64);
            let k = args.grad.item() / (n * r);
            let ga = args.inputs[0].zip_map(args.inputs[1], |x, y| (x - y) * k);
            let gb = ga.map(|g| -g);
            vec![Some(ga), Some(gb)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(f).collect()).unwrap()
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let scale = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / scale < tol, "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn gate_gradient_matches_finite_differences() {
        let x0 = t(&[1, 4, 2, 3], |i| ((i as f64) * 0.731 + 0.2).sin() * 1.7);
        for act in [
            Activation::Elu(1.0),
            Activation::LeakyRelu(0.2),
            Activation::Sigmoid,
        ] {
            let eval = |x: &Tensor<f64>| {
                let g = Graph::new();
                let v = g.leaf(x.clone());
                let y = g.gate(v, act).unwrap();
                let w = g.constant(t(&[1, 2, 2, 3], |i| 0.3 + i as f64 * 0.1));
                let p = g.mul(y, w).unwrap();
                let s = g.sum_all(p);
                (g, v, s)
            };
            let (g, v, s) = eval(&x0);
            let grads = g.backward(s);
            let analytic = grads.get(v).unwrap().data().to_vec();
            let numeric = numeric_grad(&x0, |x| {
                let (g, _, s) = eval(x);

                g.item(s)
            });
            assert_close(&analytic, &numeric, 1e-5);
        }
    }

    #[test]
    fn compose_and_diff_losses_have_correct_gradients() {
        let m0 = t(&[2, 1, 2, 2], |i| 0.1 + 0.1 * i as f64);
        let g0 = t(&[2, 3, 2, 2], |i| ((i as f64) * 0.4).cos() * 0.5 + 0.5);
        let i0 = t(&[2, 3, 2, 2], |i| ((i as f64) * 1.3).sin() * 0.5 + 0.5);
        let target = t(&[2, 3, 2, 2], |i| 0.05 * i as f64 - 0.3);

        let build = |m: &Tensor<f64>, gg: &Tensor<f64>, ii: &Tensor<f64>| {
            let g = Graph::new();
            let (vm, vg, vi) = (g.leaf(m.clone()), g.leaf(gg.clone()), g.leaf(ii.clone()));
            let out = g.compose(vm, vg, vi).unwrap();
            let tv = g.constant(target.clone());
            let l1 = g.mean_abs_diff(out, tv).unwrap();
            let l2 = g.rms_diff(vg, tv).unwrap();
            let s = g.add(l1, l2).unwrap();
            (g, [vm, vg, vi], s)
        };
        let (g, vars, s) = build(&m0, &g0, &i0);
        let grads = g.backward(s);
        let f = |m: &Tensor<f64>, gg: &Tensor<f64>, ii: &Tensor<f64>| {
            let (g, _, s) = build(m, gg, ii);

            g.item(s)
        };
        assert_close(
            grads.get(vars[0]).unwrap().data(),
            &numeric_grad(&m0, |m| f(m, &g0, &i0)),
            1e-5,
        );
        assert_close(
            grads.get(vars[1]).unwrap().data(),
            &numeric_grad(&g0, |x| f(&m0, x, &i0)),
            1e-5,
        );
        assert_close(
            grads.get(vars[2]).unwrap().data(),
            &numeric_grad(&i0, |x| f(&m0, &g0, x)),
            1e-5,
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[3], 2.0));
        let b = g.leaf(Tensor::full(&[3], 1.0));
        let p = g.mul(a, b).unwrap();
        let d = g.detach(p);
        let s = g.sum_all(d);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_none());

        let s = g.sum_all(p);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros(&[2]));
        let b = g.leaf(Tensor::zeros(&[3]));
        assert!(g.add(a, b).is_err());
        assert!(g.mean_abs_diff(a, b).is_err());
    }
}
