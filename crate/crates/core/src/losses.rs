//! Loss terms for both players.
//!
//! Image distances are per-element means (L1) and root-mean-squares (feature
//! L2) so that the default weights keep their balance at any resolution.
//! Detector-side terms consume raw head tensors (see [`crate::detector`]).

use autograd::{sigmoid, Activation, Float, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::detector::{AnchorState, ScaleTargets, TargetMap, FIELDS, NUM_CLASSES, OBJ};
use crate::marker::{MarkerAnnotation, MarkerClass};
use crate::perceptual::PerceptualExtractor;
use crate::{Error, Result};

/// Upper clamp on detection confidence inside `log(1 - p)`.
pub const ADV_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub rec: f64,
    pub per: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 10.0,
            per: 1.0,
            adv: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rec", self.rec), ("per", self.per), ("adv", self.adv)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rec: f64,
    pub per: f64,
    pub adv: f64,
    pub det_cls: f64,
    pub det_loc: f64,
    pub total_gen: f64,
    pub total_disc: f64,
}

impl LossReport {
    /// Fills in both totals; non-finite parts are an error naming them.
    pub fn new(
        rec: f64,
        per: f64,
        adv: f64,
        det_cls: f64,
        det_loc: f64,
        weights: &LossWeights,
    ) -> Result<Self> {
        let mut r = Self {
            rec,
            per,
            adv,
            det_cls,
            det_loc,
            ..Self::default()
        };
        let (g, d) = total_losses(&r, weights)?;
        r.total_gen = g;
        r.total_disc = d;
        Ok(r)
    }

    pub fn non_finite_fields(&self) -> Vec<&'static str> {
        [
            ("rec", self.rec),
            ("per", self.per),
            ("adv", self.adv),
            ("det_cls", self.det_cls),
            ("det_loc", self.det_loc),
            ("total_gen", self.total_gen),
            ("total_disc", self.total_disc),
        ]
        .into_iter()
        .filter(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
        .collect()
    }
}

/// `(total_gen, total_disc)` from the parts of `report`.
pub fn total_losses(report: &LossReport, w: &LossWeights) -> Result<(f64, f64)> {
    let parts = [
        ("rec", report.rec),
        ("per", report.per),
        ("adv", report.adv),
        ("det_cls", report.det_cls),
        ("det_loc", report.det_loc),
    ];
    let bad: Vec<String> = parts
        .iter()
        .filter(|(_, v)| !v.is_finite())
        .map(|(n, v)| format!("{n}={v}"))
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonFinite {
            step: 0,
            report: bad.join(", "),
        });
    }
    Ok((
        w.rec * report.rec + w.per * report.per + w.adv * report.adv,
        report.det_cls + report.det_loc,
    ))
}

/// `mean|I* − Îg| + mean|I* − Î|`.
pub fn rec_loss<T: Float>(g: &Graph<T>, clean: Var, inpainted: Var, composed: Var) -> Result<Var> {
    let a = g.mean_abs_diff(clean, inpainted)?;
    let b = g.mean_abs_diff(clean, composed)?;
    Ok(g.add(a, b)?)
}

/// `Σ_l w_l (rms(φ_l(I*) − φ_l(Îg)) + rms(φ_l(I*) − φ_l(Î)))`.
pub fn perceptual_loss<T: Float>(
    g: &Graph<T>,
    phi: &PerceptualExtractor<T>,
    clean: Var,
    inpainted: Var,
    composed: Var,
) -> Result<Var> {
    let fc = phi.features(g, clean)?;
    let fg = phi.features(g, inpainted)?;
    let fi = phi.features(g, composed)?;
    let mut total: Option<Var> = None;
    for (l, &w) in phi.layer_weights().iter().enumerate() {
        let a = g.rms_diff(fc[l], fg[l])?;
        let b = g.rms_diff(fc[l], fi[l])?;
        let term = g.scale(g.add(a, b)?, T::lit(w));
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one layer"))
}

fn add_all<T: Float>(g: &Graph<T>, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let mut acc = it
        .next()
        .unwrap_or_else(|| g.constant(Tensor::scalar(T::zero())));
    for t in it {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Per-anchor marker confidence `σ(obj)·max_k σ(cls_k)` with its argmax class.
fn confidence<T: Float>(raw: &[T], idx: impl Fn(usize) -> usize) -> (T, usize) {
    let obj = sigmoid(raw[idx(OBJ)]);
    let mut best = 0;
    for k in 1..NUM_CLASSES {
        if raw[idx(OBJ + 1 + k)] > raw[idx(OBJ + 1 + best)] {
            best = k;
        }
    }
    (obj * sigmoid(raw[idx(OBJ + 1 + best)]), best)
}

fn anchors_in(shape: &[usize]) -> Result<usize> {
    if shape.len() != 4 || !shape[1].is_multiple_of(FIELDS) {
        return Err(Error::Shape(format!("raw detector head {shape:?}")));
    }
    Ok(shape[0] * shape[1] / FIELDS * shape[2] * shape[3])
}

/// `−Σ log(1 − min(p, 1−ε))` over every anchor of one raw head tensor, scaled by `k`.
fn adv_term<T: Float>(g: &Graph<T>, raw: Var, k: f64) -> Result<Var> {
    let shape = g.shape(raw);
    anchors_in(&shape)?;
    let (n, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let a_count = ch / FIELDS;
    let plane = h * w;
    let cap = T::lit(1.0 - ADV_EPS);
    let walk =
        move |data: &[T],
              mut visit: Box<dyn FnMut(usize, T, usize, &dyn Fn(usize) -> usize) + '_>| {
            for b in 0..n {
                for a in 0..a_count {
                    for p in 0..plane {
                        let base = (b * ch + a * FIELDS) * plane + p;
                        let idx = move |f: usize| base + f * plane;
                        let (conf, best) = confidence(data, idx);
                        visit(base, conf, best, &idx);
                    }
                }
            }
        };
    let value = {
        let v = g.value(raw);
        let mut s = T::zero();
        walk(
            v.data(),
            Box::new(|_, p, _, _| {
                s -= (T::one() - p.min(cap)).ln();
            }),
        );
        s * T::lit(k)
    };
    Ok(g.custom(&[raw], Tensor::scalar(value), move |args| {
        let x = args.inputs[0];
        let scale = args.grad.item() * T::lit(k);
        let mut grad = Tensor::zeros(x.shape());
        let gd = grad.data_mut();
        walk(
            x.data(),
            Box::new(|_, p, best, idx| {
                if p >= cap {
                    return;
                }
                let dp = scale / (T::one() - p);
                let so = sigmoid(x.data()[idx(OBJ)]);
                let sc = sigmoid(x.data()[idx(OBJ + 1 + best)]);
                gd[idx(OBJ)] += dp * so * (T::one() - so) * sc;
                gd[idx(OBJ + 1 + best)] += dp * so * sc * (T::one() - sc);
            }),
        );
        vec![Some(grad)]
    }))
}

/// Adversarial term: mean of `−log(1 − p)` over every anchor of both images.
///
/// `raws_inpainted` and `raws_composed` are the per-scale raw heads of the
/// detector applied to Îg and Î with gradients flowing to the generator.
pub fn adv_loss<T: Float>(
    g: &Graph<T>,
    raws_inpainted: &[Var],
    raws_composed: &[Var],
) -> Result<Var> {
    let all: Vec<Var> = raws_inpainted
        .iter()
        .chain(raws_composed)
        .copied()
        .collect();
    let mut count = 0;
    for &r in &all {
        count += anchors_in(&g.shape(r))?;
    }
    let k = 1.0 / count.max(1) as f64;
    let terms = all
        .iter()
        .map(|&r| adv_term(g, r, k))
        .collect::<Result<Vec<_>>>()?;
    add_all(g, terms)
}

/// Numerically stable binary cross-entropy on a logit, and its derivative.
fn bce_logit<T: Float>(z: T, y: T) -> (T, T) {
    let loss = z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln();
    (loss, sigmoid(z) - y)
}

fn smooth_l1<T: Float>(d: T) -> (T, T) {
    if d.abs() < T::one() {
        (T::lit(0.5) * d * d, d)
    } else {
        (d.abs() - T::lit(0.5), d.signum())
    }
}

#[derive(Clone, Copy)]
enum DetPart {
    /// Objectness BCE scaled by the first weight, class BCE by the second.
    Cls(f64, f64),
    Loc(f64),
}

/// One scale of one role: `targets[b]` supervises batch item `b` of `raw`.
fn det_term<T: Float>(
    g: &Graph<T>,
    raw: Var,
    targets: Vec<ScaleTargets>,
    part: DetPart,
) -> Result<Var> {
    let shape = g.shape(raw);
    let (n, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let a_count = ch / FIELDS;
    if targets.len() != n
        || targets
            .iter()
            .any(|t| t.grid != (h, w) || t.num_anchors != a_count)
    {
        return Err(Error::Shape(format!(
            "targets for {} items do not match raw head {shape:?}",
            targets.len()
        )));
    }
    let plane = h * w;
    // Accumulates the weighted loss, and the gradient into `grad` if given.
    let eval = move |x: &[T], mut grad: Option<&mut [T]>, upstream: T| -> T {
        let mut total = T::zero();
        for (b, t) in targets.iter().enumerate() {
            for r in 0..h {
                for c in 0..w {
                    for a in 0..a_count {
                        let s = t.slot(r, c, a);
                        let base = (b * ch + a * FIELDS) * plane + r * w + c;
                        let at = |f: usize| base + f * plane;
                        match part {
                            DetPart::Cls(w_obj, w_cls) => {
                                let y = match t.state[s] {
                                    AnchorState::Ignore => continue,
                                    AnchorState::Positive => T::one(),
                                    AnchorState::Negative => T::zero(),
                                };
                                let (l, d) = bce_logit(x[at(OBJ)], y);
                                total += l * T::lit(w_obj);
                                if let Some(gd) = grad.as_deref_mut() {
                                    gd[at(OBJ)] += d * T::lit(w_obj) * upstream;
                                }
                                if let Some(class) = t.class[s].filter(|_| y == T::one()) {
                                    for k in 0..NUM_CLASSES {
                                        let yk = if k == class.index() {
                                            T::one()
                                        } else {
                                            T::zero()
                                        };
                                        let (l, d) = bce_logit(x[at(OBJ + 1 + k)], yk);
                                        total += l * T::lit(w_cls);
                                        if let Some(gd) = grad.as_deref_mut() {
                                            gd[at(OBJ + 1 + k)] += d * T::lit(w_cls) * upstream;
                                        }
                                    }
                                }
                            }
                            DetPart::Loc(w_loc) => {
                                if t.state[s] != AnchorState::Positive {
                                    continue;
                                }
                                for f in 0..4 {
                                    let target = T::lit(t.boxes[s][f] as f64);
                                    let (l, d) = smooth_l1(x[at(f)] - target);
                                    total += l * T::lit(w_loc);
                                    if let Some(gd) = grad.as_deref_mut() {
                                        gd[at(f)] += d * T::lit(w_loc) * upstream;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        total
    };
    let value = eval(g.value(raw).data(), None, T::one());
    Ok(g.custom(&[raw], Tensor::scalar(value), move |args| {
        let x = args.inputs[0];
        let mut grad = Tensor::zeros(x.shape());
        eval(x.data(), Some(grad.data_mut()), args.grad.item());
        vec![Some(grad)]
    }))
}

/// Detection loss of one image role over a batch: `(det_cls, det_loc)`.
///
/// `det_cls` is the objectness BCE averaged over non-ignored anchors plus the
/// class BCE summed over classes and averaged over positive anchors;
/// `det_loc` is smooth-L1 on the box encoding averaged over positive
/// anchors × 4. Terms without any contributing anchor are zero.
pub fn det_loss<T: Float>(g: &Graph<T>, raws: &[Var], targets: &[TargetMap]) -> Result<(Var, Var)> {
    let scales = raws.len();
    if targets.iter().any(|t| t.scales.len() != scales) {
        return Err(Error::Shape(format!("targets do not have {scales} scales")));
    }
    let mut n_obj = 0usize;
    let mut n_pos = 0usize;
    for t in targets {
        for s in &t.scales {
            n_obj += s
                .state
                .iter()
                .filter(|&&x| x != AnchorState::Ignore)
                .count();
            n_pos += s.positives();
        }
    }
    let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let mut cls = Vec::new();
    let mut loc = Vec::new();
    for (si, &raw) in raws.iter().enumerate() {
        let per_item: Vec<ScaleTargets> = targets.iter().map(|t| t.scales[si].clone()).collect();
        cls.push(det_term(
            g,
            raw,
            per_item.clone(),
            DetPart::Cls(inv(n_obj), inv(n_pos)),
        )?);
        loc.push(det_term(g, raw, per_item, DetPart::Loc(inv(4 * n_pos)))?);
    }
    Ok((add_all(g, cls)?, add_all(g, loc)?))
}

/// Which image the detector is looking at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Corrupted input I: markers are real.
    Corrupted,
    /// Clean target I*: nothing to find.
    Clean,
    /// Raw inpainting Îg: residual markers are fakes.
    Inpainted,
    /// Composition Î: residual markers are fakes.
    Composed,
}

impl Role {
    pub const ALL: [Role; 4] = [
        Role::Corrupted,
        Role::Clean,
        Role::Inpainted,
        Role::Composed,
    ];

    /// Ground-truth boxes relabelled for this role.
    pub fn annotations(self, boxes: &[MarkerAnnotation]) -> Vec<MarkerAnnotation> {
        let class = match self {
            Role::Clean => return vec![],
            Role::Corrupted => MarkerClass::Marker,
            Role::Inpainted | Role::Composed => MarkerClass::FakeMarker,
        };
        boxes
            .iter()
            .map(|b| MarkerAnnotation {
                bbox: b.bbox,
                class,
            })
            .collect()
    }
}

/// Hinge loss for the patch discriminator: `mean relu(1 − D(real)) + mean relu(1 + D(fake))`.
pub fn hinge_disc_loss<T: Float>(g: &Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let r = g.activation(g.affine(real, -T::one(), T::one()), Activation::Relu);
    let f = g.activation(g.affine(fake, T::one(), T::one()), Activation::Relu);
    Ok(g.add(g.mean_all(r), g.mean_all(f))?)
}

/// Generator side of the hinge game: `mean relu(1 − D(fake))`, which stays ≥ 0.
pub fn hinge_gen_loss<T: Float>(g: &Graph<T>, fake: Var) -> Var {
    let f = g.activation(g.affine(fake, -T::one(), T::one()), Activation::Relu);
    g.mean_all(f)
}
