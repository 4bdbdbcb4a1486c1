//! Object-aware discriminator: a dense anchor-based marker detector, plus the
//! patch-score discriminator used by the non-detector ablation.
//!
//! Raw head tensors are N×(A·F)×Hs×Ws with `F = 5 + K` fields per anchor in
//! the order `[dx, dy, dw, dh, objectness, class_0 .. class_K)`. Offsets are
//! linear, objectness and class channels are logits.

use autograd::{sigmoid, Activation, ConvGeometry, Float, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::marker::{BBox, MarkerAnnotation, MarkerClass};
use crate::nn::{Conv2d, ParamStore};
use crate::{seed, Error, Result};

pub const NUM_CLASSES: usize = 2;
/// Values per anchor in a raw head tensor.
pub const FIELDS: usize = 5 + NUM_CLASSES;
pub const OBJ: usize = 4;

/// Strides and anchor sizes `(w, h)` of each detection scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub strides: Vec<usize>,
    pub anchors: Vec<Vec<(f32, f32)>>,
}

impl AnchorConfig {
    /// Two scales (strides 8 and 16), three square anchors each, sized for
    /// the default marker policy and scaled with the image side.
    pub fn for_image_side(side: usize) -> Self {
        let s = side as f32 / 64.0;
        let scaled = |v: &[f32]| v.iter().map(|&a| (a * s, a * s)).collect();
        Self {
            strides: vec![8, 16],
            anchors: vec![scaled(&[6.0, 11.0, 16.0]), scaled(&[22.0, 32.0, 48.0])],
        }
    }

    pub fn validate(&self, image_size: (usize, usize)) -> Result<()> {
        if self.strides.is_empty() || self.strides.len() != self.anchors.len() {
            return Err(Error::Config(format!(
                "{} strides but {} anchor sets",
                self.strides.len(),
                self.anchors.len()
            )));
        }
        for (&s, set) in self.strides.iter().zip(&self.anchors) {
            if s == 0 || !image_size.0.is_multiple_of(s) || !image_size.1.is_multiple_of(s) {
                return Err(Error::Shape(format!(
                    "stride {s} does not divide image size {}x{}",
                    image_size.0, image_size.1
                )));
            }
            if set.is_empty() || set.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
                return Err(Error::Config(format!(
                    "stride {s} has invalid anchors {set:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Anchor `(w, h)` placed at the centre of grid cell `(row, col)`.
pub fn anchor_box(row: usize, col: usize, stride: usize, anchor: (f32, f32)) -> BBox {
    let s = stride as f32;
    BBox::from_center(
        (col as f32 + 0.5) * s,
        (row as f32 + 0.5) * s,
        anchor.0,
        anchor.1,
    )
}

/// Box regression target relative to cell `(row, col)` and an anchor.
pub fn encode_box(b: &BBox, row: usize, col: usize, stride: usize, anchor: (f32, f32)) -> [f32; 4] {
    let (cx, cy) = b.center();
    let s = stride as f32;
    [
        cx / s - (col as f32 + 0.5),
        cy / s - (row as f32 + 0.5),
        (b.w / anchor.0).ln(),
        (b.h / anchor.1).ln(),
    ]
}

/// Inverse of [`encode_box`].
pub fn decode_box(t: [f32; 4], row: usize, col: usize, stride: usize, anchor: (f32, f32)) -> BBox {
    let s = stride as f32;
    BBox::from_center(
        (col as f32 + 0.5 + t[0]) * s,
        (row as f32 + 0.5 + t[1]) * s,
        anchor.0 * t[2].exp(),
        anchor.1 * t[3].exp(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Channels of each stride-2 backbone stage; stage `i` has stride `2^(i+1)`.
    pub widths: Vec<usize>,
    pub anchors: AnchorConfig,
    pub seed: u64,
}

impl DetectorConfig {
    pub fn for_image_side(side: usize) -> Self {
        Self {
            widths: vec![16, 32, 64, 64],
            anchors: AnchorConfig::for_image_side(side),
            seed: 0,
        }
    }
}

/// Probabilities and box fields of one scale for a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleOutput {
    pub stride: usize,
    pub grid: (usize, usize),
    pub anchors: Vec<(f32, f32)>,
    /// `(row·W + col)·A + a` major, `1 + K` values each: objectness then classes.
    pub cls: Vec<f32>,
    /// Same indexing, 4 values each: `dx, dy, log w-scale, log h-scale`.
    pub loc: Vec<f32>,
}

impl ScaleOutput {
    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn slot(&self, row: usize, col: usize, a: usize) -> usize {
        (row * self.grid.1 + col) * self.anchors.len() + a
    }
}

/// Per-scale detector output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    pub scales: Vec<ScaleOutput>,
}

impl DetectorOutput {
    /// Converts raw head tensors (one per scale) for batch item `index`.
    pub fn from_raw<T: Float>(
        raws: &[Tensor<T>],
        index: usize,
        anchors: &AnchorConfig,
    ) -> Result<Self> {
        let mut scales = Vec::with_capacity(raws.len());
        for ((raw, &stride), set) in raws.iter().zip(&anchors.strides).zip(&anchors.anchors) {
            let (n, ch, h, w) = raw.dims4()?;
            let a_count = set.len();
            if index >= n || ch != a_count * FIELDS {
                return Err(Error::Shape(format!(
                    "raw head {:?} does not match {a_count} anchors (item {index})",
                    raw.shape()
                )));
            }
            let mut cls = Vec::with_capacity(h * w * a_count * (1 + NUM_CLASSES));
            let mut loc = Vec::with_capacity(h * w * a_count * 4);
            let at = |a: usize, f: usize, r: usize, c: usize| {
                raw.data()[((index * ch + a * FIELDS + f) * h + r) * w + c].as_f64() as f32
            };
            for r in 0..h {
                for c in 0..w {
                    for a in 0..a_count {
                        for f in 0..4 {
                            loc.push(at(a, f, r, c));
                        }
                        for f in OBJ..FIELDS {
                            cls.push(sigmoid(at(a, f, r, c)));
                        }
                    }
                }
            }
            scales.push(ScaleOutput {
                stride,
                grid: (h, w),
                anchors: set.clone(),
                cls,
                loc,
            });
        }
        Ok(Self { scales })
    }
}

#[derive(Debug, Clone)]
pub struct Detector<T> {
    config: DetectorConfig,
    params: ParamStore<T>,
    stages: Vec<Conv2d>,
    /// `(stage index, head)` per anchor scale.
    heads: Vec<(usize, Conv2d)>,
}

const DET_ACT: Activation = Activation::LeakyRelu(0.1);

impl<T: Float> Detector<T> {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) {
            return Err(Error::Config(
                "detector widths must be nonempty and positive".into(),
            ));
        }
        let mut params = ParamStore::new();
        let mut rng = seed::rng(&[config.seed, 0xDE7]);
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            stages.push(Conv2d::new(
                &mut params,
                &format!("det.stage{}", i + 1),
                cin,
                w,
                ConvGeometry::same(3, 2, 1),
                2f64.sqrt(),
                &mut rng,
            ));
            cin = w;
        }
        let mut heads = Vec::new();
        for (&stride, set) in config.anchors.strides.iter().zip(&config.anchors.anchors) {
            let stage = (0..stages.len())
                .find(|&i| 1usize << (i + 1) == stride)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "stride {stride} is not produced by a {}-stage backbone",
                        stages.len()
                    ))
                })?;
            let head = Conv2d::new(
                &mut params,
                &format!("det.head_s{stride}"),
                config.widths[stage],
                set.len() * FIELDS,
                ConvGeometry::same(1, 1, 1),
                0.1,
                &mut rng,
            );
            // start with low objectness so untrained detectors report few markers
            for a in 0..set.len() {
                params.get_mut(head.bias).data_mut()[a * FIELDS + OBJ] = T::lit(-4.0);
            }
            heads.push((stage, head));
        }
        if config.anchors.strides.len() != config.anchors.anchors.len() {
            return Err(Error::Config(
                "anchor strides and sets differ in length".into(),
            ));
        }
        Ok(Self {
            config,
            params,
            stages,
            heads,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn anchors(&self) -> &AnchorConfig {
        &self.config.anchors
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Raw head tensors, one per anchor scale.
    pub fn forward_graph(&self, g: &Graph<T>, params: &[Var], image: Var) -> Result<Vec<Var>> {
        let (_, c, h, w) = g.value(image).dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!(
                "detector expects 3 channels, got {c}"
            )));
        }
        let largest = *self.config.anchors.strides.iter().max().expect("validated");
        if h % largest != 0 || w % largest != 0 {
            return Err(Error::Shape(format!(
                "detector input {h}x{w} must be divisible by the largest stride {largest}"
            )));
        }
        let mut x = g.affine(image, T::lit(2.0), T::lit(-1.0));
        let mut features = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let y = stage.forward(g, params, x)?;
            x = g.activation(y, DET_ACT);
            features.push(x);
        }
        self.heads
            .iter()
            .map(|(stage, head)| head.forward(g, params, features[*stage]))
            .collect()
    }

    /// Gradient-free forward pass over an N×3×H×W batch.
    pub fn forward_raw(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let g = Graph::new();
        let params = self.params.bind(&g, false);
        let x = g.constant(images.clone());
        let raws = self.forward_graph(&g, &params, x)?;
        let out = raws.iter().map(|&v| g.value(v).clone()).collect();
        Ok(out)
    }

    /// Detector output for every image of the batch.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Vec<DetectorOutput>> {
        let raws = self.forward_raw(images)?;
        (0..images.shape()[0])
            .map(|i| DetectorOutput::from_raw(&raws, i, &self.config.anchors))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorState {
    Negative,
    Positive,
    Ignore,
}

/// Supervision for one scale; slots indexed like [`ScaleOutput::slot`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTargets {
    pub stride: usize,
    pub grid: (usize, usize),
    pub num_anchors: usize,
    pub state: Vec<AnchorState>,
    pub class: Vec<Option<MarkerClass>>,
    pub boxes: Vec<[f32; 4]>,
}

impl ScaleTargets {
    pub fn slot(&self, row: usize, col: usize, a: usize) -> usize {
        (row * self.grid.1 + col) * self.num_anchors + a
    }

    pub fn positives(&self) -> usize {
        self.state
            .iter()
            .filter(|s| **s == AnchorState::Positive)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMap {
    pub scales: Vec<ScaleTargets>,
}

impl TargetMap {
    pub fn positives(&self) -> usize {
        self.scales.iter().map(|s| s.positives()).sum()
    }
}

/// IoU above which a non-assigned anchor is excluded from the objectness loss.
pub const IGNORE_IOU: f32 = 0.5;

/// Center-cell / best-anchor assignment.
///
/// For every box and scale, the cell containing the box centre takes the
/// anchor with the highest IoU (lowest index on ties) as positive; a later
/// box overwrites an earlier one on the same slot. Remaining slots whose
/// anchor overlaps any box with IoU > 0.5 are ignored; the rest are negative.
pub fn assign_targets(
    boxes: &[MarkerAnnotation],
    config: &AnchorConfig,
    image_size: (usize, usize),
) -> Result<TargetMap> {
    config.validate(image_size)?;
    let mut scales = Vec::with_capacity(config.strides.len());
    for (&stride, set) in config.strides.iter().zip(&config.anchors) {
        let grid = (image_size.0 / stride, image_size.1 / stride);
        let a_count = set.len();
        let slots = grid.0 * grid.1 * a_count;
        let mut t = ScaleTargets {
            stride,
            grid,
            num_anchors: a_count,
            state: vec![AnchorState::Negative; slots],
            class: vec![None; slots],
            boxes: vec![[0.0; 4]; slots],
        };
        if !boxes.is_empty() {
            for row in 0..grid.0 {
                for col in 0..grid.1 {
                    for (a, &anchor) in set.iter().enumerate() {
                        let ab = anchor_box(row, col, stride, anchor);
                        if boxes.iter().any(|b| ab.iou(&b.bbox) > IGNORE_IOU) {
                            let s = t.slot(row, col, a);
                            t.state[s] = AnchorState::Ignore;
                        }
                    }
                }
            }
        }
        for ann in boxes {
            let (cx, cy) = ann.bbox.center();
            let col = ((cx / stride as f32).floor().max(0.0) as usize).min(grid.1 - 1);
            let row = ((cy / stride as f32).floor().max(0.0) as usize).min(grid.0 - 1);
            let mut best = 0;
            let mut best_iou = f32::NEG_INFINITY;
            for (a, &anchor) in set.iter().enumerate() {
                let iou = anchor_box(row, col, stride, anchor).iou(&ann.bbox);
                if iou > best_iou {
                    best = a;
                    best_iou = iou;
                }
            }
            let s = t.slot(row, col, best);
            t.state[s] = AnchorState::Positive;
            t.class[s] = Some(ann.class);
            t.boxes[s] = encode_box(&ann.bbox, row, col, stride, set[best]);
        }
        scales.push(t);
    }
    Ok(TargetMap { scales })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: MarkerClass,
    pub confidence: f32,
}

/// Thresholds, decodes and suppresses detections.
///
/// Confidence is objectness × best class score; suppression is greedy per
/// class in descending confidence order.
pub fn decode_detections(
    out: &DetectorOutput,
    image_size: (usize, usize),
    conf_threshold: f32,
    nms_iou: f32,
) -> Result<Vec<Detection>> {
    if !(0.0..1.0).contains(&conf_threshold) || !(0.0..1.0).contains(&nms_iou) || nms_iou == 0.0 {
        return Err(Error::Config(format!(
            "thresholds must lie in (0, 1): conf {conf_threshold}, nms {nms_iou}"
        )));
    }
    let mut candidates = Vec::new();
    for scale in &out.scales {
        for row in 0..scale.grid.0 {
            for col in 0..scale.grid.1 {
                for (a, &anchor) in scale.anchors.iter().enumerate() {
                    let s = scale.slot(row, col, a);
                    let probs = &scale.cls[s * (1 + NUM_CLASSES)..][..1 + NUM_CLASSES];
                    let (k, &score) =
                        probs[1..]
                            .iter()
                            .enumerate()
                            .fold((0, &f32::NEG_INFINITY), |best, cur| {
                                if cur.1 > best.1 {
                                    cur
                                } else {
                                    best
                                }
                            });
                    let confidence = probs[0] * score;
                    if confidence < conf_threshold || confidence <= 0.0 {
                        continue;
                    }
                    let t: [f32; 4] = scale.loc[s * 4..][..4].try_into().expect("4 fields");
                    let bbox = decode_box(t, row, col, scale.stride, anchor)
                        .clip(image_size.0, image_size.1);
                    candidates.push(Detection {
                        bbox,
                        class: MarkerClass::from_index(k).expect("class index"),
                        confidence,
                    });
                }
            }
        }
    }
    Ok(non_max_suppression(candidates, nms_iou))
}

/// Greedy per-class NMS; input order breaks confidence ties.
pub fn non_max_suppression(mut dets: Vec<Detection>, iou_threshold: f32) -> Vec<Detection> {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && k.bbox.iou(&d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Patch-score discriminator: a stack of stride-2 convolutions ending in a
/// single-channel score grid.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator<T> {
    params: ParamStore<T>,
    layers: Vec<Conv2d>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    /// Hidden widths; one more stride-2 layer maps to the score channel.
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            seed: 0,
        }
    }
}

impl<T: Float> PatchDiscriminator<T> {
    pub fn new(config: &PatchConfig) -> Self {
        let mut params = ParamStore::new();
        let mut rng = seed::rng(&[config.seed, 0x9A7]);
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, &w) in config.widths.iter().chain(std::iter::once(&1)).enumerate() {
            layers.push(Conv2d::new(
                &mut params,
                &format!("patch.conv{}", i + 1),
                cin,
                w,
                ConvGeometry::same(3, 2, 1),
                2f64.sqrt(),
                &mut rng,
            ));
            cin = w;
        }
        Self { params, layers }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// N×1×h×w score grid.
    pub fn forward_graph(&self, g: &Graph<T>, params: &[Var], image: Var) -> Result<Var> {
        let mut x = g.affine(image, T::lit(2.0), T::lit(-1.0));
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, params, x)?;
            if i + 1 < self.layers.len() {
                x = g.activation(x, Activation::LeakyRelu(0.2));
            }
        }
        Ok(x)
    }

    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let params = self.params.bind(&g, false);
        let x = g.constant(images.clone());
        let y = self.forward_graph(&g, &params, x)?;
        let out = g.value(y).clone();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ann(x: f32, y: f32, w: f32, h: f32) -> MarkerAnnotation {
        MarkerAnnotation {
            bbox: BBox::new(x, y, w, h),
            class: MarkerClass::Marker,
        }
    }

    fn rand_images(seed: u64, n: usize, side: usize) -> Tensor<f32> {
        let mut rng = seed::rng(&[seed]);
        Tensor::from_vec(
            &[n, 3, side, side],
            (0..n * 3 * side * side).map(|_| rng.gen()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn output_grids_follow_strides() {
        let det = Detector::<f32>::new(DetectorConfig::for_image_side(64)).unwrap();
        let outs = det.forward(&rand_images(1, 2, 64)).unwrap();
        assert_eq!(outs.len(), 2);
        let s = &outs[0].scales;
        assert_eq!(s[0].grid, (8, 8));
        assert_eq!(s[1].grid, (4, 4));
        assert_eq!(s[0].cls.len(), 8 * 8 * 3 * 3);
        assert_eq!(s[1].cls.len(), 4 * 4 * 3 * 3);
        for o in &outs {
            for sc in &o.scales {
                assert!(sc.cls.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
        assert_eq!(det.forward(&rand_images(1, 2, 64)).unwrap(), outs);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let det = Detector::<f32>::new(DetectorConfig::for_image_side(64)).unwrap();
        assert!(det.forward(&rand_images(1, 1, 40)).is_err());
    }

    /// Input pixel interval `[lo, hi]` seen by output index `o` after stacking
    /// 3×3 / stride-2 / pad-1 convolutions.
    fn receptive_interval(o: i64, layers: usize) -> (i64, i64) {
        let (mut lo, mut hi) = (o, o);
        for _ in 0..layers {
            lo = 2 * lo - 1;
            hi = 2 * hi + 1;
        }
        (lo, hi)
    }

    #[test]
    fn pixel_perturbation_stays_inside_receptive_fields() {
        let cfg = DetectorConfig {
            widths: vec![4, 4],
            anchors: AnchorConfig {
                strides: vec![2, 4],
                anchors: vec![vec![(2.0, 2.0)], vec![(4.0, 4.0)]],
            },
            seed: 5,
        };
        let det = Detector::<f64>::new(cfg).unwrap();
        let side = 16;
        let base = rand_images(2, 1, side).cast::<f64>();
        let ref_raw = det.forward_raw(&base).unwrap();
        for (pr, pc) in [(0usize, 0usize), (7, 9), (15, 3), (10, 15)] {
            let mut x = base.clone();
            x.data_mut()[pr * side + pc] += 0.5;
            let raw = det.forward_raw(&x).unwrap();
            for (scale, layers) in [(0usize, 1usize), (1, 2)] {
                let (_, ch, h, w) = raw[scale].dims4().unwrap();
                for r in 0..h {
                    for c in 0..w {
                        let (r0, r1) = receptive_interval(r as i64, layers);
                        let (c0, c1) = receptive_interval(c as i64, layers);
                        let covers =
                            (r0..=r1).contains(&(pr as i64)) && (c0..=c1).contains(&(pc as i64));
                        let changed = (0..ch).any(|k| {
                            let i = (k * h + r) * w + c;
                            raw[scale].data()[i] != ref_raw[scale].data()[i]
                        });
                        if !covers {
                            assert!(
                                !changed,
                                "scale {scale} cell ({r},{c}) changed for pixel ({pr},{pc})"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn empty_boxes_give_all_negative_targets() {
        let cfg = AnchorConfig::for_image_side(64);
        let t = assign_targets(&[], &cfg, (64, 64)).unwrap();
        for s in &t.scales {
            assert!(s.state.iter().all(|&x| x == AnchorState::Negative));
        }
    }

    #[test]
    fn centered_box_gets_one_positive_per_scale() {
        let cfg = AnchorConfig::for_image_side(64);
        let t = assign_targets(&[ann(24.0, 24.0, 16.0, 16.0)], &cfg, (64, 64)).unwrap();
        for s in &t.scales {
            assert_eq!(s.positives(), 1);
            let cell = 32 / s.stride;
            let pos = (0..s.num_anchors)
                .find(|&a| s.state[s.slot(cell, cell, a)] == AnchorState::Positive);
            assert!(pos.is_some(), "stride {}", s.stride);
        }
        // centre 32 sits on the corner of cell 4, half a cell before its centre
        assert_eq!(
            t.scales[0].state[t.scales[0].slot(4, 4, 2)],
            AnchorState::Positive
        );
        assert_eq!(
            t.scales[0].boxes[t.scales[0].slot(4, 4, 2)],
            [-0.5, -0.5, 0.0, 0.0]
        );
    }

    #[test]
    fn decode_inverts_encode() {
        let b = BBox::new(13.0, 7.0, 9.0, 21.0);
        let t = encode_box(&b, 1, 2, 8, (11.0, 11.0));
        let d = decode_box(t, 1, 2, 8, (11.0, 11.0));
        assert!(d.iou(&b) > 0.999);
    }

    fn hand_output(obj: f32, class_score: f32) -> DetectorOutput {
        let anchors = vec![(16.0, 16.0)];
        let mut cls = vec![0.0; 4 * 4 * 3];
        let loc = vec![0.0; 4 * 4 * 4];
        let s = (1 * 4 + 2) * 1;
        cls[s * 3] = obj;
        cls[s * 3 + 1] = class_score;
        cls[s * 3 + 2] = 0.1;
        DetectorOutput {
            scales: vec![ScaleOutput {
                stride: 16,
                grid: (4, 4),
                anchors,
                cls,
                loc,
            }],
        }
    }

    #[test]
    fn zero_objectness_yields_no_detections() {
        let dets = decode_detections(&hand_output(0.0, 1.0), (64, 64), 0.25, 0.5).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn single_cell_decodes_to_anchor_box() {
        let dets = decode_detections(&hand_output(0.9, 0.8), (64, 64), 0.25, 0.5).unwrap();
        assert_eq!(dets.len(), 1);
        let d = dets[0];
        // cell (row 1, col 2) at stride 16 has centre (40, 24)
        assert_eq!(d.bbox, BBox::new(32.0, 16.0, 16.0, 16.0));
        assert!((d.confidence - 0.72).abs() < 1e-6);
        assert_eq!(d.class, MarkerClass::Marker);
    }

    #[test]
    fn nms_keeps_the_more_confident_duplicate() {
        let b = BBox::new(10.0, 10.0, 8.0, 8.0);
        let dets = vec![
            Detection {
                bbox: b,
                class: MarkerClass::Marker,
                confidence: 0.8,
            },
            Detection {
                bbox: b,
                class: MarkerClass::Marker,
                confidence: 0.9,
            },
        ];
        let kept = non_max_suppression(dets, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);
    }

    #[test]
    fn patch_discriminator_grid_and_determinism() {
        let d = PatchDiscriminator::<f32>::new(&PatchConfig::default());
        let x = rand_images(3, 2, 64);
        let s = d.forward(&x).unwrap();
        assert_eq!(s.shape(), &[2, 1, 4, 4]);
        let d2 = PatchDiscriminator::<f32>::new(&PatchConfig::default());
        assert_eq!(d2.forward(&x).unwrap(), s);
    }
}
