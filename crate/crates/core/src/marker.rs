//! Artificial marker synthesis: rasterise doctor-style crosshairs and forks,
//! stamp them onto clean images and report tight bounding boxes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Image, Mask, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerKind {
    /// Horizontal and vertical arms through the centre.
    Crosshair,
    /// The two ±45° diagonals through the centre (an "X").
    Fork,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSpec {
    pub kind: MarkerKind,
    /// `(row, col)` in pixels.
    pub center: (usize, usize),
    /// Half-length of each arm, in pixels.
    pub arm_length: usize,
    /// Side of the square structuring element applied to the skeleton.
    pub thickness: usize,
    /// RGB value written inside the marker; greyscale images use the first entry.
    pub intensity: [f32; 3],
}

/// Axis-aligned box in pixel units; a pixel `(r, c)` covers `[c, c+1) × [r, r+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(x: f32, y: f32, w: f32, h: f32) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f32, f32) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f32 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f32 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Intersection with `[0, width] × [0, height]`.
    pub fn clip(&self, height: usize, width: usize) -> BBox {
        let x0 = self.x.clamp(0.0, width as f32);
        let y0 = self.y.clamp(0.0, height as f32);
        let x1 = (self.x + self.w).clamp(0.0, width as f32);
        let y1 = (self.y + self.h).clamp(0.0, height as f32);
        BBox::new(x0, y0, x1 - x0, y1 - y0)
    }

    /// Integer pixel ranges `(rows, cols)` touched by the box, clipped to the image.
    pub fn pixel_ranges(
        &self,
        height: usize,
        width: usize,
    ) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let c0 = self.x.floor().max(0.0) as usize;
        let r0 = self.y.floor().max(0.0) as usize;
        let c1 = ((self.x + self.w).ceil().max(0.0) as usize).min(width);
        let r1 = ((self.y + self.h).ceil().max(0.0) as usize).min(height);
        (r0.min(r1)..r1, c0.min(c1)..c1)
    }

    pub fn scaled(&self, sy: f32, sx: f32) -> BBox {
        BBox::new(self.x * sx, self.y * sy, self.w * sx, self.h * sy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerClass {
    /// A real marker drawn on an input image.
    Marker,
    /// A marker region inside a generator reconstruction.
    FakeMarker,
}

impl MarkerClass {
    pub const ALL: [MarkerClass; 2] = [MarkerClass::Marker, MarkerClass::FakeMarker];

    pub fn index(self) -> usize {
        match self {
            MarkerClass::Marker => 0,
            MarkerClass::FakeMarker => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MarkerClass::Marker => "marker",
            MarkerClass::FakeMarker => "fake_marker",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerAnnotation {
    pub bbox: BBox,
    pub class: MarkerClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityMode {
    FixedWhite,
    FixedBlack,
    /// Independent uniform draw per channel.
    Sampled,
}

/// Distribution of markers stamped on each image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerPolicy {
    /// Inclusive `(min, max)` markers per image.
    pub count_range: (usize, usize),
    /// Inclusive arm half-length range in pixels at a 64-pixel reference size.
    pub arm_range: (usize, usize),
    pub thickness_range: (usize, usize),
    pub intensity: IntensityMode,
    /// Scale `arm_range` by `min(H, W) / 64`.
    pub scale_with_image: bool,
    pub seed: u64,
}

impl Default for MarkerPolicy {
    fn default() -> Self {
        Self {
            count_range: (1, 4),
            arm_range: (3, 9),
            thickness_range: (1, 2),
            intensity: IntensityMode::FixedWhite,
            scale_with_image: true,
            seed: 0,
        }
    }
}

impl MarkerPolicy {
    pub fn with_count(mut self, min: usize, max: usize) -> Self {
        self.count_range = (min, max);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("count_range", self.count_range),
            ("arm_range", self.arm_range),
            ("thickness_range", self.thickness_range),
        ];
        for (name, (lo, hi)) in ranges {
            if lo > hi {
                return Err(Error::Config(format!(
                    "marker {name} has min {lo} > max {hi}"
                )));
            }
        }
        if self.arm_range.0 == 0 || self.thickness_range.0 == 0 {
            return Err(Error::Config(
                "marker arm and thickness ranges must start at 1 or more".into(),
            ));
        }
        Ok(())
    }

    /// Arm range in pixels for an image of the given size.
    pub fn arm_range_for(&self, size: (usize, usize)) -> (usize, usize) {
        if !self.scale_with_image {
            return self.arm_range;
        }
        let scale = size.0.min(size.1) as f64 / 64.0;
        let lo = ((self.arm_range.0 as f64 * scale).round() as usize).max(1);
        let hi = ((self.arm_range.1 as f64 * scale).round() as usize).max(lo);
        (lo, hi)
    }
}

impl MarkerSpec {
    pub fn validate(&self, canvas: (usize, usize)) -> Result<()> {
        if canvas.0 == 0 || canvas.1 == 0 {
            return Err(Error::InvalidMarker(format!("empty canvas {canvas:?}")));
        }
        if self.center.0 >= canvas.0 || self.center.1 >= canvas.1 {
            return Err(Error::InvalidMarker(format!(
                "center {:?} outside {}x{} canvas",
                self.center, canvas.0, canvas.1
            )));
        }
        if self.arm_length == 0 || self.thickness == 0 {
            return Err(Error::InvalidMarker(
                "arm_length and thickness must be at least 1".into(),
            ));
        }
        if self.intensity.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidMarker(format!(
                "intensity {:?} outside [0, 1]",
                self.intensity
            )));
        }
        Ok(())
    }

    /// Offsets `(lo, hi)` of the square structuring element; `hi - lo + 1 == thickness`.
    fn dilation_offsets(&self) -> (isize, isize) {
        let t = self.thickness as isize;
        (-((t - 1) / 2), t / 2)
    }

    /// One-pixel-wide skeleton, relative to the centre.
    fn skeleton(&self) -> Vec<(isize, isize)> {
        let l = self.arm_length as isize;
        let mut pts = Vec::with_capacity(4 * self.arm_length + 2);
        for d in -l..=l {
            match self.kind {
                MarkerKind::Crosshair => {
                    pts.push((0, d));
                    pts.push((d, 0));
                }
                MarkerKind::Fork => {
                    pts.push((d, d));
                    pts.push((d, -d));
                }
            }
        }
        pts
    }
}

/// Binary raster of one marker on an `(H, W)` canvas, clipped to bounds.
pub fn rasterize_marker(spec: &MarkerSpec, canvas: (usize, usize)) -> Result<Mask> {
    spec.validate(canvas)?;
    let (h, w) = (canvas.0 as isize, canvas.1 as isize);
    let (lo, hi) = spec.dilation_offsets();
    let (cr, cc) = (spec.center.0 as isize, spec.center.1 as isize);
    let mut mask = Mask::zeros(canvas.0, canvas.1);
    for (dr, dc) in spec.skeleton() {
        for er in lo..=hi {
            for ec in lo..=hi {
                let (r, c) = (cr + dr + er, cc + dc + ec);
                if (0..h).contains(&r) && (0..w).contains(&c) {
                    mask.set(r as usize, c as usize, 1.0);
                }
            }
        }
    }
    Ok(mask)
}

/// Tight box around the nonzero pixels of `mask`, if any.
pub fn tight_box(mask: &Mask) -> Option<BBox> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) != 0.0 {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    (r0 != usize::MAX).then(|| {
        BBox::new(
            c0 as f32,
            r0 as f32,
            (c1 - c0 + 1) as f32,
            (r1 - r0 + 1) as f32,
        )
    })
}

/// Draws `count_range` markers uniformly at random, fully inside the image.
pub fn sample_marker_specs(
    policy: &MarkerPolicy,
    image_size: (usize, usize),
    seed: u64,
) -> Result<Vec<MarkerSpec>> {
    policy.validate()?;
    let (h, w) = image_size;
    let side = h.min(w);
    let (arm_lo, arm_hi) = policy.arm_range_for(image_size);
    let (t_lo, t_hi) = policy.thickness_range;
    if policy.count_range.1 > 0 && side < 2 * arm_lo + t_lo {
        return Err(Error::InvalidMarker(format!(
            "{h}x{w} image is smaller than the minimum marker extent {}",
            2 * arm_lo + t_lo
        )));
    }
    let mut rng = seed::rng(&[policy.seed, seed, h as u64, w as u64]);
    let count = rng.gen_range(policy.count_range.0..=policy.count_range.1);
    let mut specs = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = if rng.gen_bool(0.5) {
            MarkerKind::Crosshair
        } else {
            MarkerKind::Fork
        };
        // side >= 2 * arm_lo + t_lo guarantees both clamps keep arm >= 1
        let thickness = rng.gen_range(t_lo..=t_hi).min(side - 2);
        let arm = rng.gen_range(arm_lo..=arm_hi).min((side - thickness) / 2);
        let before = arm + (thickness - 1) / 2;
        let after = arm + thickness / 2;
        let row = rng.gen_range(before..=h - 1 - after);
        let col = rng.gen_range(before..=w - 1 - after);
        let intensity = match policy.intensity {
            IntensityMode::FixedWhite => [1.0; 3],
            IntensityMode::FixedBlack => [0.0; 3],
            IntensityMode::Sampled => [rng.gen(), rng.gen(), rng.gen()],
        };
        specs.push(MarkerSpec {
            kind,
            center: (row, col),
            arm_length: arm,
            thickness,
            intensity,
        });
    }
    Ok(specs)
}

/// Result of [`stamp_markers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Stamped {
    pub corrupted: Image,
    pub mask: Mask,
    pub boxes: Vec<MarkerAnnotation>,
}

/// Paints markers in order (later ones win on overlap); the mask is the
/// union of all rasters and each spec yields one `marker` box.
pub fn stamp_markers(clean: &Image, specs: &[MarkerSpec]) -> Result<Stamped> {
    let canvas = clean.size();
    let mut corrupted = clean.clone();
    let mut mask = Mask::zeros(canvas.0, canvas.1);
    let mut boxes = Vec::with_capacity(specs.len());
    for spec in specs {
        let raster = rasterize_marker(spec, canvas)?;
        for r in 0..canvas.0 {
            for c in 0..canvas.1 {
                if raster.get(r, c) == 0.0 {
                    continue;
                }
                for ch in 0..clean.channels {
                    corrupted.set(r, c, ch, spec.intensity[ch.min(2)]);
                }
            }
        }
        mask.union_with(&raster);
        let bbox = tight_box(&raster).expect("center pixel is always inside the canvas");
        boxes.push(MarkerAnnotation {
            bbox,
            class: MarkerClass::Marker,
        });
    }
    Ok(Stamped {
        corrupted,
        mask,
        boxes,
    })
}
