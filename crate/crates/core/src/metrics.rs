//! Image quality metrics on the 8-bit intensity scale.
//!
//! Pixels are stored in `[0, 1]` as `f32`; every metric first maps them to
//! their 8-bit level `round(255·x)` — what a saved PNG would hold — and
//! works in `f64`. PSNR of identical images is capped at [`PSNR_CAP`].

use std::fmt::Write as _;
use std::path::Path;

use autograd::Float;
use serde::{Deserialize, Serialize};

use crate::generator::Generator;
use crate::imaging::quantize;
use crate::marker::MarkerAnnotation;
use crate::{Error, Image, Result};

pub const PEAK: f64 = 255.0;
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[inline]
fn level(x: f32) -> f64 {
    quantize(x) as f64
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Metrics(format!(
            "shape mismatch: {}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    Ok(())
}

/// Mean of `(255a − 255b)²` over all pixels and channels, on 8-bit levels.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let mut s = 0.0;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let d = level(x) - level(y);
        s += d * d;
    }
    Ok(s / a.data.len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (PEAK * PEAK / mse).log10()).min(PSNR_CAP)
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Mean SSIM over every valid window position, per channel, then averaged.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w, ch) = (a.height, a.width, a.channels);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Metrics(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (K1 * PEAK).powi(2);
    let c2 = (K2 * PEAK).powi(2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for c in 0..ch {
        let plane =
            |img: &Image| -> Vec<f64> { (0..h * w).map(|i| level(img.data[i * ch + c])).collect() };
        let (pa, pb) = (plane(a), plane(b));
        let products = [
            pa.clone(),
            pb.clone(),
            pa.iter().map(|x| x * x).collect(),
            pb.iter().map(|x| x * x).collect(),
            pa.iter().zip(&pb).map(|(x, y)| x * y).collect(),
        ];
        let [mu_a, mu_b, e_aa, e_bb, e_ab] = products.map(|p| filter_valid(&p, h, w, &taps));
        let mut sum = 0.0;
        for i in 0..oh * ow {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / (oh * ow) as f64;
    }
    Ok(total / ch as f64)
}

/// Separable valid-mode filtering of an `h×w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = taps
                .iter()
                .enumerate()
                .map(|(j, t)| t * p[r * w + c + j])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(r + i) * ow + c])
                .sum();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
}

pub fn full_metrics(a: &Image, b: &Image) -> Result<ImageMetrics> {
    let m = mse(a, b)?;
    Ok(ImageMetrics {
        psnr_db: psnr_from_mse(m),
        ssim: ssim(a, b)?,
        mse: m,
    })
}

/// Rows and columns of a crop around `rows × cols`, grown symmetrically (and
/// shifted to stay inside the image) until it is at least `min` on each side.
fn expand_range(r: std::ops::Range<usize>, min: usize, limit: usize) -> std::ops::Range<usize> {
    if r.len() >= min {
        return r;
    }
    let missing = min - r.len();
    let mut start = r.start.saturating_sub(missing / 2);
    let end = (start + min).min(limit);
    start = end.saturating_sub(min);
    start..end
}

fn crop(img: &Image, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Image {
    let mut data = Vec::with_capacity(rows.len() * cols.len() * img.channels);
    for r in rows.clone() {
        let start = (r * img.width + cols.start) * img.channels;
        data.extend_from_slice(&img.data[start..start + cols.len() * img.channels]);
    }
    Image::new(rows.len(), cols.len(), img.channels, data).expect("crop size")
}

/// Metrics restricted to marker boxes.
///
/// MSE/PSNR cover the union of box pixels (visited in row-major order, as in
/// [`mse`], so a full-image box reproduces the full-image value exactly).
/// SSIM is averaged over per-box crops; crops narrower than the window are
/// widened with the surrounding pixels.
pub fn masked_metrics(a: &Image, b: &Image, boxes: &[MarkerAnnotation]) -> Result<ImageMetrics> {
    check_pair(a, b)?;
    if boxes.is_empty() {
        return Err(Error::Metrics(
            "masked metrics need at least one box".into(),
        ));
    }
    let (h, w, ch) = (a.height, a.width, a.channels);
    let mut inside = vec![false; h * w];
    let mut ranges = Vec::with_capacity(boxes.len());
    for ann in boxes {
        let (rows, cols) = ann.bbox.pixel_ranges(h, w);
        if rows.is_empty() || cols.is_empty() {
            return Err(Error::Metrics(format!(
                "box {:?} lies outside the {h}x{w} image",
                ann.bbox
            )));
        }
        for r in rows.clone() {
            for c in cols.clone() {
                inside[r * w + c] = true;
            }
        }
        ranges.push((rows, cols));
    }
    let mut s = 0.0;
    let mut count = 0usize;
    for (p, _) in inside.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..ch {
            let d = level(a.data[p * ch + c]) - level(b.data[p * ch + c]);
            s += d * d;
            count += 1;
        }
    }
    let m = s / count as f64;
    let mut ssim_sum = 0.0;
    for (rows, cols) in &ranges {
        let rows = expand_range(rows.clone(), SSIM_WINDOW, h);
        let cols = expand_range(cols.clone(), SSIM_WINDOW, w);
        if rows.len() == h && cols.len() == w {
            ssim_sum += ssim(a, b)?;
        } else {
            ssim_sum += ssim(&crop(a, rows.clone(), cols.clone()), &crop(b, rows, cols))?;
        }
    }
    Ok(ImageMetrics {
        psnr_db: psnr_from_mse(m),
        ssim: ssim_sum / ranges.len() as f64,
        mse: m,
    })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub sd: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            sd: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Full,
    MaskOnly,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::Full => "full",
            Scope::MaskOnly => "mask_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub file: String,
    #[serde(flatten)]
    pub metrics: ImageMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scope: Scope,
    pub rows: Vec<MetricsRow>,
    pub psnr_db: Option<Aggregate>,
    pub ssim: Option<Aggregate>,
    pub mse: Option<Aggregate>,
}

impl MetricsReport {
    pub fn new(scope: Scope, rows: Vec<MetricsRow>) -> Self {
        let col = |f: fn(&ImageMetrics) -> f64| {
            Aggregate::of(&rows.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>())
        };
        Self {
            scope,
            psnr_db: col(|m| m.psnr_db),
            ssim: col(|m| m.ssim),
            mse: col(|m| m.mse),
            rows,
        }
    }

    /// `PSNR mean±sd | SSIM mean±sd | MSE mean±sd`, the layout of a results table row.
    pub fn table_row(&self) -> String {
        let cell = |a: Option<Aggregate>, digits: usize| match a {
            Some(a) => format!("{:.*}±{:.*}", digits, a.mean, digits, a.sd),
            None => "n/a".to_string(),
        };
        format!(
            "PSNR {} | SSIM {} | MSE {}",
            cell(self.psnr_db, 3),
            cell(self.ssim, 3),
            cell(self.mse, 3)
        )
    }
}

/// Anything that maps a corrupted image to a restored one.
pub trait Restorer {
    fn restore(&self, corrupted: &Image) -> Result<Image>;
}

impl<F: Fn(&Image) -> Result<Image>> Restorer for F {
    fn restore(&self, corrupted: &Image) -> Result<Image> {
        self(corrupted)
    }
}

impl<T: Float> Restorer for Generator<T> {
    fn restore(&self, corrupted: &Image) -> Result<Image> {
        Ok(Generator::restore(self, corrupted)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct EvalSample {
    pub name: String,
    pub corrupted: Image,
    pub clean: Image,
    pub boxes: Vec<MarkerAnnotation>,
}

/// Scores of a restorer and of the untouched corrupted input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub full: MetricsReport,
    pub mask_only: MetricsReport,
    pub baseline_full: MetricsReport,
    pub baseline_mask_only: MetricsReport,
}

/// Restores every sample and scores `Î` (and the baseline `I`) against `I*`.
///
/// Images without boxes contribute to the full-image scope only.
pub fn evaluate(
    restorer: &dyn Restorer,
    samples: impl IntoIterator<Item = Result<EvalSample>>,
) -> Result<Evaluation> {
    let (mut full, mut mask, mut base_full, mut base_mask) = (vec![], vec![], vec![], vec![]);
    for sample in samples {
        let s = sample?;
        let restored = restorer.restore(&s.corrupted)?;
        if !restored.same_shape(&s.clean) {
            return Err(Error::Metrics(format!(
                "{}: restored image has the wrong shape",
                s.name
            )));
        }
        let row = |metrics| MetricsRow {
            file: s.name.clone(),
            metrics,
        };
        full.push(row(full_metrics(&restored, &s.clean)?));
        base_full.push(row(full_metrics(&s.corrupted, &s.clean)?));
        if !s.boxes.is_empty() {
            mask.push(row(masked_metrics(&restored, &s.clean, &s.boxes)?));
            base_mask.push(row(masked_metrics(&s.corrupted, &s.clean, &s.boxes)?));
        }
    }
    if full.is_empty() {
        return Err(Error::Metrics("no samples to evaluate".into()));
    }
    Ok(Evaluation {
        full: MetricsReport::new(Scope::Full, full),
        mask_only: MetricsReport::new(Scope::MaskOnly, mask),
        baseline_full: MetricsReport::new(Scope::Full, base_full),
        baseline_mask_only: MetricsReport::new(Scope::MaskOnly, base_mask),
    })
}

impl Evaluation {
    fn reports(&self) -> [(&'static str, &MetricsReport); 4] {
        [
            ("model", &self.full),
            ("model", &self.mask_only),
            ("baseline", &self.baseline_full),
            ("baseline", &self.baseline_mask_only),
        ]
    }

    pub fn per_image_csv(&self) -> String {
        let mut out = String::from("file,method,scope,psnr_db,ssim,mse\n");
        for (method, report) in self.reports() {
            for r in &report.rows {
                let _ = writeln!(
                    out,
                    "{},{method},{},{},{},{}",
                    r.file,
                    report.scope.name(),
                    r.metrics.psnr_db,
                    r.metrics.ssim,
                    r.metrics.mse
                );
            }
        }
        out
    }

    /// Aggregates only; per-image values live in the CSV.
    pub fn summary_json(&self) -> serde_json::Value {
        let agg = |r: &MetricsReport| {
            serde_json::json!({
                "images": r.rows.len(),
                "psnr_db": r.psnr_db,
                "ssim": r.ssim,
                "mse": r.mse,
            })
        };
        serde_json::json!({
            "model": { "full": agg(&self.full), "mask_only": agg(&self.mask_only) },
            "baseline": { "full": agg(&self.baseline_full), "mask_only": agg(&self.baseline_mask_only) },
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let csv = dir.join("per_image.csv");
        std::fs::write(&csv, self.per_image_csv())
            .map_err(|e| Error::io(format!("writing {}", csv.display()), e))?;
        let json = dir.join("summary.json");
        let text = serde_json::to_string_pretty(&self.summary_json()).expect("json value");
        std::fs::write(&json, text + "\n")
            .map_err(|e| Error::io(format!("writing {}", json.display()), e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marker::{BBox, MarkerClass};
    use crate::seed;
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize, c: usize) -> Image {
        let mut rng = seed::rng(&[seed]);
        Image::new(h, w, c, (0..h * w * c).map(|_| rng.gen()).collect()).unwrap()
    }

    fn ann(x: f32, y: f32, w: f32, h: f32) -> MarkerAnnotation {
        MarkerAnnotation {
            bbox: BBox::new(x, y, w, h),
            class: MarkerClass::Marker,
        }
    }

    #[test]
    fn closed_form_mse_and_psnr() {
        let a = Image::filled(16, 16, 3, 0.25);
        let b = Image::new(16, 16, 3, a.data.iter().map(|v| v + 16.0 / 255.0).collect()).unwrap();
        let m = mse(&a, &b).unwrap();
        assert!((m - 256.0).abs() < 1e-9, "{m}");
        let p = psnr(&a, &b).unwrap();
        assert!((p - 10.0 * (65025.0f64 / 256.0).log10()).abs() < 1e-9);
        assert!((p - 24.048).abs() < 1e-3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!((psnr_from_mse(13.027) - 36.98).abs() < 0.01);
    }

    #[test]
    fn psnr_decreases_with_mse() {
        let mut last = f64::INFINITY;
        for m in [0.01, 0.1, 1.0, 13.0, 256.0, 4000.0] {
            let p = psnr_from_mse(m);
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_symmetry_and_inversion() {
        let a = random_image(1, 24, 20, 3);
        let b = random_image(2, 24, 20, 3);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let bin = Image::new(
            24,
            24,
            1,
            (0..576).map(|i| ((i * 37 % 11) % 2) as f32).collect(),
        )
        .unwrap();
        let inv = Image::new(24, 24, 1, bin.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&bin, &inv).unwrap() < 0.0);
        assert!(ssim(&Image::filled(8, 8, 1, 0.0), &Image::filled(8, 8, 1, 0.0)).is_err());
    }

    /// Direct window-by-window evaluation of the SSIM formula.
    fn ssim_reference(a: &Image, b: &Image) -> f64 {
        let taps = gaussian_taps(11, 1.5);
        let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
        let mut total = 0.0;
        for ch in 0..a.channels {
            let mut acc = 0.0;
            let mut n = 0;
            for r in 0..=a.height - 11 {
                for c in 0..=a.width - 11 {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = taps[i] * taps[j];
                            let x = (255.0 * a.get(r + i, c + j, ch) as f64).round();
                            let y = (255.0 * b.get(r + i, c + j, ch) as f64).round();
                            ma += wt * x;
                            mb += wt * y;
                            saa += wt * x * x;
                            sbb += wt * y * y;
                            sab += wt * x * y;
                        }
                    }
                    let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    n += 1;
                }
            }
            total += acc / n as f64;
        }
        total / a.channels as f64
    }

    #[test]
    fn ssim_matches_reference_loop() {
        for s in 0..5 {
            let a = random_image(10 + s, 32, 32, 3);
            let b = random_image(100 + s, 32, 32, 3);
            let (x, y) = (ssim(&a, &b).unwrap(), ssim_reference(&a, &b));
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn full_image_box_reproduces_full_metrics() {
        let a = random_image(3, 32, 24, 3);
        let b = random_image(4, 32, 24, 3);
        let m = masked_metrics(&a, &b, &[ann(0.0, 0.0, 24.0, 32.0)]).unwrap();
        assert_eq!(m, full_metrics(&a, &b).unwrap());
    }

    #[test]
    fn masked_metrics_weigh_pixels() {
        let a = Image::filled(32, 32, 3, 0.5);
        let mut b = a.clone();
        for r in 0..8 {
            for c in 0..8 {
                for ch in 0..3 {
                    b.set(r, c, ch, 0.5 + 8.0 / 255.0);
                    b.set(r + 16, c + 16, ch, 0.5 + 16.0 / 255.0);
                }
            }
        }
        let m = masked_metrics(
            &a,
            &b,
            &[ann(0.0, 0.0, 8.0, 8.0), ann(16.0, 16.0, 8.0, 8.0)],
        )
        .unwrap();
        assert!((m.mse - 160.0).abs() < 1e-6, "{}", m.mse);

        let mut outside = a.clone();
        outside.set(30, 1, 0, 0.0);
        let m = masked_metrics(&a, &outside, &[ann(2.0, 2.0, 5.0, 5.0)]).unwrap();
        assert_eq!((m.mse, m.psnr_db), (0.0, PSNR_CAP));
        assert!(masked_metrics(&a, &b, &[]).is_err());
    }

    #[test]
    fn small_box_crops_grow_to_the_window() {
        assert_eq!(expand_range(3..6, 11, 32), 0..11);
        assert_eq!(expand_range(28..31, 11, 32), 21..32);
        assert_eq!(expand_range(10..13, 11, 32), 6..17);
        assert_eq!(expand_range(0..20, 11, 32), 0..20);
    }

    #[test]
    fn aggregates_use_population_sd() {
        let a = Aggregate::of(&[1.0, 3.0]).unwrap();
        assert_eq!((a.mean, a.sd), (2.0, 1.0));
        assert!(Aggregate::of(&[]).is_none());
    }

    fn samples() -> Vec<EvalSample> {
        (0..3)
            .map(|i| {
                let clean = random_image(20 + i, 16, 16, 3);
                let mut corrupted = clean.clone();
                for c in 4..9 {
                    corrupted.set(6, c, 0, 1.0);
                }
                EvalSample {
                    name: format!("img{i}.png"),
                    corrupted,
                    clean,
                    boxes: vec![ann(4.0, 6.0, 5.0, 1.0)],
                }
            })
            .collect()
    }

    #[test]
    fn identity_restorer_equals_baseline() {
        let identity = |x: &Image| Ok(x.clone());
        let e = evaluate(&identity, samples().into_iter().map(Ok)).unwrap();
        assert_eq!(e.full, e.baseline_full);
        assert_eq!(e.mask_only, e.baseline_mask_only);
        assert_eq!(e.mask_only.rows.len(), 3);
    }

    #[test]
    fn perfect_restorer_hits_the_caps() {
        let set = samples();
        let cleans: Vec<_> = set
            .iter()
            .map(|s| (s.corrupted.clone(), s.clean.clone()))
            .collect();
        let perfect = move |x: &Image| Ok(cleans.iter().find(|(c, _)| c == x).unwrap().1.clone());
        let e = evaluate(&perfect, set.into_iter().map(Ok)).unwrap();
        for r in &e.full.rows {
            assert_eq!(
                r.metrics,
                ImageMetrics {
                    psnr_db: PSNR_CAP,
                    ssim: 1.0,
                    mse: 0.0
                }
            );
        }
        assert_eq!(e.full.mse.unwrap().mean, 0.0);
        let dir = tempfile::tempdir().unwrap();
        e.write(dir.path()).unwrap();
        let first = std::fs::read(dir.path().join("summary.json")).unwrap();
        e.write(dir.path()).unwrap();
        assert_eq!(
            first,
            std::fs::read(dir.path().join("summary.json")).unwrap()
        );
        let csv = std::fs::read_to_string(dir.path().join("per_image.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 4 * 3);
    }
}
