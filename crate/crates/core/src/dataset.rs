//! Corpus layout, sample loading and batching.
//!
//! ```text
//! <root>/<split>/clean/*.png
//! <root>/<split>/corrupted/*.png   (same file names; required for `paired`)
//! <root>/<split>/mask/*.png        (optional)
//! <root>/<split>/boxes.jsonl       (optional)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use autograd::{Float, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::marker::{
    sample_marker_specs, stamp_markers, BBox, MarkerAnnotation, MarkerClass, MarkerPolicy,
};
use crate::{seed, Error, Image, Mask, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Stored corrupted twins (optionally with masks and boxes).
    Paired,
    /// Clean images only; markers are stamped on the fly.
    CleanOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    /// File name shared by the clean image and its twins.
    pub name: String,
    pub clean: PathBuf,
    pub corrupted: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    /// Boxes in the stored image's pixel coordinates.
    pub boxes: Option<Vec<MarkerAnnotation>>,
    /// Stored `(height, width)`.
    pub size: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: Split,
    pub layout: Layout,
    pub entries: Vec<Entry>,
    /// `(height, width)` every sample is resized to.
    pub image_size: (usize, usize),
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split_dir(&self) -> PathBuf {
        self.root.join(self.split.name())
    }
}

/// One line of `boxes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxesRecord {
    pub file: String,
    pub boxes: Vec<[f32; 4]>,
    pub classes: Vec<String>,
}

impl BoxesRecord {
    pub fn new(file: impl Into<String>, anns: &[MarkerAnnotation]) -> Self {
        Self {
            file: file.into(),
            boxes: anns
                .iter()
                .map(|a| [a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h])
                .collect(),
            classes: anns.iter().map(|a| a.class.name().to_string()).collect(),
        }
    }

    pub fn annotations(&self) -> Result<Vec<MarkerAnnotation>> {
        if self.boxes.len() != self.classes.len() {
            return Err(Error::Dataset(format!(
                "{}: {} boxes but {} classes",
                self.file,
                self.boxes.len(),
                self.classes.len()
            )));
        }
        self.boxes
            .iter()
            .zip(&self.classes)
            .map(|(b, c)| {
                let class = MarkerClass::parse(c)
                    .ok_or_else(|| Error::Dataset(format!("{}: unknown class {c:?}", self.file)))?;
                Ok(MarkerAnnotation {
                    bbox: BBox::new(b[0], b[1], b[2], b[3]),
                    class,
                })
            })
            .collect()
    }
}

pub fn read_boxes_jsonl(path: &Path) -> Result<BTreeMap<String, Vec<MarkerAnnotation>>> {
    let file =
        fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = BTreeMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BoxesRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let anns = rec.annotations()?;
        out.insert(rec.file, anns);
    }
    Ok(out)
}

pub fn write_boxes_jsonl(path: &Path, records: &[BoxesRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("serialisable record"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn dimensions(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((h as usize, w as usize))
}

/// Indexes one split; entries are sorted by file name.
pub fn scan_dataset(
    root: &Path,
    layout: Layout,
    split: Split,
    image_size: (usize, usize),
) -> Result<DatasetIndex> {
    if image_size.0 == 0 || image_size.1 == 0 {
        return Err(Error::Config(format!(
            "image size {image_size:?} must be positive"
        )));
    }
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    let dir = root.join(split.name());
    let clean_dir = dir.join("clean");
    let names = if clean_dir.is_dir() {
        list_pngs(&clean_dir)?
    } else {
        vec![]
    };
    if names.is_empty() {
        return Err(Error::Dataset(format!(
            "no images found in {}",
            clean_dir.display()
        )));
    }
    let corrupted_dir = dir.join("corrupted");
    let mask_dir = dir.join("mask");
    let boxes_path = dir.join("boxes.jsonl");
    let boxes = if boxes_path.is_file() {
        Some(read_boxes_jsonl(&boxes_path)?)
    } else {
        None
    };
    if layout == Layout::Paired && !corrupted_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "paired layout needs {}",
            corrupted_dir.display()
        )));
    }
    let mut entries = Vec::with_capacity(names.len());
    for name in names {
        let clean = clean_dir.join(&name);
        let size = dimensions(&clean)?;
        let twin = |d: &Path| Some(d.join(&name)).filter(|p| p.is_file());
        let corrupted = twin(&corrupted_dir);
        match (&corrupted, layout) {
            (None, Layout::Paired) => {
                return Err(Error::Dataset(format!(
                    "{name} has no corrupted twin in {}",
                    corrupted_dir.display()
                )))
            }
            (Some(p), _) if dimensions(p)? != size => {
                return Err(Error::Dataset(format!(
                    "{name}: corrupted twin size differs from clean image"
                )))
            }
            _ => {}
        }
        let mask = twin(&mask_dir);
        if let Some(p) = &mask {
            if dimensions(p)? != size {
                return Err(Error::Dataset(format!(
                    "{name}: mask size differs from clean image"
                )));
            }
        }
        entries.push(Entry {
            boxes: boxes.as_ref().and_then(|b| b.get(&name).cloned()),
            name,
            clean,
            corrupted,
            mask,
            size,
        });
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        split,
        layout,
        entries,
        image_size,
    })
}

/// `(I, I*, M, boxes)` at the index's image size.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedSample {
    pub name: String,
    pub corrupted: Image,
    pub clean: Image,
    pub mask: Mask,
    pub boxes: Vec<MarkerAnnotation>,
}

fn load_resized(path: &Path, size: (usize, usize)) -> Result<Image> {
    let img = Image::load_png(path)?;
    Ok(if img.size() == size {
        img
    } else {
        img.resize_bilinear(size.0, size.1)
    })
}

/// Loads entry `i`.
///
/// Clean-only entries are corrupted with markers drawn from `policy`, seeded
/// by `(epoch_seed, i)`. Paired entries use the stored corruption; with
/// `augment`, extra pseudo markers are stamped on the corrupted input only.
pub fn load_sample(
    index: &DatasetIndex,
    i: usize,
    policy: &MarkerPolicy,
    epoch_seed: u64,
    augment: bool,
) -> Result<CorruptedSample> {
    let entry = index.entries.get(i).ok_or_else(|| {
        Error::Dataset(format!("sample {i} out of range ({} entries)", index.len()))
    })?;
    let size = index.image_size;
    let clean = load_resized(&entry.clean, size)?;
    let marker_seed = seed::derive(&[epoch_seed, i as u64]);
    let sample = match (&entry.corrupted, index.layout) {
        (Some(path), Layout::Paired) => {
            let corrupted = load_resized(path, size)?;
            let mask = match &entry.mask {
                Some(p) => {
                    let m = Mask::load_png(p)?;
                    if m.height == size.0 && m.width == size.1 {
                        m
                    } else {
                        m.resize_nearest(size.0, size.1)
                    }
                }
                None => Mask::zeros(size.0, size.1),
            };
            let (sy, sx) = (
                size.0 as f32 / entry.size.0 as f32,
                size.1 as f32 / entry.size.1 as f32,
            );
            let boxes = entry
                .boxes
                .iter()
                .flatten()
                .map(|a| MarkerAnnotation {
                    bbox: a.bbox.scaled(sy, sx),
                    class: a.class,
                })
                .collect();
            let mut s = CorruptedSample {
                name: entry.name.clone(),
                corrupted,
                clean,
                mask,
                boxes,
            };
            if augment {
                let specs = sample_marker_specs(policy, size, marker_seed)?;
                let extra = stamp_markers(&s.corrupted, &specs)?;
                s.corrupted = extra.corrupted;
                s.mask.union_with(&extra.mask);
                s.boxes.extend(extra.boxes);
            }
            s
        }
        _ => {
            let specs = sample_marker_specs(policy, size, marker_seed)?;
            let stamped = stamp_markers(&clean, &specs)?;
            CorruptedSample {
                name: entry.name.clone(),
                corrupted: stamped.corrupted,
                clean,
                mask: stamped.mask,
                boxes: stamped.boxes,
            }
        }
    };
    Ok(sample)
}

/// Index batches covering every entry once; the last batch may be short.
pub fn make_batches(
    len: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(s) = shuffle_seed {
        order.shuffle(&mut seed::rng(&[s, 0x5F]));
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub samples: Vec<CorruptedSample>,
}

impl Batch {
    pub fn load(
        index: &DatasetIndex,
        ids: &[usize],
        policy: &MarkerPolicy,
        epoch_seed: u64,
        augment: bool,
    ) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let samples = ids
            .iter()
            .map(|&i| load_sample(index, i, policy, epoch_seed, augment))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn clean<T: Float>(&self) -> Result<Tensor<T>> {
        Image::batch_to_tensor(&self.samples.iter().map(|s| &s.clean).collect::<Vec<_>>())
    }

    pub fn corrupted<T: Float>(&self) -> Result<Tensor<T>> {
        Image::batch_to_tensor(
            &self
                .samples
                .iter()
                .map(|s| &s.corrupted)
                .collect::<Vec<_>>(),
        )
    }

    pub fn mask<T: Float>(&self) -> Result<Tensor<T>> {
        Mask::to_tensor(&self.samples.iter().map(|s| &s.mask).collect::<Vec<_>>())
    }

    pub fn boxes(&self) -> Vec<&[MarkerAnnotation]> {
        self.samples.iter().map(|s| s.boxes.as_slice()).collect()
    }
}

/// Per-split counts written by [`synthesize_split`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthCounts {
    pub images: usize,
    pub markers: usize,
}

/// Stamps markers on every clean image of a split at its stored resolution
/// and writes `corrupted/`, `mask/` and `boxes.jsonl` next to `clean/`.
///
/// Marker draws are seeded by `(seed, split, position)`. An image that
/// receives no marker gets a byte copy of its clean file.
pub fn synthesize_split(
    root: &Path,
    split: Split,
    policy: &MarkerPolicy,
    seed: u64,
) -> Result<SynthCounts> {
    let dir = root.join(split.name());
    let clean_dir = dir.join("clean");
    let names = if clean_dir.is_dir() {
        list_pngs(&clean_dir)?
    } else {
        vec![]
    };
    if names.is_empty() {
        return Err(Error::Dataset(format!(
            "no images found in {}",
            clean_dir.display()
        )));
    }
    let corrupted_dir = dir.join("corrupted");
    let mask_dir = dir.join("mask");
    for d in [&corrupted_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let mut records = Vec::with_capacity(names.len());
    let mut markers = 0;
    for (i, name) in names.iter().enumerate() {
        let clean_path = clean_dir.join(name);
        let clean = Image::load_png(&clean_path)?;
        let specs = sample_marker_specs(
            policy,
            clean.size(),
            seed::derive(&[seed, split as u64, i as u64]),
        )?;
        let stamped = stamp_markers(&clean, &specs)?;
        let out = corrupted_dir.join(name);
        if specs.is_empty() {
            fs::copy(&clean_path, &out)
                .map_err(|e| Error::io(format!("copying to {}", out.display()), e))?;
        } else {
            stamped.corrupted.save_png(&out)?;
        }
        stamped.mask.save_png(&mask_dir.join(name))?;
        markers += stamped.boxes.len();
        records.push(BoxesRecord::new(name.clone(), &stamped.boxes));
    }
    write_boxes_jsonl(&dir.join("boxes.jsonl"), &records)?;
    Ok(SynthCounts {
        images: names.len(),
        markers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marker::rasterize_marker;

    fn write_png(path: &Path, h: usize, w: usize, v: f32) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        let data = (0..h * w * 3)
            .map(|i| (v + (i % 7) as f32 * 0.02).min(1.0))
            .collect();
        Image::new(h, w, 3, data).unwrap().save_png(path).unwrap();
    }

    fn corpus(n: usize, paired: bool) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..n {
            let name = format!("img_{i:03}.png");
            write_png(&dir.path().join("train/clean").join(&name), 16, 16, 0.3);
            if paired {
                write_png(&dir.path().join("train/corrupted").join(&name), 16, 16, 0.6);
            }
        }
        dir
    }

    #[test]
    fn clean_only_fixture_with_160_training_images() {
        let dir = corpus(160, false);
        let idx = scan_dataset(dir.path(), Layout::CleanOnly, Split::Train, (16, 16)).unwrap();
        assert_eq!(idx.len(), 160);
        assert!(idx.entries.windows(2).all(|w| w[0].name < w[1].name));
    }

    #[test]
    fn empty_root_reports_no_images() {
        let dir = tempfile::tempdir().unwrap();
        let err = scan_dataset(dir.path(), Layout::CleanOnly, Split::Train, (16, 16)).unwrap_err();
        assert!(err.to_string().contains("no images found"), "{err}");
    }

    #[test]
    fn paired_scan_is_stable_and_names_orphans() {
        let dir = corpus(3, true);
        let a = scan_dataset(dir.path(), Layout::Paired, Split::Train, (16, 16)).unwrap();
        let b = scan_dataset(dir.path(), Layout::Paired, Split::Train, (16, 16)).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        fs::remove_file(dir.path().join("train/corrupted/img_001.png")).unwrap();
        let err = scan_dataset(dir.path(), Layout::Paired, Split::Train, (16, 16)).unwrap_err();
        assert!(err.to_string().contains("img_001.png"), "{err}");
    }

    #[test]
    fn zero_count_policy_leaves_sample_clean() {
        let dir = corpus(2, false);
        let idx = scan_dataset(dir.path(), Layout::CleanOnly, Split::Train, (16, 16)).unwrap();
        let s = load_sample(&idx, 1, &MarkerPolicy::default().with_count(0, 0), 9, false).unwrap();
        assert_eq!(s.corrupted, s.clean);
        assert!(s.boxes.is_empty());
        assert_eq!(s.mask.count_nonzero(), 0);
    }

    #[test]
    fn samples_are_deterministic_and_match_marker_rasters() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("train/clean/a.png"), 48, 48, 0.2);
        let idx = scan_dataset(dir.path(), Layout::CleanOnly, Split::Train, (64, 64)).unwrap();
        let policy = MarkerPolicy::default().with_count(2, 2);
        for epoch_seed in 0..20 {
            let s = load_sample(&idx, 0, &policy, epoch_seed, false).unwrap();
            assert_eq!(s, load_sample(&idx, 0, &policy, epoch_seed, false).unwrap());
            assert_eq!(s.clean.size(), (64, 64));
            let specs =
                sample_marker_specs(&policy, (64, 64), seed::derive(&[epoch_seed, 0])).unwrap();
            assert_eq!(specs.len(), 2);
            let r0 = rasterize_marker(&specs[0], (64, 64)).unwrap();
            let r1 = rasterize_marker(&specs[1], (64, 64)).unwrap();
            let overlap = (0..64 * 64)
                .filter(|&p| r0.data[p] > 0.0 && r1.data[p] > 0.0)
                .count();
            assert_eq!(
                s.mask.count_nonzero(),
                r0.count_nonzero() + r1.count_nonzero() - overlap
            );
            for p in 0..64 * 64 {
                assert_eq!(s.mask.data[p] > 0.0, r0.data[p] > 0.0 || r1.data[p] > 0.0);
            }
            assert!(s.corrupted.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn batches_cover_every_entry() {
        let sizes = |b: &[Vec<usize>]| b.iter().map(|x| x.len()).collect::<Vec<_>>();
        assert_eq!(sizes(&make_batches(5, 4, None).unwrap()), vec![4, 1]);
        assert_eq!(make_batches(4, 4, None).unwrap(), vec![vec![0, 1, 2, 3]]);
        let a = make_batches(10, 3, Some(7)).unwrap();
        assert_eq!(a, make_batches(10, 3, Some(7)).unwrap());
        let mut all: Vec<usize> = a.concat();
        assert_ne!(all, (0..10).collect::<Vec<_>>());
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(make_batches(3, 0, None).is_err());
    }

    #[test]
    fn synthesis_writes_twins_and_is_reproducible() {
        let dir = corpus(5, false);
        let policy = MarkerPolicy::default().with_count(1, 2);
        let counts = synthesize_split(dir.path(), Split::Train, &policy, 3).unwrap();
        assert_eq!(counts.images, 5);
        let split = dir.path().join("train");
        assert_eq!(list_pngs(&split.join("corrupted")).unwrap().len(), 5);
        assert_eq!(list_pngs(&split.join("mask")).unwrap().len(), 5);
        let first = fs::read(split.join("boxes.jsonl")).unwrap();
        assert_eq!(String::from_utf8_lossy(&first).lines().count(), 5);
        let corrupted = fs::read(split.join("corrupted/img_002.png")).unwrap();
        synthesize_split(dir.path(), Split::Train, &policy, 3).unwrap();
        assert_eq!(first, fs::read(split.join("boxes.jsonl")).unwrap());
        assert_eq!(
            corrupted,
            fs::read(split.join("corrupted/img_002.png")).unwrap()
        );

        let idx = scan_dataset(dir.path(), Layout::Paired, Split::Train, (32, 32)).unwrap();
        let s = load_sample(&idx, 2, &policy, 0, false).unwrap();
        let stored = idx.entries[2].boxes.as_ref().unwrap();
        assert_eq!(s.boxes.len(), stored.len());
        assert_eq!(s.boxes[0].bbox, stored[0].bbox.scaled(2.0, 2.0));
        assert!(s.mask.count_nonzero() > 0);

        synthesize_split(
            dir.path(),
            Split::Train,
            &MarkerPolicy::default().with_count(0, 0),
            3,
        )
        .unwrap();
        for name in list_pngs(&split.join("clean")).unwrap() {
            assert_eq!(
                fs::read(split.join("clean").join(&name)).unwrap(),
                fs::read(split.join("corrupted").join(&name)).unwrap()
            );
        }
    }

    #[test]
    fn paired_augmentation_touches_the_input_only() {
        let dir = corpus(1, true);
        let idx = scan_dataset(dir.path(), Layout::Paired, Split::Train, (16, 16)).unwrap();
        let plain =
            load_sample(&idx, 0, &MarkerPolicy::default().with_count(1, 1), 4, false).unwrap();
        let aug = load_sample(&idx, 0, &MarkerPolicy::default().with_count(1, 1), 4, true).unwrap();
        assert_eq!(plain.clean, aug.clean);
        assert_ne!(plain.corrupted, aug.corrupted);
        assert_eq!(aug.boxes.len(), 1);
    }

    #[test]
    fn boxes_jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("boxes.jsonl");
        let anns = vec![MarkerAnnotation {
            bbox: BBox::new(1.0, 2.0, 3.0, 4.0),
            class: MarkerClass::FakeMarker,
        }];
        write_boxes_jsonl(
            &p,
            &[
                BoxesRecord::new("a.png", &anns),
                BoxesRecord::new("b.png", &[]),
            ],
        )
        .unwrap();
        let back = read_boxes_jsonl(&p).unwrap();
        assert_eq!(back["a.png"], anns);
        assert!(back["b.png"].is_empty());
        fs::write(
            &p,
            r#"{"file":"a.png","boxes":[[0,0,1,1]],"classes":["cat"]}"#,
        )
        .unwrap();
        assert!(read_boxes_jsonl(&p).is_err());
    }
}
