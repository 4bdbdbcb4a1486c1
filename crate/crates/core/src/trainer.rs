//! Alternating optimisation of the generator and the discriminator, plus
//! checkpoints, per-step JSON logs and per-epoch snapshot grids.
//!
//! Everything that varies during a run (batch order, on-the-fly markers) is
//! derived from `(seed, epoch)`, where the epoch is a pure function of the
//! step counter. A run resumed from a checkpoint therefore replays exactly
//! the batches an uninterrupted run would have seen.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use autograd::{Adam, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, DiscKind, TrainConfig};
use crate::dataset::{make_batches, Batch, DatasetIndex};
use crate::detector::{assign_targets, Detector, PatchDiscriminator};
use crate::generator::{Branches, Generator};
use crate::imaging::hconcat;
use crate::losses::{
    adv_loss, det_loss, hinge_disc_loss, hinge_gen_loss, perceptual_loss, rec_loss, LossReport,
    Role,
};
use crate::nn::ParamStore;
use crate::perceptual::PerceptualExtractor;
use crate::{seed, Error, Image, Mask, Result};

/// Working precision of training.
pub type Scalar = f32;

#[derive(Debug, Clone)]
pub enum Discriminator {
    Detector(Detector<Scalar>),
    Patch(PatchDiscriminator<Scalar>),
}

impl Discriminator {
    pub fn params(&self) -> &ParamStore<Scalar> {
        match self {
            Discriminator::Detector(d) => d.params(),
            Discriminator::Patch(d) => d.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<Scalar> {
        match self {
            Discriminator::Detector(d) => d.params_mut(),
            Discriminator::Patch(d) => d.params_mut(),
        }
    }
}

/// Both networks, both optimisers and the step counter.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Generator<Scalar>,
    pub disc: Discriminator,
    pub gen_opt: Adam<Scalar>,
    pub disc_opt: Adam<Scalar>,
    pub step: u64,
    phi: PerceptualExtractor<Scalar>,
}

fn sum_vars(g: &Graph<Scalar>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

fn take_grads(
    g: &Graph<Scalar>,
    root: Var,
    vars: &[Var],
    params: &ParamStore<Scalar>,
) -> Vec<Tensor<Scalar>> {
    let mut grads = g.backward(root);
    vars.iter()
        .zip(params.tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let generator = Generator::new(config.generator_config())?;
        let disc = match config.disc {
            DiscKind::Detector => Discriminator::Detector(Detector::new(config.detector_config())?),
            DiscKind::Patch => {
                Discriminator::Patch(PatchDiscriminator::new(&config.patch_config()))
            }
        };
        let phi = PerceptualExtractor::from_spec(&config.perceptual)?;
        let gen_opt = Adam::new(config.learning_rate, generator.params().tensors());
        let disc_opt = Adam::new(config.learning_rate, disc.params().tensors());
        Ok(Self {
            config,
            generator,
            disc,
            gen_opt,
            disc_opt,
            step: 0,
            phi,
        })
    }

    fn non_finite(&self, what: &str, parts: &[(&str, f64)]) -> Option<Error> {
        let bad: Vec<String> = parts
            .iter()
            .filter(|(_, v)| !v.is_finite())
            .map(|(n, v)| format!("{n}={v}"))
            .collect();
        if bad.is_empty() {
            return None;
        }
        let all: Vec<String> = parts.iter().map(|(n, v)| format!("{n}={v}")).collect();
        Some(Error::NonFinite {
            step: self.step,
            report: format!(
                "{what} update aborted ({}); all terms: {}",
                bad.join(", "),
                all.join(", ")
            ),
        })
    }

    /// One generator update followed by one discriminator update.
    ///
    /// The discriminator sees the generator outputs of this step's forward
    /// pass, detached; the generator's adversarial term runs through the
    /// discriminator with its parameters held constant.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let input: Tensor<Scalar> = batch.corrupted()?;
        let clean: Tensor<Scalar> = batch.clean()?;
        let w = self.config.weights;

        // generator
        let g = Graph::new();
        let gp = self.generator.params().bind(&g, true);
        let x = g.constant(input.clone());
        let y = g.constant(clean.clone());
        let out = self.generator.forward_graph(&g, &gp, x)?;
        let rec = rec_loss(&g, y, out.inpainted, out.composed)?;
        let per = perceptual_loss(&g, &self.phi, y, out.inpainted, out.composed)?;
        let adv = match &self.disc {
            Discriminator::Detector(d) => {
                let dp = d.params().bind(&g, false);
                let rg = d.forward_graph(&g, &dp, out.inpainted)?;
                let rc = d.forward_graph(&g, &dp, out.composed)?;
                adv_loss(&g, &rg, &rc)?
            }
            Discriminator::Patch(d) => {
                let dp = d.params().bind(&g, false);
                let sg = d.forward_graph(&g, &dp, out.inpainted)?;
                let sc = d.forward_graph(&g, &dp, out.composed)?;
                let both = g.add(hinge_gen_loss(&g, sg), hinge_gen_loss(&g, sc))?;
                g.scale(both, 0.5)
            }
        };
        let weighted = [
            g.scale(rec, w.rec as f32),
            g.scale(per, w.per as f32),
            g.scale(adv, w.adv as f32),
        ];
        let total = sum_vars(&g, &weighted)?;
        let (rec_v, per_v, adv_v) = (g.item(rec) as f64, g.item(per) as f64, g.item(adv) as f64);
        if let Some(e) = self.non_finite(
            "generator",
            &[("rec", rec_v), ("per", per_v), ("adv", adv_v)],
        ) {
            return Err(e);
        }
        let inpainted = g.value(out.inpainted).clone();
        let composed = g.value(out.composed).clone();
        let grads = take_grads(&g, total, &gp, self.generator.params());
        drop(g);
        self.gen_opt
            .update(self.generator.params_mut().tensors_mut(), &grads)?;

        // discriminator
        let g = Graph::new();
        let size = (input.shape()[2], input.shape()[3]);
        let (cls_v, loc_v, total, dp) = match &self.disc {
            Discriminator::Detector(d) => {
                let dp = d.params().bind(&g, true);
                let mut cls = Vec::new();
                let mut loc = Vec::new();
                let images = [input, clean, inpainted, composed];
                for (role, image) in Role::ALL.into_iter().zip(images) {
                    let v = g.constant(image);
                    let raws = d.forward_graph(&g, &dp, v)?;
                    let targets = batch
                        .samples
                        .iter()
                        .map(|s| assign_targets(&role.annotations(&s.boxes), d.anchors(), size))
                        .collect::<Result<Vec<_>>>()?;
                    let (c, l) = det_loss(&g, &raws, &targets)?;
                    cls.push(c);
                    loc.push(l);
                }
                let (c, l) = (sum_vars(&g, &cls)?, sum_vars(&g, &loc)?);
                (g.item(c) as f64, g.item(l) as f64, g.add(c, l)?, dp)
            }
            Discriminator::Patch(d) => {
                let dp = d.params().bind(&g, true);
                let real = d.forward_graph(&g, &dp, g.constant(clean))?;
                let fg = d.forward_graph(&g, &dp, g.constant(inpainted))?;
                let fc = d.forward_graph(&g, &dp, g.constant(composed))?;
                let both = g.add(
                    hinge_disc_loss(&g, real, fg)?,
                    hinge_disc_loss(&g, real, fc)?,
                )?;
                let hinge = g.scale(both, 0.5);
                (g.item(hinge) as f64, 0.0, hinge, dp)
            }
        };
        if let Some(e) = self.non_finite("discriminator", &[("det_cls", cls_v), ("det_loc", loc_v)])
        {
            return Err(e);
        }
        let grads = take_grads(&g, total, &dp, self.disc.params());
        drop(g);
        self.disc_opt
            .update(self.disc.params_mut().tensors_mut(), &grads)?;
        self.step += 1;
        LossReport::new(rec_v, per_v, adv_v, cls_v, loc_v, &w)
    }

    /// Restored image, soft mask and raw inpainting of one input.
    pub fn restore(&self, image: &Image) -> Result<(Image, Mask, Image)> {
        self.generator.restore(image)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub rec: f64,
    pub per: f64,
    pub adv: f64,
    pub det_cls: f64,
    pub det_loc: f64,
    pub total_gen: f64,
    pub total_disc: f64,
    pub wall_ms: f64,
}

impl StepLog {
    pub fn new(step: u64, r: &LossReport, wall_ms: f64) -> Self {
        Self {
            step,
            rec: r.rec,
            per: r.per,
            adv: r.adv,
            det_cls: r.det_cls,
            det_loc: r.det_loc,
            total_gen: r.total_gen,
            total_disc: r.total_disc,
            wall_ms,
        }
    }
}

/// Number of batches in one pass over `len` samples.
pub fn batches_per_epoch(len: usize, batch_size: usize) -> u64 {
    len.div_ceil(batch_size) as u64
}

/// Entry ids and marker seed of the batch trained at `step`.
pub fn batch_plan(config: &TrainConfig, len: usize, step: u64) -> Result<(Vec<usize>, u64)> {
    let per_epoch = batches_per_epoch(len, config.batch_size);
    let epoch = step / per_epoch;
    let batches = make_batches(
        len,
        config.batch_size,
        Some(seed::derive(&[config.seed, epoch, 0xBA])),
    )?;
    let epoch_seed = seed::derive(&[config.seed, epoch, 0xA0]);
    Ok((batches[(step % per_epoch) as usize].clone(), epoch_seed))
}

/// Layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("step_{step:08}.ckpt"))
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("last.ckpt")
    }

    pub fn snapshots(&self) -> PathBuf {
        self.root.join("snapshots")
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(format!("creating {}", p.display()), e))
}

/// Trains until `state.config.max_steps`, returning this call's loss trace.
///
/// With a run directory, every step appends a JSON line to the log,
/// checkpoints are written every `checkpoint_every` steps and at the end,
/// and a snapshot grid is written after every `snapshot_every`-th epoch.
pub fn train(
    state: &mut TrainState,
    index: &DatasetIndex,
    run: Option<&RunDir>,
) -> Result<Vec<LossReport>> {
    if index.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let side = state.config.image_size;
    if index.image_size != (side, side) {
        return Err(Error::Config(format!(
            "dataset resized to {:?} but the model trains at {side}x{side}",
            index.image_size
        )));
    }
    let mut log = match run {
        Some(r) => {
            create_dir(&r.root)?;
            create_dir(&r.checkpoints())?;
            let f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(r.log())
                .map_err(|e| Error::io(format!("opening {}", r.log().display()), e))?;
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };
    let per_epoch = batches_per_epoch(index.len(), state.config.batch_size);
    let mut trace = Vec::new();
    while state.step < state.config.max_steps {
        let started = Instant::now();
        let (ids, epoch_seed) = batch_plan(&state.config, index.len(), state.step)?;
        let batch = Batch::load(
            index,
            &ids,
            &state.config.marker,
            epoch_seed,
            state.config.augment,
        )?;
        let report = state.train_step(&batch)?;
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        trace.push(report);
        let Some(run) = run else { continue };
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&StepLog::new(state.step, &report, wall_ms))
                .expect("log line");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(format!("writing {}", run.log().display()), e))?;
        }
        let every = state.config.checkpoint_every;
        if every > 0 && state.step.is_multiple_of(every) {
            save_checkpoint(state, &run.checkpoint(state.step))?;
        }
        let snap = state.config.snapshot_every;
        if snap > 0 && state.step.is_multiple_of(per_epoch) {
            let epoch = state.step / per_epoch;
            if epoch.is_multiple_of(snap) {
                create_dir(&run.snapshots())?;
                let grid = snapshot_grid(state, index)?;
                grid.save_png(&run.snapshots().join(format!("epoch_{epoch:04}.png")))?;
            }
        }
    }
    if let Some(run) = run {
        save_checkpoint(state, &run.last_checkpoint())?;
    }
    Ok(trace)
}

fn vconcat(rows: &[Image]) -> Result<Image> {
    let first = rows.first().ok_or_else(|| Error::Shape("no rows".into()))?;
    let mut data = Vec::with_capacity(first.data.len() * rows.len());
    for r in rows {
        if r.width != first.width || r.channels != first.channels {
            return Err(Error::Shape("snapshot rows differ in width".into()));
        }
        data.extend_from_slice(&r.data);
    }
    Image::new(first.height * rows.len(), first.width, first.channels, data)
}

/// Rows of `I | M̂ | Îg | Î | I*` for the first (up to) four training
/// samples with fixed markers. Single-branch models have no mask panel.
pub fn snapshot_grid(state: &TrainState, index: &DatasetIndex) -> Result<Image> {
    let n = index.len().min(4);
    let ids: Vec<usize> = (0..n).collect();
    let batch = Batch::load(
        index,
        &ids,
        &state.config.marker,
        seed::derive(&[state.config.seed, 0x5A]),
        false,
    )?;
    let out = state.generator.forward(&batch.corrupted()?)?;
    let mut rows = Vec::with_capacity(n);
    for (i, s) in batch.samples.iter().enumerate() {
        let mut panels = vec![s.corrupted.clone()];
        if state.config.branches == Branches::Two {
            panels.push(Mask::from_tensor(&out.mask, i)?.as_image());
        }
        panels.push(Image::from_tensor(&out.inpainted, i)?);
        panels.push(Image::from_tensor(&out.composed, i)?);
        panels.push(s.clean.clone());
        rows.push(hconcat(&panels)?);
    }
    vconcat(&rows)
}

const MAGIC: &[u8; 8] = b"BFCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

impl AdamMeta {
    fn of(a: &Adam<Scalar>) -> Self {
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            step: a.step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload in `f32` elements.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    config_hash: String,
    step: u64,
    generator_adam: AdamMeta,
    discriminator_adam: AdamMeta,
    tensors: Vec<TensorEntry>,
    payload_len: usize,
    payload_sha256: String,
}

fn ckpt_err(field: &str, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        field: field.to_string(),
        detail: detail.into(),
    }
}

/// Every stored tensor group in file order.
fn groups(state: &TrainState) -> Vec<(String, &ParamStore<Scalar>, Vec<&Tensor<Scalar>>)> {
    let g = state.generator.params();
    let d = state.disc.params();
    vec![
        ("generator".into(), g, g.tensors().iter().collect()),
        ("discriminator".into(), d, d.tensors().iter().collect()),
        (
            "generator_adam.m".into(),
            g,
            state.gen_opt.first_moment.iter().collect(),
        ),
        (
            "generator_adam.v".into(),
            g,
            state.gen_opt.second_moment.iter().collect(),
        ),
        (
            "discriminator_adam.m".into(),
            d,
            state.disc_opt.first_moment.iter().collect(),
        ),
        (
            "discriminator_adam.v".into(),
            d,
            state.disc_opt.second_moment.iter().collect(),
        ),
    ]
}

/// Serialises the full training state.
///
/// Layout: magic, `u32` version, `u32` header length, JSON header, then the
/// little-endian `f32` payload described by the header's tensor table.
pub fn checkpoint_bytes(state: &TrainState) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (group, store, ts) in groups(state) {
        for (name, t) in store.names().iter().zip(ts) {
            tensors.push(TensorEntry {
                name: format!("{group}/{name}"),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        config: state.config.clone(),
        config_hash: state.config.hash(),
        step: state.step,
        generator_adam: AdamMeta::of(&state.gen_opt),
        discriminator_adam: AdamMeta::of(&state.disc_opt),
        tensors,
        payload_len: payload.len(),
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, checkpoint_bytes(state))
        .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(ckpt_err("magic", "not a checkpoint file"));
    }
    let word = |at: usize, field: &str| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| ckpt_err(field, "file truncated"))
    };
    let version = word(8, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(
            "version",
            format!("found {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let header_len = word(12, "header_len")? as usize;
    let json = bytes.get(16..16 + header_len).ok_or_else(|| {
        ckpt_err(
            "header_len",
            format!("{header_len} bytes of header but file is truncated"),
        )
    })?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| ckpt_err("header", e.to_string()))?;
    let payload = &bytes[16 + header_len..];
    if payload.len() != header.payload_len {
        return Err(ckpt_err(
            "payload_len",
            format!(
                "header promises {} bytes, file has {}",
                header.payload_len,
                payload.len()
            ),
        ));
    }
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(ckpt_err("payload_sha256", "payload digest mismatch"));
    }
    if header.config.hash() != header.config_hash {
        return Err(ckpt_err(
            "config_hash",
            "config does not match its recorded hash",
        ));
    }
    let mut state =
        TrainState::new(header.config.clone()).map_err(|e| ckpt_err("config", e.to_string()))?;
    let expected: Vec<(String, Vec<usize>)> = groups(&state)
        .into_iter()
        .flat_map(|(group, store, ts)| {
            store
                .names()
                .iter()
                .zip(ts)
                .map(|(n, t)| (format!("{group}/{n}"), t.shape().to_vec()))
                .collect::<Vec<_>>()
        })
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(ckpt_err(
            "tensors",
            format!(
                "expected {} tensors, found {}",
                expected.len(),
                header.tensors.len()
            ),
        ));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(ckpt_err(
                &format!("tensors.{}", entry.name),
                format!(
                    "expected {name} {shape:?}, found {} {:?}",
                    entry.name, entry.shape
                ),
            ));
        }
        let len: usize = shape.iter().product();
        let raw = payload
            .get(entry.offset * 4..(entry.offset + len) * 4)
            .ok_or_else(|| ckpt_err(&format!("tensors.{name}"), "extends past the payload"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        loaded.push(Tensor::from_vec(shape, data)?);
    }
    let mut it = loaded.into_iter();
    let mut fill = |dst: &mut [Tensor<Scalar>]| {
        for t in dst.iter_mut() {
            *t = it.next().expect("counted above");
        }
    };
    fill(state.generator.params_mut().tensors_mut());
    fill(state.disc.params_mut().tensors_mut());
    fill(&mut state.gen_opt.first_moment);
    fill(&mut state.gen_opt.second_moment);
    fill(&mut state.disc_opt.first_moment);
    fill(&mut state.disc_opt.second_moment);
    for (opt, meta) in [
        (&mut state.gen_opt, &header.generator_adam),
        (&mut state.disc_opt, &header.discriminator_adam),
    ] {
        opt.lr = meta.lr;
        opt.beta1 = meta.beta1;
        opt.beta2 = meta.beta2;
        opt.eps = meta.eps;
        opt.step = meta.step;
    }
    state.step = header.step;
    Ok(state)
}
