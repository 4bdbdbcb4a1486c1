use std::cell::Cell;
use std::fs;
use std::path::{Path, PathBuf};

use blindfill::dataset::{load_sample, scan_dataset, synthesize_split, Layout, Split};
use blindfill::detector::decode_detections;
use blindfill::generator::DOWNSAMPLING;
use blindfill::metrics::{evaluate, EvalSample, Evaluation, Restorer};
use blindfill::synthetic::write_phantom_split;
use blindfill::trainer::{
    load_checkpoint, train as run_training, Discriminator, RunDir, TrainState,
};
use blindfill::{Image, Mask};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CliError, Stub};

fn io_failure(what: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::Failed(format!("{what} {}: {e}", path.display()))
}

fn usage_list(problems: Vec<String>) -> CliError {
    let mut msg = format!("{} configuration problem(s):", problems.len());
    for p in problems {
        msg.push_str("\n  - ");
        msg.push_str(&p);
    }
    CliError::Usage(msg)
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let root = cfg.data_root.as_deref().ok_or_else(|| {
        CliError::Usage("missing required key `data_root` (flag --data-root)".into())
    })?;
    let policy = cfg.marker_policy();
    policy
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let seed = cfg.seed.unwrap_or_default();
    if let Some(n) = cfg.phantoms {
        let side = cfg.phantom_size.unwrap_or(64);
        for &split in cfg.synth_splits.iter().flatten() {
            write_phantom_split(root, split.into(), n, (side, side), seed)?;
        }
    } else if !root.is_dir() {
        return Err(CliError::Usage(format!(
            "`data_root` points to {}, which is not a directory",
            root.display()
        )));
    }
    let mut done = 0;
    for &split in cfg.synth_splits.iter().flatten() {
        let split: Split = split.into();
        if !root.join(split.name()).join("clean").is_dir() {
            println!("{}: no clean/ directory, skipped", split.name());
            continue;
        }
        let counts = synthesize_split(root, split, &policy, seed)?;
        println!(
            "{}: {} images, {} markers",
            split.name(),
            counts.images,
            counts.markers
        );
        done += 1;
    }
    if done == 0 {
        return Err(CliError::Usage(format!(
            "no requested split under {} has a clean/ directory",
            root.display()
        )));
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let mut problems = Vec::new();
    let root = cfg
        .data_root()
        .map_err(|e| problems.push(e.to_string()))
        .ok();
    let config = cfg.train_config().map_err(|p| problems.extend(p)).ok();
    let split: Split = cfg.train_split.map(Into::into).unwrap_or(Split::Train);
    if let Some(root) = root {
        let clean = root.join(split.name()).join("clean");
        if !clean.is_dir() {
            problems.push(format!(
                "`train_split` {}: {} does not exist",
                split.name(),
                clean.display()
            ));
        }
    }
    if let Some(p) = &cfg.resume {
        if !p.is_file() {
            problems.push(format!("`resume`: {} is not a file", p.display()));
        }
    }
    let (Some(root), Some(config), true) = (root, config, problems.is_empty()) else {
        return Err(usage_list(problems));
    };

    let run = RunDir::new(cfg.run_dir());
    fs::create_dir_all(&run.root).map_err(|e| io_failure("creating", &run.root, e))?;
    let echo = run.root.join("config.toml");
    fs::write(&echo, cfg.to_toml()).map_err(|e| io_failure("writing", &echo, e))?;

    let mut state = match &cfg.resume {
        Some(path) => {
            let mut state = load_checkpoint(path)?;
            if state.config.hash() != config.hash() {
                return Err(CliError::Usage(format!(
                    "`resume`: {} was trained with a different configuration",
                    path.display()
                )));
            }
            // only the run-length settings may differ
            state.config = config;
            state
        }
        None => {
            if run.log().exists() {
                fs::remove_file(run.log()).map_err(|e| io_failure("removing", &run.log(), e))?;
            }
            TrainState::new(config)?
        }
    };
    let side = state.config.image_size;
    let layout: Layout = cfg.layout.map(Into::into).unwrap_or(Layout::CleanOnly);
    let index = scan_dataset(root, layout, split, (side, side))?;
    let start = state.step;
    let trace = run_training(&mut state, &index, Some(&run))?;
    match (trace.first(), trace.last()) {
        (Some(first), Some(last)) => println!(
            "trained steps {}..{}: rec {:.4} -> {:.4}, total_gen {:.4} -> {:.4}",
            start + 1,
            state.step,
            first.rec,
            last.rec,
            first.total_gen,
            last.total_gen
        ),
        _ => println!("no training steps to run (step {})", state.step),
    }
    println!("checkpoint: {}", run.last_checkpoint().display());
    Ok(())
}

fn print_evaluation(e: &Evaluation) {
    println!("{:<10} {:<9} metrics", "scope", "method");
    for (scope, model, base) in [
        ("full", &e.full, &e.baseline_full),
        ("mask_only", &e.mask_only, &e.baseline_mask_only),
    ] {
        println!("{scope:<10} {:<9} {}", "model", model.table_row());
        println!("{scope:<10} {:<9} {}", "baseline", base.table_row());
    }
}

pub fn eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    stub: Option<Stub>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let root = cfg.data_root()?;
    let split: Split = cfg.eval_split.map(Into::into).unwrap_or(Split::Test);
    let dir = root.join(split.name());
    let missing: Vec<String> = ["clean", "corrupted"]
        .iter()
        .map(|d| dir.join(d))
        .chain([dir.join("boxes.jsonl")])
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Usage(format!(
            "missing ground truth for `eval_split` {}: {}",
            split.name(),
            missing.join(", ")
        )));
    }
    let state = checkpoint.map(load_checkpoint).transpose()?;
    let side = match &state {
        Some(s) => s.config.image_size,
        None => cfg.image_size.unwrap_or(64),
    };
    let index = scan_dataset(root, Layout::Paired, split, (side, side))?;
    let samples = (0..index.len())
        .map(|i| {
            let s = load_sample(&index, i, &cfg.marker_policy(), 0, false)?;
            Ok(EvalSample {
                name: s.name,
                corrupted: s.corrupted,
                clean: s.clean,
                boxes: s.boxes,
            })
        })
        .collect::<blindfill::Result<Vec<_>>>()?;

    let cursor = Cell::new(0);
    let cleans: Vec<Image> = samples.iter().map(|s| s.clean.clone()).collect();
    let identity = |x: &Image| -> blindfill::Result<Image> { Ok(x.clone()) };
    // `evaluate` restores samples in order, so the perfect stub replays the ground truth
    let perfect = |_: &Image| -> blindfill::Result<Image> {
        let i = cursor.get();
        cursor.set(i + 1);
        Ok(cleans[i].clone())
    };
    let restorer: &dyn Restorer = match (&state, stub) {
        (Some(s), _) => &s.generator,
        (None, Some(Stub::Perfect)) => &perfect,
        (None, _) => &identity,
    };
    let evaluation = evaluate(restorer, samples.into_iter().map(Ok))?;
    let out = out.unwrap_or_else(|| cfg.run_dir().join("eval"));
    evaluation.write(&out)?;
    print_evaluation(&evaluation);
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct InferOutputs {
    pub mask: bool,
    pub detections: bool,
}

#[derive(Serialize)]
struct DetectionRecord {
    file: String,
    boxes: Vec<[f32; 4]>,
    classes: Vec<String>,
    scores: Vec<f32>,
}

fn png_names(dir: &Path) -> Result<Vec<String>, CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::Usage(format!("cannot read input {}: {e}", dir.display())))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

/// `M̂ ⊙ Îg + (1 − M̂) ⊙ I` with a single-channel mask image.
fn blend(input: &Image, inpainted: &Image, mask: &Image) -> blindfill::Result<Image> {
    let c = input.channels;
    let data = input
        .data
        .iter()
        .zip(&inpainted.data)
        .enumerate()
        .map(|(k, (&x, &g))| {
            let m = mask.data[k / c];
            m * g + (1.0 - m) * x
        })
        .collect();
    Image::new(input.height, input.width, c, data)
}

/// Runs the generator at the input's own resolution when it can; otherwise
/// at the training resolution, blending the upsampled mask and inpainting
/// with the full-resolution input.
fn restore_any_size(state: &TrainState, image: &Image) -> blindfill::Result<(Image, Mask)> {
    let (h, w) = image.size();
    if h % DOWNSAMPLING == 0 && w % DOWNSAMPLING == 0 {
        let (restored, mask, _) = state.generator.restore(image)?;
        return Ok((restored, mask));
    }
    let side = state.config.image_size;
    let (_, mask, inpainted) = state
        .generator
        .restore(&image.resize_bilinear(side, side))?;
    let mask = mask.as_image().resize_bilinear(h, w);
    let restored = blend(image, &inpainted.resize_bilinear(h, w), &mask)?;
    Ok((restored, Mask::from_image(&mask)))
}

fn detect(
    state: &TrainState,
    cfg: &RunConfig,
    name: &str,
    image: &Image,
) -> blindfill::Result<DetectionRecord> {
    let Discriminator::Detector(detector) = &state.disc else {
        unreachable!("checked before the loop")
    };
    let side = state.config.image_size;
    let (h, w) = image.size();
    let input = if (h, w) == (side, side) {
        image.clone()
    } else {
        image.resize_bilinear(side, side)
    };
    let out = detector.forward(&input.to_tensor())?;
    let dets = decode_detections(
        &out[0],
        (side, side),
        cfg.conf_threshold.unwrap_or(0.5),
        cfg.nms_iou.unwrap_or(0.45),
    )?;
    let (sy, sx) = (h as f32 / side as f32, w as f32 / side as f32);
    Ok(DetectionRecord {
        file: name.to_string(),
        boxes: dets
            .iter()
            .map(|d| {
                let b = d.bbox.scaled(sy, sx);
                [b.x, b.y, b.w, b.h]
            })
            .collect(),
        classes: dets.iter().map(|d| d.class.name().to_string()).collect(),
        scores: dets.iter().map(|d| d.confidence).collect(),
    })
}

pub fn infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    emit: InferOutputs,
) -> Result<(), CliError> {
    let state = load_checkpoint(checkpoint)?;
    if emit.detections && !matches!(state.disc, Discriminator::Detector(_)) {
        return Err(CliError::Usage(
            "--emit-detections needs a checkpoint trained with the detector discriminator".into(),
        ));
    }
    let names = png_names(input)?;
    if names.is_empty() {
        return Err(CliError::Usage(format!(
            "no PNG files in {}",
            input.display()
        )));
    }
    let masks = output.join("masks");
    for d in [output, masks.as_path()] {
        if d == masks && !emit.mask {
            continue;
        }
        fs::create_dir_all(d).map_err(|e| io_failure("creating", d, e))?;
    }
    let mut records = Vec::new();
    let mut failed = 0;
    for name in &names {
        let result = (|| -> blindfill::Result<()> {
            let image = Image::load_png(&input.join(name))?;
            let (restored, mask) = restore_any_size(&state, &image)?;
            restored.save_png(&output.join(name))?;
            if emit.mask {
                mask.save_png(&masks.join(name))?;
            }
            if emit.detections {
                records.push(detect(&state, cfg, name, &image)?);
            }
            Ok(())
        })();
        if let Err(e) = result {
            eprintln!("{name}: {e}");
            failed += 1;
        }
    }
    if emit.detections {
        let path = output.join("boxes.jsonl");
        let text: String = records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serialises") + "\n")
            .collect();
        fs::write(&path, text).map_err(|e| io_failure("writing", &path, e))?;
    }
    println!(
        "restored {} of {} images into {}",
        names.len() - failed,
        names.len(),
        output.display()
    );
    if failed > 0 {
        return Err(CliError::Failed(format!(
            "{failed} of {} inputs failed",
            names.len()
        )));
    }
    Ok(())
}
