//! The two training commands.
//!
//! Both write the updated weight store to `--out` plus a loss-history
//! sidecar at `<out>.loss.csv` with one `step,content_loss,style_loss,total`
//! row per step. Training images come from `--content` / `--style` frame
//! directories when given, otherwise from the deterministic procedural
//! generators, so the commands work with no assets at all.

use crate::stylize::{list_frames, load_engine};
use crate::Resolved;
use lintx_cli::{ppm, Fail};
use lintx_core::data::{content_image, style_image};
use lintx_core::tensor::Tensor;
use lintx_core::trainer::{pretrain_decoder, train_transform, LossConfig, StepLosses, TrainBatch};
use std::path::Path;

/// Free choice: the decoder objective is plain pixel MSE and tolerates a
/// larger rate than the transform stage's fixed 1e-4. 1e-2 diverges on
/// the full presets.
const DECODER_LR: f64 = 1e-3;
/// Enough to reach reconstruction MSE ~5e-3 on the procedural pool.
/// Transform training measures its losses through the decoder, so a
/// sloppy decoder flattens the loss landscape the transform trains on.
const DEFAULT_DECODER_STEPS: usize = 2000;
const DEFAULT_TRANSFORM_STEPS: usize = 500;
const BATCH_SIZE: usize = 8;
const POOL: usize = 8;
const SIDE: usize = 32;

fn load_pool(dir: &Path) -> Result<Vec<Tensor>, Fail> {
    list_frames(dir)?
        .iter()
        .map(|(_, path)| ppm::read_image(path))
        .collect()
}

fn procedural_pool(make: fn(usize, u64) -> Tensor, seed: u64) -> Vec<Tensor> {
    (0..POOL).map(|i| make(SIDE, seed.wrapping_add(i as u64))).collect()
}

fn write_sidecar(out: &Path, rows: &[StepLosses]) -> Result<(), Fail> {
    let mut text = String::from("step,content_loss,style_loss,total\n");
    for r in rows {
        text.push_str(&format!("{},{:.12e},{:.12e},{:.12e}\n", r.step, r.content, r.style, r.total));
    }
    let mut path = out.as_os_str().to_owned();
    path.push(".loss.csv");
    std::fs::write(&path, text)
        .map_err(|e| Fail::Io(format!("{}: {e}", Path::new(&path).display())))
}

pub fn cmd_train_decoder(r: &Resolved) -> Result<(), Fail> {
    let out = r.require_path("out")?;
    let mut eng = load_engine(r)?;
    let images = match &r.content {
        Some(dir) => load_pool(dir)?,
        None => procedural_pool(content_image, r.seed),
    };
    let steps = r.steps.unwrap_or(DEFAULT_DECODER_STEPS);
    let history = pretrain_decoder(&eng.spec, &mut eng.store, &images, steps, DECODER_LR, r.seed)?;
    eng.store.save(out).map_err(|e| Fail::Io(format!("{}: {e}", out.display())))?;
    let rows: Vec<StepLosses> = history
        .iter()
        .enumerate()
        .map(|(step, &mse)| StepLosses { step, content: mse, style: 0.0, total: mse })
        .collect();
    write_sidecar(out, &rows)?;
    match (history.first(), history.last()) {
        (Some(first), Some(last)) => {
            println!("pretrained decoder for {steps} steps: loss {first:.6e} -> {last:.6e}")
        }
        _ => println!("pretrained decoder for 0 steps"),
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_train_transform(r: &Resolved) -> Result<(), Fail> {
    let out = r.require_path("out")?;
    let mut eng = load_engine(r)?;
    let content = match &r.content {
        Some(dir) => load_pool(dir)?,
        None => procedural_pool(content_image, r.seed),
    };
    let style = match &r.style {
        Some(dir) => load_pool(dir)?,
        // Offset so the procedural pools never coincide.
        None => procedural_pool(style_image, r.seed.wrapping_add(1000)),
    };
    let batch = TrainBatch::new(content, style)?;
    let cfg = LossConfig::default_for(&eng.spec.encoder);
    let steps = r.steps.unwrap_or(DEFAULT_TRANSFORM_STEPS);
    let history =
        train_transform(&eng.spec, &mut eng.store, &batch, &cfg, steps, BATCH_SIZE, r.seed)?;
    eng.store.save(out).map_err(|e| Fail::Io(format!("{}: {e}", out.display())))?;
    write_sidecar(out, &history)?;
    match (history.first(), history.last()) {
        (Some(first), Some(last)) => println!(
            "trained transform for {steps} steps: total {:.6e} -> {:.6e}",
            first.total, last.total
        ),
        _ => println!("trained transform for 0 steps"),
    }
    println!("wrote {}", out.display());
    Ok(())
}
