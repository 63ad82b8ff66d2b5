use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Wall-clock facts kept apart from the metric files so those stay reproducible.
#[derive(Debug, Serialize)]
struct Metadata<'a> {
    command: &'a str,
    started_unix_s: f64,
    finished_unix_s: f64,
    elapsed_s: f64,
    version: &'static str,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn write_metadata(path: &Path, command: &str, started_unix_s: f64) -> Result<()> {
    let finished = unix_now();
    let meta = Metadata {
        command,
        started_unix_s,
        finished_unix_s: finished,
        elapsed_s: finished - started_unix_s,
        version: env!("CARGO_PKG_VERSION"),
    };
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, &meta).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

const GAP: u32 = 1;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);

fn upscale(pixels: usize) -> u32 {
    (64 / pixels.max(1)).clamp(1, 8) as u32
}

/// Tiles image batches into a grid: one row per batch, `count` images per row.
/// Batches are NCHW in `[0, 1]` with one or three channels.
pub fn write_mosaic(path: &Path, rows: &[&Tensor], count: usize) -> Result<()> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidArgument("mosaic needs at least one row".into()))?;
    let &[_, c, h, w] = first.shape() else {
        return Err(Error::InvalidArgument(format!("mosaic rows must be NCHW, got {:?}", first.shape())));
    };
    if c != 1 && c != 3 {
        return Err(Error::InvalidArgument(format!("mosaic needs 1 or 3 channels, got {c}")));
    }
    if let Some(r) = rows.iter().find(|r| r.shape()[1..] != first.shape()[1..]) {
        return Err(Error::shape(first.shape(), r.shape()));
    }
    let cols = rows.iter().map(|r| r.batch().min(count)).max().unwrap_or(0).max(1) as u32;
    let s = upscale(h.max(w));
    let (cw, ch) = (w as u32 * s, h as u32 * s);
    let mut img = RgbImage::from_pixel(cols * (cw + GAP) + GAP, rows.len() as u32 * (ch + GAP) + GAP, BACKGROUND);
    for (ri, batch) in rows.iter().enumerate() {
        for i in 0..batch.batch().min(count) {
            let sample = batch.sample(i);
            let (x0, y0) = (GAP + i as u32 * (cw + GAP), GAP + ri as u32 * (ch + GAP));
            for y in 0..h {
                for x in 0..w {
                    let px = |k: usize| (sample[(k * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                    let color = if c == 1 { Rgb([px(0); 3]) } else { Rgb([px(0), px(1), px(2)]) };
                    for dy in 0..s {
                        for dx in 0..s {
                            img.put_pixel(x0 + x as u32 * s + dx, y0 + y as u32 * s + dy, color);
                        }
                    }
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Files written by a driver, in emission order.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Emitted(pub Vec<PathBuf>);

impl Emitted {
    pub fn push(&mut self, p: PathBuf) -> &Path {
        self.0.push(p);
        self.0.last().expect("just pushed")
    }
}
