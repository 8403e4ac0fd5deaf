//! Binary stage files (`ODXS`).
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "ODXS" | version u32 | height u32 | width u32 | stage_index u32
//! n_train u32 | n_test u32 | kind u32 (0 mixture, 1 transformed)
//! weights 3 x f64 | magnitude f64 | seed u64
//! then n_train + n_test records:
//!   sample_id u64 | task_label u32 | image H*W x f64 (row-major) | mask H*W x u8
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{Scenario, Stage, StageKind, StageSpec, Stream};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{OdexError, Result};
use crate::sample::{Image, Mask, Sample};

pub const STREAM_MAGIC: &str = "ODXS";
pub const STREAM_VERSION: u32 = 1;

fn encode_stage(stage: &Stage, height: usize, width: usize) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(STREAM_MAGIC.as_bytes());
    w.u32(STREAM_VERSION);
    w.u32(height as u32);
    w.u32(width as u32);
    w.u32(stage.spec.stage_index as u32);
    w.u32(stage.train.len() as u32);
    w.u32(stage.test.len() as u32);
    let (kind, weights, magnitude) = match stage.spec.kind {
        StageKind::Mixture(ws) => (0, ws, 0.0),
        StageKind::Transformed(t) => (1, [0.0; 3], t),
    };
    w.u32(kind);
    w.f64s(&weights);
    w.f64(magnitude);
    w.u64(stage.spec.seed);
    for s in stage.train.iter().chain(&stage.test) {
        w.u64(s.sample_id);
        w.u32(s.task_label);
        w.f64s(&s.image.data);
        w.bytes(&s.mask.data);
    }
    w.buf
}

pub fn write_stage(path: &Path, stage: &Stage, height: usize, width: usize) -> Result<()> {
    fs::write(path, encode_stage(stage, height, width))?;
    Ok(())
}

/// Reads one stage file, returning the stage and its image size.
pub fn read_stage(path: &Path) -> Result<(Stage, usize, usize)> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes, path);
    r.header(STREAM_MAGIC, STREAM_VERSION)?;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    if height == 0 || width == 0 {
        return Err(r.corrupt("zero image dimension"));
    }
    let stage_index = r.u32()? as usize;
    let n_train = r.u32()? as usize;
    let n_test = r.u32()? as usize;
    let kind = r.u32()?;
    let weights = r.f64s(3)?;
    let magnitude = r.f64()?;
    let seed = r.u64()?;
    let kind = match kind {
        0 => StageKind::Mixture([weights[0], weights[1], weights[2]]),
        1 => StageKind::Transformed(magnitude),
        k => return Err(r.corrupt(format!("unknown stage kind {k}"))),
    };
    let plane = height * width;
    let read_sample = |r: &mut ByteReader| -> Result<Sample> {
        let sample_id = r.u64()?;
        let task_label = r.u32()?;
        let image = r.f64s(plane)?;
        let mask = r.take(plane)?.to_vec();
        Ok(Sample {
            image: Image::new(height, width, image)?,
            mask: Mask::new(height, width, mask).map_err(|_| r.corrupt("non-binary mask"))?,
            task_label,
            sample_id,
        })
    };
    let train = (0..n_train).map(|_| read_sample(&mut r)).collect::<Result<Vec<_>>>()?;
    let test = (0..n_test).map(|_| read_sample(&mut r)).collect::<Result<Vec<_>>>()?;
    if !r.is_done() {
        return Err(r.corrupt("trailing bytes after last sample"));
    }
    Ok((
        Stage {
            spec: StageSpec {
                stage_index,
                kind,
                n_train,
                n_test,
                seed,
            },
            train,
            test,
        },
        height,
        width,
    ))
}

fn stage_path(dir: &Path, stage_index: usize) -> PathBuf {
    dir.join(format!("stage_{stage_index:03}.odxs"))
}

/// Writes `stage_001.odxs`, `stage_002.odxs`, ... and a `scenario.txt` tag.
pub fn write_stream(dir: &Path, stream: &Stream) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("scenario.txt"), format!("{}\n", stream.scenario.name()))?;
    for stage in &stream.stages {
        write_stage(&stage_path(dir, stage.spec.stage_index), stage, stream.height, stream.width)?;
    }
    Ok(())
}

pub fn read_stream(dir: &Path) -> Result<Stream> {
    let scenario = match fs::read_to_string(dir.join("scenario.txt")) {
        Ok(s) => Scenario::parse(&s)?,
        Err(_) => Scenario::ShiftingSource,
    };
    let mut stages = Vec::new();
    let mut size = None;
    for k in 1.. {
        let p = stage_path(dir, k);
        if !p.exists() {
            break;
        }
        let (stage, h, w) = read_stage(&p)?;
        match size {
            None => size = Some((h, w)),
            Some(s) if s != (h, w) => {
                return Err(OdexError::ShapeMismatch {
                    expected: format!("{}x{}", s.0, s.1),
                    actual: format!("{h}x{w} in {}", p.display()),
                })
            }
            _ => {}
        }
        stages.push(stage);
    }
    let (height, width) = size.ok_or_else(|| OdexError::MissingResults(dir.to_path_buf()))?;
    Ok(Stream {
        scenario,
        height,
        width,
        stages,
    })
}
