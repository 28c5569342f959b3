//! Per-split dataset containers and their JSON-lines manifests.
//!
//! Container layout (little-endian):
//!
//! ```text
//! "PFSDATA1"
//! u64 dataset_seed, u32 count
//! count x (u64 sample_id, u64 scene_seed, u64 offset, u64 length)
//! payloads; offsets count from the end of the index
//! ```
//!
//! A payload is `u32 n_boxes` then `(cx, cy, l, w, yaw: f32, class: u32)` per
//! box, `u32 beam_count, u32 n_points` then `(x, y, z, intensity, beam)` f32
//! quintuples, and `u32 n_views, u32 h, u32 w` then raw `[3, h, w]` f32 planes
//! per view.

use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SceneConfig;
use crate::error::{PfsError, Result};
use crate::scene::{generate_scene, CameraImage, GroundBox, LidarPoint, PointCloud, SceneSample, Weather};
use crate::seeding::scene_seed;

pub const DATA_MAGIC: &[u8; 8] = b"PFSDATA1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    /// Validation ids live in a disjoint range so both splits share one seed.
    pub fn id_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1 << 32,
        }
    }

    pub fn container_file(self) -> String {
        format!("{}.pfsd", self.name())
    }

    pub fn manifest_file(self) -> String {
        format!("{}.manifest.jsonl", self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: u64,
    pub seed: u64,
    pub offset: u64,
    pub length: u64,
    pub boxes: usize,
    pub points: usize,
}

/// Generate `count` scenes of a split, optionally on a worker pool.
pub fn generate_split(dataset_seed: u64, split: Split, count: usize, cfg: &SceneConfig, workers: usize) -> Result<Vec<SceneSample>> {
    let ids: Vec<u64> = (0..count as u64).map(|i| split.id_offset() + i).collect();
    run_pool(workers, || ids.par_iter().map(|&id| generate_scene(dataset_seed, id, cfg)).collect())
}

/// Run `f` on a dedicated pool of `workers` threads (1 = current thread).
pub fn run_pool<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().expect("thread pool");
    pool.install(f)
}

fn encode_sample(s: &SceneSample, out: &mut Vec<u8>) {
    let put_u32 = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
    let put_f32 = |out: &mut Vec<u8>, v: f32| out.extend_from_slice(&v.to_le_bytes());
    put_u32(out, s.boxes.len() as u32);
    for b in &s.boxes {
        for v in [b.center[0], b.center[1], b.size[0], b.size[1], b.yaw] {
            put_f32(out, v);
        }
        put_u32(out, b.class_id as u32);
    }
    put_u32(out, s.cloud.beam_count);
    put_u32(out, s.cloud.points.len() as u32);
    for p in &s.cloud.points {
        for v in [p.x, p.y, p.z, p.intensity, p.beam as f32] {
            put_f32(out, v);
        }
    }
    let (h, w) = s.images.first().map_or((0, 0), |i| (i.h, i.w));
    put_u32(out, s.images.len() as u32);
    put_u32(out, h as u32);
    put_u32(out, w as u32);
    for img in &s.images {
        for &v in &img.pixels {
            put_f32(out, v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(PfsError::Format("dataset container truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode_sample(sample_id: u64, bytes: &[u8]) -> Result<SceneSample> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let nb = r.u32()? as usize;
    let mut boxes = Vec::with_capacity(nb);
    for _ in 0..nb {
        let (cx, cy, l, w, yaw) = (r.f32()?, r.f32()?, r.f32()?, r.f32()?, r.f32()?);
        boxes.push(GroundBox { center: [cx, cy], size: [l, w], yaw, class_id: r.u32()? as usize });
    }
    let beam_count = r.u32()?;
    let np = r.u32()? as usize;
    let mut points = Vec::with_capacity(np);
    for _ in 0..np {
        let (x, y, z, intensity, beam) = (r.f32()?, r.f32()?, r.f32()?, r.f32()?, r.f32()?);
        points.push(LidarPoint { x, y, z, intensity, beam: beam as u32 });
    }
    let (nv, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let mut images = Vec::with_capacity(nv);
    for view in 0..nv {
        let pixels = (0..3 * h * w).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        images.push(CameraImage { view, h, w, pixels });
    }
    Ok(SceneSample { sample_id, boxes, cloud: PointCloud { points, beam_count }, images, weather: Weather::Clean })
}

/// Container bytes and manifest records for a split.
pub fn encode_container(dataset_seed: u64, samples: &[SceneSample]) -> (Vec<u8>, Vec<ManifestRecord>) {
    let mut payload = Vec::new();
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let offset = payload.len() as u64;
        encode_sample(s, &mut payload);
        records.push(ManifestRecord {
            sample_id: s.sample_id,
            seed: scene_seed(dataset_seed, s.sample_id),
            offset,
            length: payload.len() as u64 - offset,
            boxes: s.boxes.len(),
            points: s.cloud.len(),
        });
    }
    let mut out = Vec::with_capacity(payload.len() + 32 * records.len() + 20);
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&dataset_seed.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in &records {
        for v in [r.sample_id, r.seed, r.offset, r.length] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&payload);
    (out, records)
}

pub fn decode_container(bytes: &[u8]) -> Result<(u64, Vec<SceneSample>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != DATA_MAGIC {
        return Err(PfsError::Format("not a dataset container (bad magic)".into()));
    }
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    let mut index = Vec::with_capacity(count);
    for _ in 0..count {
        index.push((r.u64()?, r.u64()?, r.u64()? as usize, r.u64()? as usize));
    }
    let base = r.pos;
    let mut samples = Vec::with_capacity(count);
    for (id, _, off, len) in index {
        let start = base + off;
        let end = start.checked_add(len).filter(|&e| e <= bytes.len());
        let Some(end) = end else {
            return Err(PfsError::Format(format!("sample {id} extends past end of container")));
        };
        samples.push(decode_sample(id, &bytes[start..end])?);
    }
    Ok((seed, samples))
}

pub fn write_split(dir: &Path, split: Split, dataset_seed: u64, samples: &[SceneSample]) -> Result<Vec<ManifestRecord>> {
    std::fs::create_dir_all(dir)?;
    let (bytes, records) = encode_container(dataset_seed, samples);
    std::fs::write(dir.join(split.container_file()), bytes)?;
    let mut m = BufWriter::new(std::fs::File::create(dir.join(split.manifest_file()))?);
    for r in &records {
        serde_json::to_writer(&mut m, r)?;
        m.write_all(b"\n")?;
    }
    m.flush()?;
    Ok(records)
}

pub fn read_split(dir: &Path, split: Split) -> Result<Vec<SceneSample>> {
    let path = dir.join(split.container_file());
    let bytes = std::fs::read(&path)
        .map_err(|e| PfsError::Dependency(format!("dataset split {} not readable at {}: {e}", split.name(), path.display())))?;
    Ok(decode_container(&bytes)?.1)
}

pub fn read_manifest(dir: &Path, split: Split) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(dir.join(split.manifest_file()))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
