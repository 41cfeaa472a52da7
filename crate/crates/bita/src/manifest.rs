//! JSONL manifests of image-text pairs and the raw f32 image format.
//!
//! Each manifest line is `{"id": …, "image": …, "captions": […]}` where
//! `image` is either `synthetic:<base64 JSON scene>` (re-rendered on load) or
//! `raw:<path>` relative to the manifest's directory. A raw file is a
//! 12-byte header of `height, width, 3` as little-endian u32 followed by
//! `height·width·3` little-endian f32 values.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use bita_core::data::{Image, ImageTextPair, Scene};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, BitaError, Result};

const SYNTHETIC: &str = "synthetic:";
const RAW: &str = "raw:";

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    image: String,
    captions: Vec<String>,
}

pub fn write_raw_image(path: &Path, image: &Image) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + image.data().len() * 4);
    for v in [image.height() as u32, image.width() as u32, 3] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for &v in image.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_raw_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |msg: String| BitaError::RawImage {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 12 {
        return Err(bad("shorter than the 12-byte header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (word(0), word(1), word(2));
    if c != 3 {
        return Err(bad(format!("expected 3 channels, header says {c}")));
    }
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(12))
        .ok_or_else(|| bad("header dimensions overflow".into()))?;
    if bytes.len() - 12 != expected {
        return Err(bad(format!(
            "{h}x{w} image needs {expected} payload bytes, found {}",
            bytes.len() - 12
        )));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Image::new(h, w, data).map_err(|e| bad(e.to_string()))
}

pub fn encode_scene(scene: &Scene) -> String {
    let json = serde_json::to_vec(scene).expect("scenes always serialize");
    format!("{SYNTHETIC}{}", STANDARD.encode(json))
}

fn decode_image(id: &str, payload: &str, base: &Path) -> Result<(Image, Option<Scene>)> {
    let fail = |msg: String| BitaError::Image { id: id.to_string(), msg };
    if let Some(b64) = payload.strip_prefix(SYNTHETIC) {
        let json = STANDARD.decode(b64.trim()).map_err(|e| fail(format!("bad base64: {e}")))?;
        let scene: Scene = serde_json::from_slice(&json).map_err(|e| fail(format!("bad scene: {e}")))?;
        let image = scene.render().map_err(|e| fail(e.to_string()))?;
        Ok((image, Some(scene)))
    } else if let Some(rel) = payload.strip_prefix(RAW) {
        if rel.is_empty() {
            return Err(fail("empty raw image path".into()));
        }
        let path = base.join(rel);
        if !path.exists() {
            return Err(fail(format!("image payload {} not found", path.display())));
        }
        Ok((read_raw_image(&path)?, None))
    } else {
        Err(fail(format!("image must start with {SYNTHETIC} or {RAW}")))
    }
}

/// Reads a manifest, preserving line order. Blank lines are skipped.
pub fn load_manifest(path: &Path) -> Result<Vec<ImageTextPair>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |msg: String| BitaError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if rec.captions.is_empty() {
            return Err(malformed(format!("record {} has no captions", rec.id)));
        }
        let (image, scene) = decode_image(&rec.id, &rec.image, &base)?;
        out.push(ImageTextPair::new(rec.id, image, rec.captions, scene)?);
    }
    Ok(out)
}

/// Concatenation of several manifests in argument order.
pub fn load_manifests(paths: &[PathBuf]) -> Result<Vec<ImageTextPair>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(load_manifest(p)?);
    }
    Ok(all)
}

/// Writes a manifest. Pairs without a scene get a raw image file in
/// `<stem>.raw/` next to the manifest.
pub fn save_manifest(path: &Path, pairs: &[ImageTextPair]) -> Result<()> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("manifest");
    let raw_dir = format!("{stem}.raw");
    let mut text = String::new();
    for pair in pairs {
        let image = match &pair.scene {
            Some(scene) => encode_scene(scene),
            None => {
                let rel = format!("{raw_dir}/{}.f32", pair.id);
                fs::create_dir_all(base.join(&raw_dir)).map_err(io_err(base.join(&raw_dir)))?;
                write_raw_image(&base.join(&rel), &pair.image)?;
                format!("{RAW}{rel}")
            }
        };
        let rec = Record {
            id: pair.id.clone(),
            image,
            captions: pair.captions.clone(),
        };
        text.push_str(&serde_json::to_string(&rec).expect("records always serialize"));
        text.push('\n');
    }
    if !base.as_os_str().is_empty() {
        fs::create_dir_all(&base).map_err(io_err(&base))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}
