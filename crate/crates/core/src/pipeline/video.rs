use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genbackend::toy::ToyFace;
use crate::raster::Raster;
use crate::store::{self, BlobRef, Manifest};

const RAW_MAGIC: &[u8; 8] = b"RKVIDEO1";

/// Container encodings for assembled videos.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoCodec {
    /// Lossless: a header followed by every sample as little-endian f64.
    #[default]
    Raw,
    /// One 8-bit PNG per frame in a directory; samples are quantized.
    Png,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoMeta {
    pub codec: VideoCodec,
    pub fps: f64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Toy ground truth per frame, kept so toy analysis backends still work
    /// after a round trip through a file.
    pub annotations: Vec<Option<ToyFace>>,
}

#[derive(Clone, Debug)]
pub struct Video {
    pub frames: Vec<Raster<f64>>,
    pub fps: f64,
}

/// Manifest written next to a container: `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

fn check_frames(rasters: &[Raster<f64>], fps: f64) -> Result<(usize, usize, usize)> {
    let first = rasters
        .first()
        .ok_or_else(|| Error::EmptyInput("no frames to assemble".into()))?;
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::InvalidParameter(format!("fps must be > 0, got {fps}")));
    }
    let shape = first.shape();
    if let Some(t) = rasters.iter().position(|r| r.shape() != shape) {
        return Err(Error::ShapeMismatch(format!(
            "frame {t} has shape {:?}, expected {shape:?}",
            rasters[t].shape()
        )));
    }
    Ok(shape)
}

/// Writes `rasters` to `path` and records fps and frame count in the sidecar.
pub fn assemble_video(
    rasters: &[Raster<f64>],
    fps: f64,
    path: &Path,
    codec: VideoCodec,
) -> Result<VideoMeta> {
    let (width, height, channels) = check_frames(rasters, fps)?;
    let meta = VideoMeta {
        codec,
        fps,
        frames: rasters.len(),
        width,
        height,
        channels,
        annotations: rasters.iter().map(|r| r.annotation.clone()).collect(),
    };
    let file = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("no file name in {}", path.display())))?
        .to_string_lossy()
        .into_owned();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        store::ensure_dir(parent)?;
    }
    let mut manifest = Manifest::new("video", meta.clone());
    match codec {
        VideoCodec::Raw => {
            let mut bytes = Vec::with_capacity(40 + rasters.len() * width * height * channels * 8);
            bytes.extend_from_slice(RAW_MAGIC);
            for v in [width, height, channels, rasters.len()] {
                bytes.extend_from_slice(&(v as u64).to_le_bytes());
            }
            for r in rasters {
                for v in r.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
            manifest.blobs.insert(
                "frames".into(),
                BlobRef {
                    file,
                    shape: vec![rasters.len(), height, width, channels],
                    dtype: "f64le".into(),
                    sha256: store::sha256_hex(&bytes),
                },
            );
        }
        VideoCodec::Png => {
            if channels != 1 && channels != 3 {
                return Err(Error::ShapeMismatch(format!("PNG frames need 1 or 3 channels, got {channels}")));
            }
            store::ensure_dir(path)?;
            for (t, r) in rasters.iter().enumerate() {
                let name = format!("frame_{t:05}.png");
                let bytes = encode_png(r)?;
                let target = path.join(&name);
                fs::write(&target, &bytes).map_err(|e| Error::io(&target, e))?;
                manifest.blobs.insert(
                    format!("frame_{t:05}"),
                    BlobRef {
                        file: format!("{file}/{name}"),
                        shape: vec![height, width, channels],
                        dtype: "png8".into(),
                        sha256: store::sha256_hex(&bytes),
                    },
                );
            }
        }
    }
    store::write_json(&sidecar_path(path), &manifest)?;
    Ok(meta)
}

fn encode_png(r: &Raster<f64>) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let samples: Vec<u8> = r
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let color = if r.channels() == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&samples, r.width() as u32, r.height() as u32, color)
        .map_err(|e| Error::InvalidParameter(format!("PNG encoding failed: {e}")))?;
    Ok(out)
}

fn read_verified(path: &Path, blob: &BlobRef) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if store::sha256_hex(&bytes) != blob.sha256 {
        return Err(Error::HashMismatch(path.to_path_buf()));
    }
    Ok(bytes)
}

/// Reads a container written by [`assemble_video`].
pub fn read_video(path: &Path) -> Result<Video> {
    let side = sidecar_path(path);
    let manifest: Manifest<VideoMeta> = store::read_manifest(&side, "video")?;
    let m = &manifest.meta;
    if m.annotations.len() != m.frames {
        return Err(Error::format(&side, "annotation count differs from frame count"));
    }
    let dir = path.parent().unwrap_or(Path::new(""));
    let sample_count = m.width * m.height * m.channels;
    let frames: Vec<Vec<f64>> = match m.codec {
        VideoCodec::Raw => {
            let blob = manifest.blob("frames", &side)?;
            let bytes = read_verified(&dir.join(&blob.file), blob)?;
            let header = 8 + 4 * 8;
            if bytes.len() < header || &bytes[..8] != RAW_MAGIC {
                return Err(Error::format(path, "not a raw video container"));
            }
            let field = |i: usize| {
                u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes")) as usize
            };
            if [field(0), field(1), field(2), field(3)] != [m.width, m.height, m.channels, m.frames]
                || bytes.len() != header + m.frames * sample_count * 8
            {
                return Err(Error::format(path, "container header disagrees with sidecar"));
            }
            bytes[header..]
                .chunks_exact(sample_count * 8)
                .map(|frame| {
                    frame
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect()
                })
                .collect()
        }
        VideoCodec::Png => (0..m.frames)
            .map(|t| {
                let blob = manifest.blob(&format!("frame_{t:05}"), &side)?;
                let file = dir.join(&blob.file);
                let bytes = read_verified(&file, blob)?;
                let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
                    .map_err(|e| Error::format(&file, e))?;
                let raw = if m.channels == 1 {
                    img.into_luma8().into_raw()
                } else {
                    img.into_rgb8().into_raw()
                };
                if raw.len() != sample_count {
                    return Err(Error::format(&file, "frame size disagrees with sidecar"));
                }
                Ok(raw.into_iter().map(|v| f64::from(v) / 255.0).collect())
            })
            .collect::<Result<_>>()?,
    };
    let frames = frames
        .into_iter()
        .zip(&m.annotations)
        .map(|(data, ann)| {
            Ok(Raster::new(m.width, m.height, m.channels, data)?.with_annotation(ann.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Video { frames, fps: m.fps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genbackend::toy::{ToyFaceParams, ToyParam};
    use crate::genbackend::ToyGenerator;

    fn clip(count: usize) -> Vec<Raster<f64>> {
        let g = ToyGenerator::default();
        (0..count)
            .map(|t| g.render_params(&ToyFaceParams::midpoint().with(ToyParam::MouthOpen, 0.1 * t as f64)))
            .collect()
    }

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.rkv");
        let frames = clip(10);
        let meta = assemble_video(&frames, 25.0, &path, VideoCodec::Raw).unwrap();
        assert_eq!((meta.frames, meta.fps), (10, 25.0));
        let back = read_video(&path).unwrap();
        assert_eq!(back.fps, 25.0);
        assert_eq!(back.frames, frames);
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames");
        let frames = clip(3);
        assemble_video(&frames, 12.5, &path, VideoCodec::Png).unwrap();
        let back = read_video(&path).unwrap();
        assert_eq!(back.frames.len(), 3);
        for (a, b) in frames.iter().zip(&back.frames) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn empty_input_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = assemble_video(&[], 25.0, &dir.path().join("x.rkv"), VideoCodec::Raw);
        assert!(matches!(err, Err(Error::EmptyInput(_))));
    }

    #[test]
    fn tampering_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.rkv");
        assemble_video(&clip(2), 25.0, &path, VideoCodec::Raw).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_video(&path), Err(Error::HashMismatch(_))));
    }

    #[test]
    fn missing_video_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_video(&dir.path().join("none.rkv")), Err(Error::MissingArtifact(_))));
    }
}
