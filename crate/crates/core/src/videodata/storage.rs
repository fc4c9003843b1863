use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Video;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoHeader {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub dtype: String,
}

/// Writes `header.json` and `frames.bin` (frame-major little-endian f32) into `dir`.
pub fn write_video(dir: &Path, video: &Video) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = VideoHeader { t: video.t, c: video.c, h: video.h, w: video.w, dtype: "f32le".into() };
    let header_path = dir.join("header.json");
    fs::write(&header_path, serde_json::to_vec(&header)?).map_err(|e| Error::io(&header_path, e))?;
    let bytes: Vec<u8> = video.frames.iter().flat_map(|v| v.to_le_bytes()).collect();
    let frames_path = dir.join("frames.bin");
    fs::write(&frames_path, bytes).map_err(|e| Error::io(&frames_path, e))
}

pub fn read_video(dir: &Path) -> Result<Video> {
    let header_path = dir.join("header.json");
    let raw = fs::read(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: VideoHeader = serde_json::from_slice(&raw)?;
    if header.dtype != "f32le" {
        return Err(Error::Validation(format!(
            "{}: unsupported dtype `{}`",
            header_path.display(),
            header.dtype
        )));
    }
    let frames_path = dir.join("frames.bin");
    let bytes = fs::read(&frames_path).map_err(|e| Error::io(&frames_path, e))?;
    let expected = header.t * header.c * header.h * header.w * 4;
    if bytes.len() != expected {
        return Err(Error::Validation(format!(
            "{}: expected {expected} bytes for {}x{}x{}x{}, found {}",
            frames_path.display(),
            header.t,
            header.c,
            header.h,
            header.w,
            bytes.len()
        )));
    }
    let frames = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Video::new(header.t, header.c, header.h, header.w, frames)
}
