//! Video container: a directory holding a manifest, one binary PPM per
//! frame, and a raw little-endian f32 tensor with the exact values.
//!
//! Reads prefer the raw tensor; the PPM path reproduces values to within
//! 1/255 quantization. The manifest's frame count must match the files
//! actually present.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::grid::{Frame, VideoClip};

const MANIFEST: &str = "manifest.txt";
const TENSOR: &str = "tensor.bin";

fn frame_file(i: usize) -> String {
    format!("frame_{i:04}.ppm")
}

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8
}

fn from_byte(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

pub fn write_ppm_frame(path: &Path, frame: &Frame) -> Result<()> {
    let (c, h, w) = frame.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch("PPM frames need 3 channels".into()));
    }
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf.push(to_byte(frame[[ch, y, x]]));
            }
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_ppm_frame(path: &Path) -> Result<Frame> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    // header: "P6" <ws> width <ws> height <ws> maxval <single ws> raster
    let mut fields = Vec::new();
    let mut at = 0usize;
    while fields.len() < 4 && at < data.len() {
        while at < data.len() && data[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < data.len() && !data[at].is_ascii_whitespace() {
            at += 1;
        }
        fields.push(
            std::str::from_utf8(&data[start..at])
                .map_err(|_| Error::Parse("bad PPM header".into()))?
                .to_string(),
        );
    }
    if fields.len() != 4 || fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::Parse("not a binary 8-bit PPM".into()));
    }
    let w: usize = fields[1].parse().map_err(|_| Error::Parse("bad PPM width".into()))?;
    let h: usize = fields[2].parse().map_err(|_| Error::Parse("bad PPM height".into()))?;
    at += 1; // single whitespace after maxval
    let raster = &data[at..];
    if raster.len() != 3 * h * w {
        return Err(Error::Parse(format!(
            "PPM raster has {} bytes, expected {}",
            raster.len(),
            3 * h * w
        )));
    }
    let mut frame = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                frame[[ch, y, x]] = from_byte(raster[(y * w + x) * 3 + ch]);
            }
        }
    }
    Ok(frame)
}

/// Writes the container directory, creating it if needed.
pub fn write_video(dir: &Path, clip: &VideoClip) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (h, w) = clip.dims();
    let manifest = format!(
        "frames = {}\nheight = {h}\nwidth = {w}\nfps = {}\ncaption = {}\nvalue_range = -1..1\n",
        clip.len(),
        clip.fps,
        clip.caption
    );
    std::fs::write(dir.join(MANIFEST), manifest)?;

    let mut raw = Vec::with_capacity(clip.frames.len() * 4);
    for v in clip.frames.iter() {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(dir.join(TENSOR), raw)?;

    for i in 0..clip.len() {
        write_ppm_frame(&dir.join(frame_file(i)), &clip.frame(i).to_owned())?;
    }
    Ok(())
}

struct Manifest {
    frames: usize,
    height: usize,
    width: usize,
    fps: f32,
    caption: String,
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut frames = None;
    let mut height = None;
    let mut width = None;
    let mut fps = None;
    let mut caption = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("manifest line '{line}'")))?;
        let value = value.trim();
        match key.trim() {
            "frames" => frames = Some(value.parse().map_err(|_| Error::Parse("frames".into()))?),
            "height" => height = Some(value.parse().map_err(|_| Error::Parse("height".into()))?),
            "width" => width = Some(value.parse().map_err(|_| Error::Parse("width".into()))?),
            "fps" => fps = Some(value.parse().map_err(|_| Error::Parse("fps".into()))?),
            "caption" => caption = Some(value.to_string()),
            "value_range" => {
                if value != "-1..1" {
                    return Err(Error::Parse(format!("unsupported value_range '{value}'")));
                }
            }
            other => return Err(Error::Parse(format!("unknown manifest key '{other}'"))),
        }
    }
    Ok(Manifest {
        frames: frames.ok_or_else(|| Error::Parse("manifest missing 'frames'".into()))?,
        height: height.ok_or_else(|| Error::Parse("manifest missing 'height'".into()))?,
        width: width.ok_or_else(|| Error::Parse("manifest missing 'width'".into()))?,
        fps: fps.unwrap_or(crate::data::DEFAULT_FPS),
        caption: caption.unwrap_or_default(),
    })
}

/// Reads a container. The raw tensor is preferred; frame images are the
/// fallback and quantize values to 1/255.
pub fn read_video(dir: &Path) -> Result<VideoClip> {
    let manifest = parse_manifest(&std::fs::read_to_string(dir.join(MANIFEST))?)?;
    let (n, h, w) = (manifest.frames, manifest.height, manifest.width);

    let present = (0..n).filter(|i| dir.join(frame_file(*i)).exists()).count();
    let extra = dir.join(frame_file(n)).exists();
    if present != n || extra {
        return Err(Error::Parse(format!(
            "manifest says {n} frames but {} image files present",
            if extra { format!(">{n}") } else { present.to_string() }
        )));
    }

    let tensor_path = dir.join(TENSOR);
    let frames = if tensor_path.exists() {
        let raw = std::fs::read(&tensor_path)?;
        let expect = n * 3 * h * w * 4;
        if raw.len() != expect {
            return Err(Error::Parse(format!(
                "tensor.bin has {} bytes, expected {expect}",
                raw.len()
            )));
        }
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Array4::from_shape_vec((n, 3, h, w), values).expect("shape checked above")
    } else {
        let mut frames = Array4::zeros((n, 3, h, w));
        for i in 0..n {
            let frame = read_ppm_frame(&dir.join(frame_file(i)))?;
            if frame.dim() != (3, h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "frame {i} is {:?}, manifest says (3, {h}, {w})",
                    frame.dim()
                )));
            }
            frames.index_axis_mut(ndarray::Axis(0), i).assign(&frame);
        }
        frames
    };
    VideoClip::new(frames, manifest.fps, manifest.caption)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_dataset;
    use tempfile::tempdir;

    #[test]
    fn write_read_round_trip_via_raw_tensor() {
        let dir = tempdir().unwrap();
        let clip = make_dataset(1, 3, 4, 16, 16).unwrap().remove(0);
        write_video(dir.path(), &clip).unwrap();
        let back = read_video(dir.path()).unwrap();
        assert_eq!(back.frames, clip.frames);
        assert_eq!(back.caption, clip.caption);
        assert_eq!(back.fps, clip.fps);
    }

    #[test]
    fn image_only_read_quantizes_within_one_step() {
        let dir = tempdir().unwrap();
        let clip = make_dataset(1, 4, 3, 16, 16).unwrap().remove(0);
        write_video(dir.path(), &clip).unwrap();
        std::fs::remove_file(dir.path().join(TENSOR)).unwrap();
        let back = read_video(dir.path()).unwrap();
        let max_err = back
            .frames
            .iter()
            .zip(clip.frames.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 255.0 + 1e-6, "max err {max_err}");
    }

    #[test]
    fn frame_count_mismatch_is_an_error() {
        let dir = tempdir().unwrap();
        let clip = make_dataset(1, 5, 4, 16, 16).unwrap().remove(0);
        write_video(dir.path(), &clip).unwrap();
        std::fs::remove_file(dir.path().join(frame_file(2))).unwrap();
        assert!(read_video(dir.path()).is_err());
    }

    #[test]
    fn extra_frame_is_an_error() {
        let dir = tempdir().unwrap();
        let clip = make_dataset(1, 6, 2, 16, 16).unwrap().remove(0);
        write_video(dir.path(), &clip).unwrap();
        std::fs::copy(dir.path().join(frame_file(0)), dir.path().join(frame_file(2))).unwrap();
        assert!(read_video(dir.path()).is_err());
    }

    #[test]
    fn ppm_frame_round_trip() {
        let dir = tempdir().unwrap();
        let clip = make_dataset(1, 7, 1, 16, 16).unwrap().remove(0);
        let path = dir.path().join("f.ppm");
        write_ppm_frame(&path, &clip.frame_owned(0)).unwrap();
        let back = read_ppm_frame(&path).unwrap();
        assert_eq!(back.dim(), (3, 16, 16));
        let max_err = back
            .iter()
            .zip(clip.frame(0).iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 255.0 + 1e-6);
    }

    #[test]
    fn rejects_non_ppm() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P3\n2 2\n255\n...").unwrap();
        assert!(read_ppm_frame(&path).is_err());
    }
}
