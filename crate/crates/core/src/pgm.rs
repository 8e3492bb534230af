//! 8-bit binary PGM export for frames, frame strips and heatmaps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn write_pgm_bytes(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), w * h);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(format!("P5\n{w} {h}\n255\n").as_bytes())
        .and_then(|_| out.write_all(pixels))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

fn to_byte(v: f32, lo: f32, hi: f32) -> u8 {
    let x = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (x * 255.0).round() as u8
}

/// Writes one grayscale image with values mapped linearly from `[-1, 1]`.
pub fn write_frame(path: &Path, w: usize, h: usize, data: &[f32]) -> Result<()> {
    let pixels: Vec<u8> = data.iter().map(|&v| to_byte(v, -1.0, 1.0)).collect();
    write_pgm_bytes(path, w, h, &pixels)
}

/// Dumps a clip tensor `(f, ch, h, w)` as `frame_%03d.pgm` under `dir`,
/// using channel 0. Returns the written paths.
pub fn write_clip_frames(dir: &Path, clip: &Tensor) -> Result<Vec<PathBuf>> {
    let d = clip.dims();
    if d.len() != 4 {
        return Err(Error::Shape {
            op: "write_clip_frames",
            detail: format!("expected (f,ch,h,w), got {d:?}"),
        });
    }
    let (f, ch, h, w) = (d[0], d[1], d[2], d[3]);
    let mut paths = Vec::with_capacity(f);
    for t in 0..f {
        let path = dir.join(format!("frame_{t:03}.pgm"));
        let base = t * ch * h * w;
        write_frame(&path, w, h, &clip.data()[base..base + h * w])?;
        paths.push(path);
    }
    Ok(paths)
}

/// Writes a clip as one horizontal strip of frames separated by a white
/// 1-pixel gutter.
pub fn write_strip(path: &Path, clip: &Tensor) -> Result<()> {
    let d = clip.dims();
    if d.len() != 4 {
        return Err(Error::Shape {
            op: "write_strip",
            detail: format!("expected (f,ch,h,w), got {d:?}"),
        });
    }
    let (f, ch, h, w) = (d[0], d[1], d[2], d[3]);
    let strip_w = f * w + (f - 1);
    let mut pixels = vec![255u8; strip_w * h];
    for t in 0..f {
        let base = t * ch * h * w;
        let x_off = t * (w + 1);
        for y in 0..h {
            for x in 0..w {
                pixels[y * strip_w + x_off + x] = to_byte(clip.data()[base + y * w + x], -1.0, 1.0);
            }
        }
    }
    write_pgm_bytes(path, strip_w, h, &pixels)
}

/// Writes a heatmap `(h, w)` scaled so its maximum maps to white.
pub fn write_heatmap(path: &Path, map: &Tensor) -> Result<()> {
    let d = map.dims();
    if d.len() != 2 {
        return Err(Error::Shape {
            op: "write_heatmap",
            detail: format!("expected (h,w), got {d:?}"),
        });
    }
    let max = map.data().iter().copied().fold(0.0f32, f32::max).max(1e-12);
    let pixels: Vec<u8> = map.data().iter().map(|&v| to_byte(v, 0.0, max)).collect();
    write_pgm_bytes(path, d[1], d[0], &pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_dump_produces_expected_headers_and_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let clip = Tensor::new(vec![2, 1, 4, 4], vec![0.0; 32]).unwrap();
        let paths = write_clip_frames(dir.path(), &clip).unwrap();
        assert_eq!(paths.len(), 2);
        assert!(paths[0].ends_with("frame_000.pgm"));
        let bytes = std::fs::read(&paths[0]).unwrap();
        assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
        assert_eq!(bytes.len(), b"P5\n4 4\n255\n".len() + 16);
        // value 0.0 maps to mid-gray
        assert_eq!(bytes[bytes.len() - 1], 128);
    }

    #[test]
    fn strip_concatenates_frames_horizontally() {
        let dir = tempfile::tempdir().unwrap();
        let clip = Tensor::new(vec![3, 1, 2, 2], vec![-1.0; 12]).unwrap();
        let path = dir.path().join("strip.pgm");
        write_strip(&path, &clip).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n8 2\n255\n"));
    }
}
