//! In-memory video clips and their on-disk forms: numbered PNG frames,
//! animated GIFs and side-by-side comparison strips.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::gif::{GifEncoder, Repeat};
use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{Delay, Frame, ImageEncoder, RgbImage, RgbaImage};

use crate::error::{invalid, io_err, Error, Result};
use crate::tensor::Tensor;

/// Frames as [3,H,W] tensors with values in [0, 1]; all frames share H and W.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Vec<Tensor>,
}

impl VideoClip {
    pub fn new(frames: Vec<Tensor>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| invalid("VideoClip", "clip has no frames"))?;
        let shape = first.shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(invalid("VideoClip", format!("frames must be [3,H,W], got {shape:?}")));
        }
        if let Some((t, f)) = frames.iter().enumerate().find(|(_, f)| f.shape() != shape) {
            return Err(invalid(
                "VideoClip",
                format!("frame {t} has shape {:?}, frame 0 has {shape:?}", f.shape()),
            ));
        }
        Ok(VideoClip { frames })
    }

    /// Clip of `n` frames from a batch tensor [N,3,H,W].
    pub fn from_batch(batch: &Tensor) -> Result<Self> {
        let s = batch.shape();
        if s.len() != 4 {
            return Err(invalid("VideoClip::from_batch", format!("expected [N,3,H,W], got {s:?}")));
        }
        let frames = (0..s[0])
            .map(|i| batch.narrow0(i, 1).and_then(|t| t.reshape(&s[1..])))
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames[0].shape()[2]
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Tensor {
        &self.frames[t]
    }

    pub fn into_frames(self) -> Vec<Tensor> {
        self.frames
    }

    /// Frames stacked to [N,3,H,W] in the given order.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let parts = indices
            .iter()
            .map(|&i| {
                let f = self
                    .frames
                    .get(i)
                    .ok_or_else(|| invalid("VideoClip::batch", format!("frame {i} out of range")))?;
                f.clone().reshape(&[1, 3, self.height(), self.width()])
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack0(&parts)
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        VideoClip {
            frames: self.frames.iter().map(quantize).collect(),
        }
    }

    /// Loads every `*.png` in `dir`, ordered by file name.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| io_err(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(invalid("VideoClip::load_dir", format!("no PNG frames in {}", dir.display())));
        }
        Self::new(paths.iter().map(|p| load_png(p)).collect::<Result<Vec<_>>>()?)
    }

    /// Loads a directory of frames or a single PNG as a one-frame clip.
    pub fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Self::load_dir(path)
        } else {
            Self::new(vec![load_png(path)?])
        }
    }

    /// Writes `frame_000.png`, `frame_001.png`, ... into `dir`.
    pub fn save_pngs(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        self.frames
            .iter()
            .enumerate()
            .map(|(t, f)| {
                let p = dir.join(frame_name(t));
                save_png(&p, f)?;
                Ok(p)
            })
            .collect()
    }

    pub fn save_gif(&self, path: &Path, delay_ms: u32) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
        let mut enc = GifEncoder::new_with_speed(BufWriter::new(file), 10);
        let img_err = |source| Error::Image {
            path: path.display().to_string(),
            source,
        };
        enc.set_repeat(Repeat::Infinite).map_err(img_err)?;
        for f in &self.frames {
            let rgb = to_rgb_image(f)?;
            let rgba: RgbaImage = image::DynamicImage::ImageRgb8(rgb).to_rgba8();
            enc.encode_frame(Frame::from_parts(rgba, 0, 0, Delay::from_numer_denom_ms(delay_ms, 1)))
                .map_err(img_err)?;
        }
        Ok(())
    }
}

pub fn frame_name(t: usize) -> String {
    format!("frame_{t:03}.png")
}

fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| to_u8(v) as f64 / 255.0)
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// [3,H,W] tensor to an 8-bit RGB image.
pub fn to_rgb_image(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(invalid("to_rgb_image", format!("expected [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    let mut buf = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            buf.push(to_u8(d[c * h * w + p]));
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized from shape"))
}

pub fn from_rgb_image(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    })
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.display().to_string(),
        source,
    })?;
    Ok(from_rgb_image(&img.to_rgb8()))
}

/// PNG with a fixed encoder configuration so output bytes are reproducible.
pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let img = to_rgb_image(t)?;
    let mut out = Vec::new();
    PngEncoder::new_with_quality(&mut out, CompressionType::Default, FilterType::Sub)
        .write_image(img.as_raw(), img.width(), img.height(), image::ColorType::Rgb8)
        .map_err(|e| Error::Format(format!("png encoding failed: {e}")))?;
    Ok(out)
}

pub fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_png(t)?).map_err(|e| io_err(path, e))
}

/// Places [3,H,W] images left to right, separated by `gap` white columns.
pub fn hstack(images: &[&Tensor], gap: usize) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| invalid("hstack", "no images"))?;
    let h = first.shape()[1];
    for im in images {
        let s = im.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != h {
            return Err(invalid("hstack", format!("expected [3,{h},W], got {s:?}")));
        }
    }
    let total_w = images.iter().map(|im| im.shape()[2]).sum::<usize>() + gap * (images.len() - 1);
    let mut out = Tensor::ones(&[3, h, total_w]);
    let mut x0 = 0;
    for im in images {
        let w = im.shape()[2];
        for c in 0..3 {
            for y in 0..h {
                let src = &im.data()[(c * h + y) * w..(c * h + y + 1) * w];
                let dst = (c * h + y) * total_w + x0;
                out.data_mut()[dst..dst + w].copy_from_slice(src);
            }
        }
        x0 += w + gap;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[3, h, w], |i| (i % 256) as f64 / 255.0)
    }

    #[test]
    fn rejects_mixed_shapes_and_empty() {
        assert!(VideoClip::new(vec![]).is_err());
        assert!(VideoClip::new(vec![ramp(4, 4), ramp(4, 5)]).is_err());
        assert!(VideoClip::new(vec![Tensor::zeros(&[1, 4, 4])]).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_for_quantized_frames() {
        let dir = tempfile::tempdir().unwrap();
        let clip = VideoClip::new(vec![ramp(8, 6), ramp(8, 6).map(|v| 1.0 - v)]).unwrap();
        clip.save_pngs(dir.path()).unwrap();
        let back = VideoClip::load_dir(dir.path()).unwrap();
        assert_eq!(back, clip.quantized());
        assert_eq!(encode_png(clip.frame(0)).unwrap(), encode_png(back.frame(0)).unwrap());
    }

    #[test]
    fn batch_and_from_batch_invert() {
        let clip = VideoClip::new(vec![ramp(4, 4), ramp(4, 4).map(|v| v * 0.5)]).unwrap();
        let b = clip.batch(&[1, 0]).unwrap();
        assert_eq!(b.shape(), &[2, 3, 4, 4]);
        let back = VideoClip::from_batch(&b).unwrap();
        assert_eq!(back.frame(0), clip.frame(1));
        assert!(clip.batch(&[2]).is_err());
    }

    #[test]
    fn gif_and_hstack() {
        let dir = tempfile::tempdir().unwrap();
        let clip = VideoClip::new(vec![ramp(8, 8), ramp(8, 8)]).unwrap();
        let p = dir.path().join("a.gif");
        clip.save_gif(&p, 100).unwrap();
        assert!(fs::metadata(&p).unwrap().len() > 0);
        let s = hstack(&[clip.frame(0), clip.frame(1)], 2).unwrap();
        assert_eq!(s.shape(), &[3, 8, 18]);
        assert_eq!(s.data()[8], 1.0);
        assert_eq!(s.data()[10], clip.frame(1).data()[0]);
    }
}
