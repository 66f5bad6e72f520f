//! PNG and WAV codecs for the on-disk dataset and generated samples.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::synthdata::{FaceImage, Waveform};

pub fn write_png(path: &Path, img: &FaceImage) -> Result<()> {
    let r = img.resolution as u32;
    let buf: RgbImage = ImageBuffer::from_fn(r, r, |x, y| {
        let px = |c| (img.at(c, y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn read_png(path: &Path) -> Result<FaceImage> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    if w != h {
        return Err(Error::Input(format!("{} is {w}x{h}, expected a square image", path.display())));
    }
    let r = w as usize;
    let mut pixels = vec![0.0f32; 3 * r * r];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            pixels[(c * r + y as usize) * r + x as usize] = p[c] as f32 / 255.0;
        }
    }
    FaceImage::new(pixels, r)
}

/// Tiles images into one sheet; each row of `rows` is laid out left to right.
pub fn write_contact_sheet(path: &Path, rows: &[Vec<FaceImage>]) -> Result<()> {
    let res = rows
        .iter()
        .flatten()
        .map(|i| i.resolution)
        .next()
        .ok_or_else(|| Error::Input("contact sheet needs at least one image".into()))?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gap = 2u32;
    let cell = res as u32 + gap;
    let mut sheet: RgbImage =
        ImageBuffer::from_pixel(cols as u32 * cell + gap, rows.len() as u32 * cell + gap, Rgb([255, 255, 255]));
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            for y in 0..res {
                for x in 0..res {
                    let px = |c| (img.at(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8;
                    sheet.put_pixel(
                        gap + ci as u32 * cell + x as u32,
                        gap + ri as u32 * cell + y as u32,
                        Rgb([px(0), px(1), px(2)]),
                    );
                }
            }
        }
    }
    sheet
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    for &s in &wave.samples {
        let q = (s * i16::MAX as f32).round().clamp(i16::MIN as f32, i16::MAX as f32) as i16;
        w.write_sample(q).map_err(|e| Error::Wav(e.to_string()))?;
    }
    w.finalize().map_err(|e| Error::Wav(e.to_string()))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut r = hound::WavReader::open(path)
        .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Input(format!(
            "{}: expected 16-bit PCM mono",
            path.display()
        )));
    }
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / i16::MAX as f32))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Wav(e.to_string()))?;
    let duration = samples.len() as f64 / spec.sample_rate as f64;
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
        duration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_identity, render_face, synth_speech};

    #[test]
    fn quantized_values_survive_disk() {
        let dir = tempfile::tempdir().unwrap();
        let id = generate_identity(4);
        let img = render_face(&id, 1, 20).unwrap().quantized();
        let p = dir.path().join("f.png");
        write_png(&p, &img).unwrap();
        assert_eq!(read_png(&p).unwrap(), img);

        let wave = synth_speech(&id, 0.1, 16_000, 2).unwrap().quantized();
        let p = dir.path().join("a.wav");
        write_wav(&p, &wave).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.samples, wave.samples);
        assert_eq!(back.sample_rate, 16_000);
    }
}
