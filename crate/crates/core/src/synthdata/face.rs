use rand_distr::{Distribution, Normal};

use super::Identity;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

pub const MIN_RESOLUTION: usize = 16;
const PIXEL_NOISE: f64 = 0.02;

const BACKGROUND: [f64; 3] = [0.82, 0.86, 0.90];
const SKIN_LIGHT: [f64; 3] = [0.96, 0.84, 0.72];
const SKIN_DARK: [f64; 3] = [0.40, 0.26, 0.17];
const EYE: [f64; 3] = [0.08, 0.08, 0.10];
const BROW: [f64; 3] = [0.20, 0.12, 0.08];
const MOUTH: [f64; 3] = [0.55, 0.20, 0.20];

const WRINKLE_TOP: f64 = 0.20;
const WRINKLE_SPACING: f64 = 0.035;

/// Square RGB image, channel-major (`[3, H, W]`), values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceImage {
    pub pixels: Vec<f32>,
    pub resolution: usize,
}

impl FaceImage {
    pub const CHANNELS: usize = 3;

    pub fn new(pixels: Vec<f32>, resolution: usize) -> Result<Self> {
        if pixels.len() != Self::CHANNELS * resolution * resolution {
            return Err(Error::Input(format!(
                "{} pixels do not form a 3x{resolution}x{resolution} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Input("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { pixels, resolution })
    }

    pub fn filled(resolution: usize, value: f32) -> Self {
        Self {
            pixels: vec![value; Self::CHANNELS * resolution * resolution],
            resolution,
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        let r = self.resolution;
        self.pixels[(c * r + y) * r + x]
    }

    pub fn is_valid(&self) -> bool {
        self.pixels.len() == Self::CHANNELS * self.resolution * self.resolution
            && self.pixels.iter().all(|p| (0.0..=1.0).contains(p))
    }

    /// Rounds to the 8-bit grid used on disk.
    pub fn quantized(&self) -> Self {
        Self {
            pixels: self
                .pixels
                .iter()
                .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) / 255.0)
                .collect(),
            resolution: self.resolution,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let r = self.resolution;
        Tensor::new(
            &[Self::CHANNELS, r, r],
            self.pixels.iter().map(|&p| T::of(p as f64)).collect(),
        )
    }

    /// Builds an image from a `[3, R, R]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        assert_eq!(t.ndim(), 3);
        assert_eq!(t.dim(0), Self::CHANNELS);
        Self {
            pixels: t.data().iter().map(|x| x.f64().clamp(0.0, 1.0) as f32).collect(),
            resolution: t.dim(1),
        }
    }

    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.resolution, other.resolution);
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.pixels.len() as f64
    }
}

/// Number of forehead lines drawn for `age`.
fn wrinkle_count(age: f64) -> usize {
    ((age * 5.0).floor() as usize).min(5)
}

/// Pixel rows holding the forehead lines of `identity` at `resolution`.
pub fn wrinkle_rows(identity: &Identity, resolution: usize) -> Vec<usize> {
    (0..wrinkle_count(identity.age))
        .map(|k| {
            let v = WRINKLE_TOP + k as f64 * WRINKLE_SPACING;
            (v * resolution as f64 - 0.5).round() as usize
        })
        .collect()
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Noise-free portrait.
///
/// Head aspect ratio follows `shape[0]`, skin tone follows `hue`, eye spacing
/// follows `shape[1]`, brow thickness follows `gender` and the forehead holds
/// `floor(age * 5)` horizontal lines.
pub fn render_face_clean(identity: &Identity, resolution: usize) -> Result<FaceImage> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::Config(format!(
            "face resolution {resolution} is below the minimum of {MIN_RESOLUTION}"
        )));
    }
    let r = resolution as f64;
    let px = 0.5 / r;
    let skin = lerp(SKIN_LIGHT, SKIN_DARK, identity.hue);
    let wrinkle = [skin[0] * 0.55, skin[1] * 0.55, skin[2] * 0.55];
    let (cx, cy) = (0.5, 0.54);
    let ry = 0.40;
    let rx = 0.30 * (1.0 + 0.25 * identity.shape[0]);
    let eye_dx = 0.10 + 0.05 * identity.shape[1];
    let (eye_y, eye_r) = (0.48, 0.045);
    let (brow_y, brow_half_w) = (0.40, 0.07);
    let brow_half_t = 0.012 + 0.028 * identity.gender as f64;
    let lines: Vec<f64> = (0..wrinkle_count(identity.age))
        .map(|k| WRINKLE_TOP + k as f64 * WRINKLE_SPACING)
        .collect();

    let mut pixels = vec![0.0f32; 3 * resolution * resolution];
    for y in 0..resolution {
        let v = (y as f64 + 0.5) / r;
        for x in 0..resolution {
            let u = (x as f64 + 0.5) / r;
            let in_head = ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2) <= 1.0;
            let mut color = if in_head { skin } else { BACKGROUND };
            if in_head {
                if (u - 0.5).abs() <= 0.12 && lines.iter().any(|&l| (v - l).abs() <= px) {
                    color = wrinkle;
                }
                for side in [-1.0, 1.0] {
                    let ex = 0.5 + side * eye_dx;
                    if (u - ex).abs() <= brow_half_w && (v - brow_y).abs() <= brow_half_t {
                        color = BROW;
                    }
                    if (u - ex).powi(2) + (v - eye_y).powi(2) <= eye_r * eye_r {
                        color = EYE;
                    }
                }
                if (u - 0.5).abs() <= 0.08 && (v - 0.70).abs() <= px {
                    color = MOUTH;
                }
            }
            for c in 0..3 {
                pixels[(c * resolution + y) * resolution + x] = color[c] as f32;
            }
        }
    }
    Ok(FaceImage { pixels, resolution })
}

/// Portrait with additive Gaussian pixel noise keyed by `noise_seed`.
pub fn render_face(identity: &Identity, noise_seed: u64, resolution: usize) -> Result<FaceImage> {
    let mut img = render_face_clean(identity, resolution)?;
    let mut rng = seed::rng(noise_seed);
    let normal = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
    for p in &mut img.pixels {
        *p = (*p as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
    }
    Ok(img)
}
