//! Grayscale procedural textures, the forward-noising schedule, and
//! patch conversion for denoising.

use std::path::Path;

use ebt_autodiff::rng::{seeded, standard_normal, EngineRng};
use rand::Rng;

use crate::error::{EbtError, Result};

pub const DEFAULT_SCHEDULE_LEN: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// `[height, width, channels]` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn gray(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width, "image: {} values for {height}x{width}", data.len());
        Self { height, width, channels: 1, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    /// Binary PGM (`P5`, maxval 255). Grayscale only.
    pub fn to_pgm(&self) -> Vec<u8> {
        assert_eq!(self.channels, 1, "pgm export needs one channel");
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| EbtError::config(format!("pgm: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?.to_string());
        }
        if fields[0] != "P5" {
            return Err(bad("only binary P5 is supported"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(bad("maxval must be in 1..=255"));
        }
        let body = &bytes[pos + 1..];
        if body.len() < w * h {
            return Err(bad("truncated pixel data"));
        }
        let data = body[..w * h].iter().map(|&b| b as f64 / maxval as f64).collect();
        Ok(Self::gray(h, w, data))
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }
}

/// A random texture: oriented gratings, a smooth gradient, soft blobs and,
/// sometimes, a checkerboard, blended and rescaled to `[0, 1]`.
pub fn procedural_texture(size: usize, rng: &mut EngineRng) -> Image {
    use std::f64::consts::TAU;
    let mut img = vec![0.0; size * size];
    let n = size as f64;
    let gratings = rng.gen_range(1..=3);
    for _ in 0..gratings {
        let theta = rng.gen_range(0.0..TAU);
        let freq = rng.gen_range(1.0..5.0) * TAU / n;
        let phase = rng.gen_range(0.0..TAU);
        let amp = rng.gen_range(0.3..1.0);
        let (c, s) = (theta.cos(), theta.sin());
        for y in 0..size {
            for x in 0..size {
                img[y * size + x] += amp * ((x as f64 * c + y as f64 * s) * freq + phase).sin();
            }
        }
    }
    let (gx, gy) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    for _ in 0..rng.gen_range(0..4) {
        let (cx, cy) = (rng.gen_range(0.0..n), rng.gen_range(0.0..n));
        let r = rng.gen_range(2.0..n / 3.0);
        let amp = rng.gen_range(-1.5..1.5);
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                img[y * size + x] += amp * (-d2 / (2.0 * r * r)).exp();
            }
        }
    }
    let checker = rng.gen_bool(0.25).then(|| rng.gen_range(4..=8usize));
    for y in 0..size {
        for x in 0..size {
            let v = &mut img[y * size + x];
            *v += gx * (x as f64 / n - 0.5) + gy * (y as f64 / n - 0.5);
            if let Some(c) = checker {
                *v += if (x / c + y / c) % 2 == 0 { 0.4 } else { -0.4 };
            }
        }
    }
    let lo = img.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let (a, b) = (rng.gen_range(0.0..0.15), rng.gen_range(0.85..1.0));
    Image::gray(size, size, img.into_iter().map(|v| a + (b - a) * (v - lo) / span).collect())
}

pub fn texture_set(count: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = seeded(seed);
    (0..count).map(|_| procedural_texture(size, &mut rng)).collect()
}

/// Linear variance schedule and its cumulative signal retention.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    pub betas: Vec<f64>,
    /// `alpha_bar[t] = prod_{i <= t} (1 - beta_i)`.
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(t: usize) -> Result<NoiseSchedule> {
    if t < 2 {
        return Err(EbtError::contract(format!("noise schedule needs T >= 2, got {t}")));
    }
    let step = (BETA_END - BETA_START) / (t - 1) as f64;
    let mut betas: Vec<f64> = (0..t).map(|i| BETA_START + step * i as f64).collect();
    betas[t - 1] = BETA_END;
    let mut acc = 1.0;
    let alpha_bar = betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    Ok(NoiseSchedule { beta_start: BETA_START, beta_end: BETA_END, betas, alpha_bar })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// Zero-based schedule index for a fraction of the schedule.
    pub fn index_for(&self, sigma_fraction: f64) -> usize {
        let t = self.len();
        ((sigma_fraction * t as f64).round() as usize).clamp(1, t) - 1
    }
}

#[derive(Clone, Debug)]
pub struct DenoiseSample {
    pub clean: Image,
    /// Noised pixels mapped back to `[0, 1]` and clamped, for metrics.
    pub noised: Image,
    /// Noised signal in model space (`[-1, 1]` scale, unclamped).
    pub signal: Vec<f64>,
    pub sigma_fraction: f64,
    pub index: usize,
}

/// `x_t = sqrt(abar) x_0 + sqrt(1 - abar) eps` with `x_0 = 2 * clean - 1`.
pub fn apply_noise(clean: &Image, sigma_fraction: f64, schedule: &NoiseSchedule, rng: &mut EngineRng) -> DenoiseSample {
    assert!(
        sigma_fraction > 0.0 && sigma_fraction <= 1.0,
        "sigma_fraction must lie in (0, 1], got {sigma_fraction}"
    );
    let index = schedule.index_for(sigma_fraction);
    let ab = schedule.alpha_bar[index];
    let eps = standard_normal(rng, clean.data.len());
    let signal: Vec<f64> = clean
        .data
        .iter()
        .zip(eps)
        .map(|(c, e)| ab.sqrt() * (2.0 * c - 1.0) + (1.0 - ab).sqrt() * e)
        .collect();
    let noised = Image { data: signal.iter().map(|s| from_signal(*s)).collect(), ..clean.clone() };
    DenoiseSample { clean: clean.clone(), noised, signal, sigma_fraction, index }
}

pub fn to_signal(pixel: f64) -> f64 {
    2.0 * pixel - 1.0
}

pub fn from_signal(s: f64) -> f64 {
    ((s + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// Mean squared error on the `[0, 1]` scale.
pub fn mse(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.shape(), b.shape(), "mse: shapes {:?} vs {:?}", a.shape(), b.shape());
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64
}

/// Mean squared error on the `[0, 255]` scale.
pub fn mse_pixel(a: &Image, b: &Image) -> f64 {
    mse(a, b) * 255.0 * 255.0
}

/// `10 log10(255^2 / mse_pixel)`; `+inf` for identical images.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let m = mse_pixel(a, b);
    if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / m).log10()
    }
}

/// Splits a grayscale image into non-overlapping `p x p` patches in raster
/// order: `[(H/p)*(W/p), p*p]`, values in model space.
pub fn patchify(signal: &[f64], size: usize, p: usize) -> Vec<f64> {
    assert!(size % p == 0, "patch size {p} does not divide {size}");
    let g = size / p;
    let mut out = Vec::with_capacity(signal.len());
    for py in 0..g {
        for px in 0..g {
            for y in 0..p {
                for x in 0..p {
                    out.push(signal[(py * p + y) * size + px * p + x]);
                }
            }
        }
    }
    out
}

pub fn unpatchify(patches: &[f64], size: usize, p: usize) -> Vec<f64> {
    let g = size / p;
    let mut out = vec![0.0; size * size];
    let mut i = 0;
    for py in 0..g {
        for px in 0..g {
            for y in 0..p {
                for x in 0..p {
                    out[(py * p + y) * size + px * p + x] = patches[i];
                    i += 1;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = make_schedule(2).unwrap();
        assert_eq!(s.betas, vec![1e-4, 2e-2]);
        let s = make_schedule(3).unwrap();
        assert!((s.betas[1] - 1.005e-2).abs() < 1e-15);
        assert!(make_schedule(1).is_err());
        let s = make_schedule(1000).unwrap();
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn psnr_closed_form() {
        let a = Image::gray(2, 2, vec![0.2; 4]);
        assert_eq!(psnr(&a, &a), f64::INFINITY);
        let b = Image::gray(2, 2, vec![0.2 + 1.0 / 255.0; 4]);
        assert!((mse_pixel(&a, &b) - 1.0).abs() < 1e-9);
        assert!((psnr(&a, &b) - 10.0 * 65025f64.log10()).abs() < 1e-8);
    }

    #[test]
    fn patch_round_trip() {
        let v: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let p = patchify(&v, 8, 4);
        assert_eq!(&p[..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(p[4], 8.0);
        assert_eq!(unpatchify(&p, 8, 4), v);
    }

    #[test]
    fn pgm_round_trip() {
        let img = texture_set(1, 8, 3).remove(0);
        let back = Image::from_pgm(&img.to_pgm()).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.data.iter().zip(&img.data).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    }
}
