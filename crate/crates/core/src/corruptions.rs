//! Compound target-domain shift: Gaussian noise, then Gaussian blur, then
//! color jitter, at severities 0 (clean), 1 and 2.
//!
//! Images are `[C, H, W]` tensors in `[0, 1]`; batches `[N, C, H, W]` are
//! corrupted image by image with per-image seeds.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;

/// Rec.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub severity: u8,
    pub noise_sigma: f64,
    pub blur_kernel: usize,
    /// Shared brightness/contrast/saturation strength.
    pub jitter_strength: f64,
    /// Always 0.
    pub hue: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn for_severity(severity: u8, seed: u64) -> Result<Self> {
        let (noise_sigma, blur_kernel, jitter_strength) = match severity {
            0 => (0.0, 1, 0.0),
            1 => (0.03, 3, 0.1),
            2 => (0.06, 5, 0.2),
            s => return Err(Error::InvalidConfig(format!("severity must be 0, 1 or 2, got {s}"))),
        };
        Ok(Self {
            severity,
            noise_sigma,
            blur_kernel,
            jitter_strength,
            hue: 0.0,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let expected = Self::for_severity(self.severity, self.seed)?;
        if *self != expected {
            return Err(Error::InvalidConfig(format!(
                "corruption parameters do not match severity {}",
                self.severity
            )));
        }
        Ok(())
    }
}

fn layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidConfig(format!("expected a [C, H, W] image, got {:?}", x.shape()))),
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// The additive noise `gaussian_noise` would draw, before clamping.
pub fn noise_field(len: usize, sigma: f64, seed: u64) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and nonnegative");
    let mut rng = rng_for(seed, 0);
    (0..len).map(|_| normal.sample(&mut rng)).collect()
}

pub fn gaussian_noise(x: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise sigma must be nonnegative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let noise = noise_field(x.len(), sigma, seed);
    let data = x.data().iter().zip(&noise).map(|(&v, &n)| clamp01(v + n)).collect();
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}

/// Kernel width heuristic `0.3·((k−1)/2 − 1) + 0.8`.
pub fn blur_sigma(kernel_size: usize) -> f64 {
    0.3 * ((kernel_size as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

pub fn gaussian_kernel_1d(kernel_size: usize) -> Vec<f64> {
    let sigma = blur_sigma(kernel_size);
    let r = (kernel_size / 2) as f64;
    let raw: Vec<f64> = (0..kernel_size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur per channel with reflect padding.
pub fn gaussian_blur(x: &Tensor, kernel_size: usize) -> Result<Tensor> {
    if kernel_size == 0 || kernel_size.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!("blur kernel must be odd, got {kernel_size}")));
    }
    let (c, h, w) = layout(x)?;
    if kernel_size == 1 {
        return Ok(x.clone());
    }
    let k = gaussian_kernel_1d(kernel_size);
    let r = (kernel_size / 2) as isize;
    let src = x.data();
    let mut tmp = vec![0.0; src.len()];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                tmp[(ch * h + i) * w + j] = k
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| kv * src[(ch * h + i) * w + reflect(j as isize + t as isize - r, w)])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[(ch * h + i) * w + j] = k
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| kv * tmp[(ch * h + reflect(i as isize + t as isize - r, h)) * w + j])
                    .sum();
            }
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl JitterFactors {
    /// Brightness, contrast, saturation, each uniform on `[1−a, 1+a]`.
    pub fn sample(strength: f64, seed: u64) -> Self {
        let mut rng = rng_for(seed, 0);
        let mut draw = || rng.random_range(1.0 - strength..=1.0 + strength);
        let brightness = draw();
        let contrast = draw();
        let saturation = draw();
        Self {
            brightness,
            contrast,
            saturation,
        }
    }
}

/// Per-pixel luminance: Rec.601 for RGB, the channel mean otherwise.
fn luminance(data: &[f64], c: usize, plane: usize) -> Vec<f64> {
    (0..plane)
        .map(|p| {
            if c == 3 {
                (0..3).map(|ch| LUMA[ch] * data[ch * plane + p]).sum()
            } else {
                (0..c).map(|ch| data[ch * plane + p]).sum::<f64>() / c as f64
            }
        })
        .collect()
}

/// Applies brightness, contrast (about the mean luminance) and saturation
/// (toward per-pixel luminance) in that order, clamping after each.
pub fn apply_jitter_factors(x: &Tensor, f: JitterFactors) -> Result<Tensor> {
    let (c, h, w) = layout(x)?;
    let plane = h * w;
    let mut d: Vec<f64> = x.data().iter().map(|&v| clamp01(v * f.brightness)).collect();
    let pivot = luminance(&d, c, plane).iter().sum::<f64>() / plane as f64;
    d.iter_mut().for_each(|v| *v = clamp01((*v - pivot) * f.contrast + pivot));
    let gray = luminance(&d, c, plane);
    for ch in 0..c {
        for p in 0..plane {
            let v = &mut d[ch * plane + p];
            *v = clamp01((*v - gray[p]) * f.saturation + gray[p]);
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), d)?)
}

pub fn color_jitter(x: &Tensor, strength: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&strength) {
        return Err(Error::InvalidConfig(format!("jitter strength must lie in [0, 1), got {strength}")));
    }
    layout(x)?;
    if strength == 0.0 {
        return Ok(x.clone());
    }
    apply_jitter_factors(x, JitterFactors::sample(strength, seed))
}

/// `jitter ∘ blur ∘ noise` on one `[C, H, W]` image.
pub fn apply_corruption(x: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    spec.validate()?;
    layout(x)?;
    if spec.severity == 0 {
        return Ok(x.clone());
    }
    let noisy = gaussian_noise(x, spec.noise_sigma, derive_seed(spec.seed, 0))?;
    let blurred = gaussian_blur(&noisy, spec.blur_kernel)?;
    color_jitter(&blurred, spec.jitter_strength, derive_seed(spec.seed, 1))
}

/// Corrupts each image of an `[N, C, H, W]` batch; image `i` uses
/// `derive_seed(spec.seed, i)` so the result is independent of scheduling.
pub fn corrupt_batch(batch: &Tensor, spec: &CorruptionSpec, exec: Execution) -> Result<Tensor> {
    if batch.rank() != 4 {
        return Err(Error::InvalidConfig(format!("expected [N, C, H, W], got {:?}", batch.shape())));
    }
    let inner = batch.shape()[1..].to_vec();
    let images = exec.try_map(batch.batch_len(), |i| {
        let img = batch.row(i).reshape(&inner)?;
        let per_image = CorruptionSpec {
            seed: derive_seed(spec.seed, i as u64),
            ..*spec
        };
        apply_corruption(&img, &per_image)
    })?;
    let data: Vec<f64> = images.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::new(batch.shape().to_vec(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![3, 6, 6], (0..108).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap()
    }

    #[test]
    fn severity_table() {
        let s1 = CorruptionSpec::for_severity(1, 0).unwrap();
        assert_eq!((s1.noise_sigma, s1.blur_kernel, s1.jitter_strength, s1.hue), (0.03, 3, 0.1, 0.0));
        let s2 = CorruptionSpec::for_severity(2, 0).unwrap();
        assert_eq!((s2.noise_sigma, s2.blur_kernel, s2.jitter_strength, s2.hue), (0.06, 5, 0.2, 0.0));
        assert!(CorruptionSpec::for_severity(3, 0).is_err());
    }

    #[test]
    fn identities() {
        let x = image(1);
        assert_eq!(gaussian_noise(&x, 0.0, 3).unwrap(), x);
        assert_eq!(gaussian_blur(&x, 1).unwrap(), x);
        assert_eq!(color_jitter(&x, 0.0, 3).unwrap(), x);
        assert_eq!(apply_corruption(&x, &CorruptionSpec::for_severity(0, 9).unwrap()).unwrap(), x);
    }

    #[test]
    fn blur_kernel_rules() {
        assert!(gaussian_blur(&image(0), 4).is_err());
        let flat = Tensor::filled(&[2, 5, 5], 0.3);
        assert!(gaussian_blur(&flat, 5).unwrap().max_abs_diff(&flat) < 1e-15);
        assert!((blur_sigma(3) - 0.8).abs() < 1e-15);
        assert!((blur_sigma(5) - 1.1).abs() < 1e-15);
    }

    #[test]
    fn blur_conserves_interior_mass() {
        let mut x = Tensor::zeros(&[1, 7, 7]);
        x.data_mut()[3 * 7 + 3] = 1.0;
        let y = gaussian_blur(&x, 3).unwrap();
        assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn brightness_closed_form() {
        let gray = Tensor::new(vec![1, 2, 3], vec![0.1, 0.5, 0.9, 0.0, 0.8, 0.3]).unwrap();
        let f = JitterFactors {
            brightness: 1.2,
            contrast: 1.0,
            saturation: 1.0,
        };
        let y = apply_jitter_factors(&gray, f).unwrap();
        let expect = gray.map(|v| (1.2 * v).clamp(0.0, 1.0));
        assert!(y.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn order_matters() {
        let x = image(2);
        let spec = CorruptionSpec::for_severity(2, 5).unwrap();
        let forward = apply_corruption(&x, &spec).unwrap();
        let jit = color_jitter(&x, 0.2, derive_seed(5, 1)).unwrap();
        let blur = gaussian_blur(&jit, 5).unwrap();
        let reversed = gaussian_noise(&blur, 0.06, derive_seed(5, 0)).unwrap();
        assert!(forward.max_abs_diff(&reversed) > 1e-6);
    }

    #[test]
    fn noise_std_matches_sigma() {
        let n = noise_field(10_000, 0.03, 17);
        let mean = n.iter().sum::<f64>() / n.len() as f64;
        let std = (n.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.len() - 1) as f64).sqrt();
        assert!((std / 0.03 - 1.0).abs() < 0.03, "std {std}");
    }

    #[test]
    fn batch_is_deterministic_and_bounded() {
        let batch = Tensor::stack(&[image(3), image(4), image(5)]).unwrap();
        let spec = CorruptionSpec::for_severity(2, 11).unwrap();
        let a = corrupt_batch(&batch, &spec, Execution::Sequential).unwrap();
        let b = corrupt_batch(&batch, &spec, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
