use crate::image::Image;
use crate::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio for unit dynamic range, capped at
/// [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = a.mse(b)?;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            w[i * SSIM_WINDOW + j] = g[i] * g[j] / (sum * sum);
        }
    }
    w
}

/// Single-scale SSIM on Rec.709 luma, averaged over every position where
/// the window fits entirely inside the image.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(
            "image",
            format!("{w}×{h} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} SSIM window"),
        ));
    }
    let (la, lb) = (a.luma(), b.luma());
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - SSIM_WINDOW {
        for c in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let k = win[i * SSIM_WINDOW + j];
                    let p = (r + i) * w + c + j;
                    let (x, y) = (la[p], lb[p]);
                    ma += k * x;
                    mb += k * y;
                    saa += k * x * x;
                    sbb += k * y * y;
                    sab += k * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: u32, h: u32) -> Image {
        let data = (0..w * h * 3).map(|i| (i / 3) as f64 / (w * h) as f64).collect();
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn psnr_unit_cases() {
        let zeros = Image::filled(8, 8, [0.0; 3]);
        let ones = Image::filled(8, 8, [1.0; 3]);
        assert_eq!(psnr(&zeros, &zeros).unwrap(), 99.0);
        assert_eq!(psnr(&zeros, &ones).unwrap(), 0.0);
        let tenth = Image::filled(8, 8, [0.1; 3]);
        assert!((psnr(&zeros, &tenth).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&zeros, &Image::filled(4, 8, [0.0; 3])).is_err());
    }

    #[test]
    fn ssim_unit_cases() {
        let a = ramp(16, 12);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = Image::new(16, 12, a.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        let half = Image::filled(11, 11, [0.5; 3]);
        assert_eq!(ssim(&half, &half).unwrap(), 1.0);
        assert!(ssim(&Image::filled(10, 20, [0.0; 3]), &Image::filled(10, 20, [0.0; 3])).is_err());
    }

    #[test]
    fn window_is_normalized() {
        let s: f64 = gaussian_window().iter().sum();
        assert!((s - 1.0).abs() < 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn metrics_are_symmetric(seed in 0u64..10_000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut noise = |_| rng.random_range(0.0..1.0);
            let a = Image::new(12, 13, (0..12 * 13 * 3).map(&mut noise).collect()).unwrap();
            let b = Image::new(12, 13, (0..12 * 13 * 3).map(&mut noise).collect()).unwrap();
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-15);
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
