//! Training-time image augmentations.

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    RandomResizedCrop,
    HorizontalFlip,
    ColorJitter,
    Grayscale,
}

impl Augmentation {
    pub const ALL: [Augmentation; 4] = [
        Augmentation::RandomResizedCrop,
        Augmentation::HorizontalFlip,
        Augmentation::ColorJitter,
        Augmentation::Grayscale,
    ];
}

const CROP_SCALE: (f64, f64) = (0.5, 1.0);
const CROP_RATIO: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
const JITTER: f64 = 0.3;
const GRAYSCALE_P: f64 = 0.2;

fn random_resized_crop<R: Rng>(img: &RgbImage, rng: &mut R) -> RgbImage {
    let (w, h) = img.dimensions();
    let area = (w * h) as f64;
    for _ in 0..10 {
        let target = area * rng.gen_range(CROP_SCALE.0..=CROP_SCALE.1);
        let log_r = rng.gen_range(CROP_RATIO.0.ln()..=CROP_RATIO.1.ln());
        let ratio = log_r.exp();
        let cw = (target * ratio).sqrt().round() as u32;
        let ch = (target / ratio).sqrt().round() as u32;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let x = rng.gen_range(0..=w - cw);
            let y = rng.gen_range(0..=h - ch);
            let crop = image::imageops::crop_imm(img, x, y, cw, ch).to_image();
            return image::imageops::resize(&crop, w, h, FilterType::Triangle);
        }
    }
    img.clone()
}

fn color_jitter<R: Rng>(img: &RgbImage, rng: &mut R) -> RgbImage {
    let brightness = rng.gen_range(1.0 - JITTER..=1.0 + JITTER);
    let contrast = rng.gen_range(1.0 - JITTER..=1.0 + JITTER);
    let saturation = rng.gen_range(1.0 - JITTER..=1.0 + JITTER);
    let n = (img.width() * img.height()).max(1) as f64;
    let mean = img.pixels().map(luma).sum::<f64>() / n;
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y);
        let l = luma(p);
        Rgb(std::array::from_fn(|c| {
            let mut v = p[c] as f64 * brightness;
            v = (v - mean) * contrast + mean;
            v = (v - l) * saturation + l;
            v.round().clamp(0.0, 255.0) as u8
        }))
    })
}

fn luma(p: &Rgb<u8>) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

pub fn apply<R: Rng>(augs: &[Augmentation], img: &RgbImage, rng: &mut R) -> RgbImage {
    let mut out = img.clone();
    for a in augs {
        out = match a {
            Augmentation::RandomResizedCrop => random_resized_crop(&out, rng),
            Augmentation::HorizontalFlip => {
                if rng.gen_bool(0.5) {
                    image::imageops::flip_horizontal(&out)
                } else {
                    out
                }
            }
            Augmentation::ColorJitter => color_jitter(&out, rng),
            Augmentation::Grayscale => {
                if rng.gen_bool(GRAYSCALE_P) {
                    RgbImage::from_fn(out.width(), out.height(), |x, y| {
                        let l = luma(out.get_pixel(x, y)).round().clamp(0.0, 255.0) as u8;
                        Rgb([l, l, l])
                    })
                } else {
                    out
                }
            }
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img() -> RgbImage {
        RgbImage::from_fn(12, 10, |x, y| Rgb([x as u8 * 20, y as u8 * 25, 128]))
    }

    #[test]
    fn augmentations_keep_size_and_are_seeded() {
        let a = apply(&Augmentation::ALL, &img(), &mut ChaCha8Rng::seed_from_u64(3));
        let b = apply(&Augmentation::ALL, &img(), &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_eq!(a.dimensions(), (12, 10));
    }

    #[test]
    fn empty_list_is_identity() {
        assert_eq!(apply(&[], &img(), &mut ChaCha8Rng::seed_from_u64(0)), img());
    }

    #[test]
    fn flip_is_a_mirror_or_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..8 {
            let out = apply(&[Augmentation::HorizontalFlip], &img(), &mut rng);
            assert!(out == img() || out == image::imageops::flip_horizontal(&img()));
        }
    }
}
