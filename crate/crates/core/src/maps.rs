//! Guidance maps: the binary foreground mask (detector → segmenter, with a matting fallback)
//! and the canny structure map of the foreground.

use std::sync::atomic::{AtomicUsize, Ordering};

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ensure_same, Mask, SoftMask};

pub const BINARIZE_THRESHOLD: f32 = 0.5;
pub const DETECTOR_CONFIDENCE_FLOOR: f32 = 0.3;
pub const CANNY_LOW: f32 = 100.0;
pub const CANNY_HIGH: f32 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    pub confidence: f32,
}

impl Bbox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32, confidence: f32) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Precondition(format!("degenerate bbox ({x0},{y0})-({x1},{y1})")));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Precondition(format!("bbox confidence {confidence} outside [0,1]")));
        }
        Ok(Bbox { x0, y0, x1, y1, confidence })
    }

    /// Half-open containment: `x0 <= x < x1`.
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x1 <= width && self.y1 <= height
    }
}

/// Canny edges of the foreground; always a subset of the foreground mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CannyMap(pub Mask);

impl CannyMap {
    pub fn edges(&self) -> &Mask {
        &self.0
    }

    pub fn to_gray(&self) -> GrayImage {
        self.0.to_gray()
    }
}

pub trait DetectorBackend: Send + Sync {
    fn name(&self) -> &str;
    fn detect(&self, image: &RgbImage, class_name: &str) -> Result<Option<Bbox>>;
}

pub trait SegmenterBackend: Send + Sync {
    fn name(&self) -> &str;
    fn segment(&self, image: &RgbImage, bbox: &Bbox) -> Result<SoftMask>;
}

pub trait MattingBackend: Send + Sync {
    fn name(&self) -> &str;
    fn matte(&self, image: &RgbImage) -> Result<SoftMask>;
}

pub fn binarize(soft: &SoftMask, threshold: f32) -> Mask {
    Mask::from_fn(soft.width(), soft.height(), |x, y| soft.get(x, y) >= threshold)
}

pub fn invert_mask(mask: &Mask) -> Mask {
    Mask::from_fn(mask.width(), mask.height(), |x, y| !mask.get(x, y))
}

/// Dilation with a square structuring element of side `2 * factor_px + 1`.
///
/// Runs as two separable passes over prefix counts, so the cost does not depend on the factor.
pub fn dilate_mask(mask: &Mask, factor_px: u32) -> Mask {
    if factor_px == 0 || mask.is_empty() {
        return mask.clone();
    }
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let r = factor_px as usize;
    let bits = mask.bits();

    let mut horizontal = vec![0u8; w * h];
    let mut prefix = vec![0u32; w.max(h) + 1];
    for y in 0..h {
        let row = &bits[y * w..(y + 1) * w];
        for x in 0..w {
            prefix[x + 1] = prefix[x] + u32::from(row[x]);
        }
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r + 1).min(w);
            horizontal[y * w + x] = u8::from(prefix[hi] > prefix[lo]);
        }
    }
    let mut out = vec![0u8; w * h];
    for x in 0..w {
        for y in 0..h {
            prefix[y + 1] = prefix[y] + u32::from(horizontal[y * w + x]);
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r + 1).min(h);
            out[y * w + x] = u8::from(prefix[hi] > prefix[lo]);
        }
    }
    Mask::from_bits(mask.width(), mask.height(), out).expect("dilation keeps shape")
}

/// Foreground mask with the fallback chain: a confident detection is segmented; a miss, a
/// low-confidence box, or an empty segmentation falls through to matting.
pub fn foreground_mask(
    image_id: &str,
    image: &RgbImage,
    class_name: &str,
    detector: &dyn DetectorBackend,
    segmenter: &dyn SegmenterBackend,
    matting: &dyn MattingBackend,
) -> Result<Mask> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Precondition(format!("image `{image_id}` is empty")));
    }
    let detected = detector
        .detect(image, class_name)?
        .filter(|b| b.confidence >= DETECTOR_CONFIDENCE_FLOOR && b.fits(w, h));
    if let Some(bbox) = detected {
        let soft = segmenter.segment(image, &bbox)?;
        ensure_same(soft.dimensions(), (w, h), "segmenter output")?;
        let mask = binarize(&soft, BINARIZE_THRESHOLD);
        if !mask.is_empty() {
            return Ok(mask);
        }
        log::debug!("segmenter produced an empty mask for {image_id}; falling back to matting");
    }
    let soft = matting.matte(image)?;
    ensure_same(soft.dimensions(), (w, h), "matting output")?;
    let mask = binarize(&soft, BINARIZE_THRESHOLD);
    if mask.is_empty() {
        return Err(Error::EmptyMask(image_id.to_string()));
    }
    Ok(mask)
}

/// Luma of the image with every background pixel set to zero.
pub fn masked_luma(image: &RgbImage, mask: &Mask) -> Result<GrayImage> {
    ensure_same(image.dimensions(), mask.dimensions(), "canny input")?;
    let gray = image::imageops::grayscale(image);
    Ok(GrayImage::from_fn(image.width(), image.height(), |x, y| {
        if mask.get(x, y) {
            *gray.get_pixel(x, y)
        } else {
            Luma([0])
        }
    }))
}

/// Canny on the image with background zeroed, intersected with the mask.
pub fn canny_from_foreground(image: &RgbImage, mask: &Mask, low_thresh: f32, high_thresh: f32) -> Result<CannyMap> {
    let gray = masked_luma(image, mask)?;
    if mask.is_empty() {
        return Ok(CannyMap(Mask::empty(mask.width(), mask.height())));
    }
    let edges = imageproc::edges::canny(&gray, low_thresh, high_thresh);
    Ok(CannyMap(Mask::from_gray(&edges).intersect(mask)?))
}

// ---------------------------------------------------------------------------------------------
// Deterministic backends for tests and desk-scale runs.

/// Returns a fixed box (or nothing) and counts calls.
pub struct FixedDetector {
    pub bbox: Option<Bbox>,
    pub calls: AtomicUsize,
}

impl FixedDetector {
    pub fn new(bbox: Option<Bbox>) -> Self {
        FixedDetector { bbox, calls: AtomicUsize::new(0) }
    }
}

impl DetectorBackend for FixedDetector {
    fn name(&self) -> &str {
        "fixed-detector"
    }

    fn detect(&self, _image: &RgbImage, _class_name: &str) -> Result<Option<Bbox>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.bbox)
    }
}

/// Constant soft value inside the box, another outside.
pub struct BoxSegmenter {
    pub inside: f32,
    pub outside: f32,
    pub calls: AtomicUsize,
}

impl BoxSegmenter {
    pub fn new(inside: f32, outside: f32) -> Self {
        BoxSegmenter { inside, outside, calls: AtomicUsize::new(0) }
    }
}

impl SegmenterBackend for BoxSegmenter {
    fn name(&self) -> &str {
        "box-segmenter"
    }

    fn segment(&self, image: &RgbImage, bbox: &Bbox) -> Result<SoftMask> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(SoftMask::from_fn(image.width(), image.height(), |x, y| {
            if bbox.contains(x, y) {
                self.inside
            } else {
                self.outside
            }
        }))
    }
}

pub struct ConstantMatting {
    pub value: f32,
    pub calls: AtomicUsize,
}

impl ConstantMatting {
    pub fn new(value: f32) -> Self {
        ConstantMatting { value, calls: AtomicUsize::new(0) }
    }
}

impl MattingBackend for ConstantMatting {
    fn name(&self) -> &str {
        "constant-matting"
    }

    fn matte(&self, image: &RgbImage) -> Result<SoftMask> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(SoftMask::constant(image.width(), image.height(), self.value))
    }
}

/// Colour contrast against the mean border colour, scaled to [0, 1].
fn border_contrast(image: &RgbImage) -> SoftMask {
    let (w, h) = image.dimensions();
    let mut sum = [0f64; 3];
    let mut n = 0f64;
    for (x, y, p) in image.enumerate_pixels() {
        if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
            for c in 0..3 {
                sum[c] += p[c] as f64;
            }
            n += 1.0;
        }
    }
    let mean = sum.map(|s| s / n.max(1.0));
    SoftMask::from_fn(w, h, |x, y| {
        let p = image.get_pixel(x, y);
        let d: f64 = (0..3).map(|c| (p[c] as f64 - mean[c]).powi(2)).sum::<f64>().sqrt();
        (d / 96.0).min(1.0) as f32
    })
}

/// Detects the region whose colour departs from the border colour.
pub struct ContrastDetector;

impl DetectorBackend for ContrastDetector {
    fn name(&self) -> &str {
        "contrast-detector"
    }

    fn detect(&self, image: &RgbImage, _class_name: &str) -> Result<Option<Bbox>> {
        let soft = border_contrast(image);
        let mask = binarize(&soft, BINARIZE_THRESHOLD);
        if mask.is_empty() {
            return Ok(None);
        }
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if mask.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        let area = ((x1 - x0) * (y1 - y0)) as f32;
        let confidence = (mask.count() as f32 / area).clamp(0.0, 1.0);
        Ok(Some(Bbox::new(x0, y0, x1, y1, confidence)?))
    }
}

/// Border contrast restricted to the box.
pub struct ContrastSegmenter;

impl SegmenterBackend for ContrastSegmenter {
    fn name(&self) -> &str {
        "contrast-segmenter"
    }

    fn segment(&self, image: &RgbImage, bbox: &Bbox) -> Result<SoftMask> {
        let soft = border_contrast(image);
        Ok(SoftMask::from_fn(image.width(), image.height(), |x, y| {
            if bbox.contains(x, y) {
                soft.get(x, y)
            } else {
                0.0
            }
        }))
    }
}

/// Border contrast over the whole frame.
pub struct ContrastMatting;

impl MattingBackend for ContrastMatting {
    fn name(&self) -> &str {
        "contrast-matting"
    }

    fn matte(&self, image: &RgbImage) -> Result<SoftMask> {
        Ok(border_contrast(image))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_dilate(mask: &Mask, r: u32) -> Mask {
        let r = r as i64;
        Mask::from_fn(mask.width(), mask.height(), |x, y| {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sx, sy) = (x as i64 + dx, y as i64 + dy);
                    if sx >= 0 && sy >= 0 && (sx as u32) < mask.width() && (sy as u32) < mask.height() && mask.get(sx as u32, sy as u32) {
                        return true;
                    }
                }
            }
            false
        })
    }

    fn random_mask(rng: &mut ChaCha8Rng, w: u32, h: u32, density: f64) -> Mask {
        Mask::from_fn(w, h, |_, _| rng.gen_bool(density))
    }

    #[test]
    fn binarize_boundary_is_inclusive() {
        assert_eq!(binarize(&SoftMask::constant(4, 3, 0.5), 0.5), Mask::full(4, 3));
        assert_eq!(binarize(&SoftMask::constant(4, 3, 0.49), 0.5), Mask::empty(4, 3));
    }

    #[test]
    fn binarize_matches_elementwise_comparison() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let soft = SoftMask::from_fn(17, 9, |_, _| rng.gen::<f32>());
        let mask = binarize(&soft, 0.5);
        for y in 0..9 {
            for x in 0..17 {
                assert_eq!(mask.get(x, y), soft.get(x, y) >= 0.5);
            }
        }
    }

    #[test]
    fn center_pixel_dilates_to_block() {
        let m = Mask::from_fn(7, 7, |x, y| x == 3 && y == 3);
        let d = dilate_mask(&m, 1);
        let expected = Mask::from_fn(7, 7, |x, y| (2..=4).contains(&x) && (2..=4).contains(&y));
        assert_eq!(d, expected);
        assert_eq!(d, brute_dilate(&m, 1));
    }

    #[test]
    fn dilation_factor_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_mask(&mut rng, 13, 11, 0.2);
        assert_eq!(dilate_mask(&m, 0), m);
    }

    #[test]
    fn dilation_matches_brute_force_and_imageproc() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (w, h) = (rng.gen_range(1..24), rng.gen_range(1..24));
            let m = random_mask(&mut rng, w, h, 0.05);
            let r = rng.gen_range(0..6);
            let d = dilate_mask(&m, r);
            assert_eq!(d, brute_dilate(&m, r));
            let reference = imageproc::morphology::dilate(&m.to_gray(), imageproc::distance_transform::Norm::LInf, r as u8);
            assert_eq!(d, Mask::from_gray(&reference));
        }
    }

    #[test]
    fn large_factor_covers_frame() {
        let m = Mask::from_fn(300, 200, |x, y| x == 150 && y == 100);
        assert_eq!(dilate_mask(&m, 150), Mask::full(300, 200));
    }

    #[test]
    fn inversion() {
        assert_eq!(invert_mask(&Mask::full(3, 2)), Mask::empty(3, 2));
        let checker = Mask::from_fn(6, 5, |x, y| (x + y) % 2 == 0);
        let complement = Mask::from_fn(6, 5, |x, y| (x + y) % 2 == 1);
        assert_eq!(invert_mask(&checker), complement);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_mask(&mut rng, 9, 9, 0.5);
        let inv = invert_mask(&m);
        for y in 0..9 {
            for x in 0..9 {
                assert_ne!(inv.get(x, y), m.get(x, y));
            }
        }
        assert_eq!(invert_mask(&inv), m);
    }

    fn image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb([10, 20, 30]))
    }

    #[test]
    fn detector_hit_uses_segmenter() {
        let bbox = Bbox::new(2, 3, 6, 8, 0.9).unwrap();
        let det = FixedDetector::new(Some(bbox));
        let seg = BoxSegmenter::new(0.9, 0.0);
        let mat = ConstantMatting::new(1.0);
        let mask = foreground_mask("i", &image(10, 10), "cat", &det, &seg, &mat).unwrap();
        assert_eq!(mask, Mask::from_fn(10, 10, |x, y| bbox.contains(x, y)));
        assert_eq!(seg.calls.load(Ordering::SeqCst), 1);
        assert_eq!(mat.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn detector_miss_falls_back_to_matting() {
        let det = FixedDetector::new(None);
        let seg = BoxSegmenter::new(0.9, 0.0);
        let mat = ConstantMatting::new(0.7);
        let mask = foreground_mask("i", &image(8, 6), "cat", &det, &seg, &mat).unwrap();
        assert_eq!(mask, Mask::full(8, 6));
        assert_eq!(det.calls.load(Ordering::SeqCst), 1);
        assert_eq!(seg.calls.load(Ordering::SeqCst), 0);
        assert_eq!(mat.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn low_confidence_box_is_not_trusted() {
        let det = FixedDetector::new(Some(Bbox::new(0, 0, 2, 2, 0.29).unwrap()));
        let seg = BoxSegmenter::new(1.0, 0.0);
        let mat = ConstantMatting::new(0.6);
        foreground_mask("i", &image(4, 4), "cat", &det, &seg, &mat).unwrap();
        assert_eq!(seg.calls.load(Ordering::SeqCst), 0);
        assert_eq!(mat.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn all_zero_backends_raise_empty_mask() {
        let det = FixedDetector::new(Some(Bbox::new(0, 0, 2, 2, 0.9).unwrap()));
        let seg = BoxSegmenter::new(0.0, 0.0);
        let mat = ConstantMatting::new(0.0);
        let err = foreground_mask("img-7", &image(4, 4), "cat", &det, &seg, &mat).unwrap_err();
        assert!(matches!(err, Error::EmptyMask(id) if id == "img-7"));
        assert_eq!(mat.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn contrast_backends_find_a_blob() {
        let img = RgbImage::from_fn(40, 30, |x, y| {
            if (10..25).contains(&x) && (8..20).contains(&y) {
                Rgb([220, 40, 40])
            } else {
                Rgb([30, 120, 30])
            }
        });
        let mask = foreground_mask("b", &img, "thing", &ContrastDetector, &ContrastSegmenter, &ContrastMatting).unwrap();
        assert_eq!(mask, Mask::from_fn(40, 30, |x, y| (10..25).contains(&x) && (8..20).contains(&y)));
    }

    #[test]
    fn canny_of_empty_mask_is_blank() {
        let img = RgbImage::from_fn(20, 20, |x, _| Rgb([(x * 12) as u8, 0, 0]));
        let c = canny_from_foreground(&img, &Mask::empty(20, 20), CANNY_LOW, CANNY_HIGH).unwrap();
        assert!(c.edges().is_empty());
    }

    #[test]
    fn solid_foreground_edges_sit_on_the_mask_boundary() {
        let img = RgbImage::from_pixel(32, 32, Rgb([200, 200, 200]));
        let mask = Mask::from_fn(32, 32, |x, y| (8..24).contains(&x) && (8..24).contains(&y));
        let c = canny_from_foreground(&img, &mask, CANNY_LOW, CANNY_HIGH).unwrap();
        assert!(!c.edges().is_empty());
        assert!(c.edges().is_subset_of(&mask));
        let interior = Mask::from_fn(32, 32, |x, y| (10..22).contains(&x) && (10..22).contains(&y));
        assert!(c.edges().intersect(&interior).unwrap().is_empty());
        // reference detector on the masked image, intersected with the mask
        let reference = imageproc::edges::canny(&masked_luma(&img, &mask).unwrap(), CANNY_LOW, CANNY_HIGH);
        assert_eq!(c.edges(), &Mask::from_gray(&reference).intersect(&mask).unwrap());
    }

    #[test]
    fn full_frame_mask_equals_plain_canny() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = RgbImage::from_fn(24, 24, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]));
        let c = canny_from_foreground(&img, &Mask::full(24, 24), CANNY_LOW, CANNY_HIGH).unwrap();
        let plain = imageproc::edges::canny(&image::imageops::grayscale(&img), CANNY_LOW, CANNY_HIGH);
        assert_eq!(c.edges(), &Mask::from_gray(&plain));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn mask_strategy() -> impl Strategy<Value = Mask> {
            (1u32..20, 1u32..20).prop_flat_map(|(w, h)| {
                proptest::collection::vec(proptest::bool::weighted(0.1), (w * h) as usize)
                    .prop_map(move |v| Mask::from_bits(w, h, v.into_iter().map(u8::from).collect()).unwrap())
            })
        }

        proptest! {
            #[test]
            fn dilation_is_monotone_and_extensive(m in mask_strategy(), a in 0u32..5, extra in 0u32..5) {
                let da = dilate_mask(&m, a);
                let db = dilate_mask(&m, a + extra);
                prop_assert!(m.is_subset_of(&da));
                prop_assert!(da.is_subset_of(&db));
            }

            #[test]
            fn canny_edges_stay_inside_mask(m in mask_strategy(), seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let img = RgbImage::from_fn(m.width(), m.height(), |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]));
                let c = canny_from_foreground(&img, &m, CANNY_LOW, CANNY_HIGH).unwrap();
                prop_assert!(c.edges().is_subset_of(&m));
            }
        }
    }
}
