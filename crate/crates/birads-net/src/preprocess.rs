//! Image preparation: tumor-square cropping, bilinear resizing, three-channel
//! synthesis (gray / histogram-equalized / smoothed), and training-time
//! geometric augmentation.
//!
//! Images are grayscale, normalized to [0, 1] on load, and carried as
//! `[H, W]` arrays; the channel-synthesis step produces `[3, H, W]` tensors.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, ImageRecord};
use crate::error::{Error, Result};
use crate::lexicon::TaskTargets;
use crate::util::{derive_seed, s, Scalar};

/// Static preprocessing switches. The crop and channel flags exist so
/// ablation runs can disable those stages while keeping tensor shapes fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub use_crop: bool,
    pub use_three_channels: bool,
    pub smoothing_sigma: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: 256,
            use_crop: true,
            use_three_channels: true,
            smoothing_sigma: 1.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Config("target_size must be positive".into()));
        }
        if !(self.smoothing_sigma > 0.0) {
            return Err(Error::Config("smoothing_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Random augmentation ranges. Each sample draws independently: zoom factor
/// in [1-zoom, 1+zoom], horizontal shift in [-w, +w] of the width, rotation
/// in [-deg, +deg], shear angle in [-shear, +shear] radians, and a 0.5
/// horizontal-flip coin when enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub zoom_range: f64,
    pub width_shift: f64,
    pub rotation_deg: f64,
    pub shear: f64,
    pub horizontal_flip: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            zoom_range: 0.20,
            width_shift: 0.10,
            rotation_deg: 5.0,
            shear: 0.20,
            horizontal_flip: true,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.zoom_range < 0.0
            || self.width_shift < 0.0
            || self.rotation_deg < 0.0
            || self.shear < 0.0
        {
            return Err(Error::Config("augmentation ranges must be nonnegative".into()));
        }
        if self.zoom_range >= 1.0 {
            return Err(Error::Config("zoom_range must be below 1".into()));
        }
        Ok(())
    }

    /// Per-sample stream seed so augmentation does not depend on worker
    /// count or batch composition.
    pub fn sample_seed(&self, epoch: usize, dataset_index: usize) -> u64 {
        derive_seed(self.seed, ((epoch as u64) << 32) ^ dataset_index as u64)
    }
}

/// Loads an 8- or 16-bit grayscale image and normalizes it to [0, 1].
pub fn load_grayscale<T: Scalar>(path: impl AsRef<Path>) -> Result<Array2<T>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let gray = img.to_luma16();
    let (w, h) = gray.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Image(format!("{}: empty image", path.display())));
    }
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, pixel) in gray.enumerate_pixels() {
        out[[y as usize, x as usize]] = s::<T>(pixel.0[0] as f64 / 65535.0);
    }
    Ok(out)
}

/// Computes the square crop window (x0, y0, side) with side = min(H, W),
/// centered on the bbox center and translated the minimum distance needed to
/// lie inside the image.
pub fn crop_region(height: usize, width: usize, bbox: &BBox) -> Result<(usize, usize, usize)> {
    if height == 0 || width == 0 {
        return Err(Error::Image("degenerate image with zero extent".into()));
    }
    bbox.validate(width as u32, height as u32)?;
    let side = height.min(width);
    let cx = (bbox.x0 + bbox.x1) as f64 / 2.0;
    let cy = (bbox.y0 + bbox.y1) as f64 / 2.0;
    let clamp = |center: f64, limit: usize| -> usize {
        let ideal = center - side as f64 / 2.0;
        ideal.round().clamp(0.0, (limit - side) as f64) as usize
    };
    Ok((clamp(cx, width), clamp(cy, height), side))
}

/// Crops the largest square that encompasses the tumor: side min(H, W),
/// bbox-centered, clamped inside the image. When the bbox fits in such a
/// square, the crop fully contains it.
pub fn crop_tumor_square<T: Scalar>(image: &Array2<T>, bbox: &BBox) -> Result<Array2<T>> {
    let (h, w) = image.dim();
    let (x0, y0, side) = crop_region(h, w, bbox)?;
    Ok(image
        .slice(ndarray::s![y0..y0 + side, x0..x0 + side])
        .to_owned())
}

/// Bilinear resize to a square target. Same-size inputs are copied exactly;
/// interpolation weights are convex so intensities stay within the input
/// range.
pub fn resize_bilinear<T: Scalar>(image: &Array2<T>, target: usize) -> Array2<T> {
    let (h, w) = image.dim();
    if h == target && w == target {
        return image.clone();
    }
    let mut out = Array2::zeros((target, target));
    let scale_y = h as f64 / target as f64;
    let scale_x = w as f64 / target as f64;
    for oy in 0..target {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..target {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = image[[y0, x0]] * s::<T>(1.0 - fx) + image[[y0, x1]] * s::<T>(fx);
            let bottom = image[[y1, x0]] * s::<T>(1.0 - fx) + image[[y1, x1]] * s::<T>(fx);
            out[[oy, ox]] = top * s::<T>(1.0 - fy) + bottom * s::<T>(fy);
        }
    }
    out
}

/// Histogram equalization over 256 intensity bins. A constant image maps to
/// itself; otherwise the cumulative distribution is rescaled to [0, 1], which
/// preserves the intensity ordering of pixels.
pub fn equalize_histogram<T: Scalar>(image: &Array2<T>) -> Array2<T> {
    const BINS: usize = 256;
    let n = image.len();
    let bin_of = |v: T| -> usize {
        ((v.as_f64().clamp(0.0, 1.0)) * 255.0).floor() as usize
    };
    let mut histogram = [0usize; BINS];
    for &v in image.iter() {
        histogram[bin_of(v)] += 1;
    }
    let mut cdf = [0usize; BINS];
    let mut running = 0;
    for (b, count) in histogram.iter().enumerate() {
        running += count;
        cdf[b] = running;
    }
    let cdf_min = cdf
        .iter()
        .copied()
        .find(|&c| c > 0)
        .unwrap_or(0);
    if cdf_min == n {
        // Single occupied bin: equalizing a constant image is the identity.
        return image.clone();
    }
    let denom = (n - cdf_min) as f64;
    image.mapv(|v| s::<T>((cdf[bin_of(v)] - cdf_min) as f64 / denom))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (2.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    kernel
}

fn reflect(i: i64, n: i64) -> usize {
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with kernel radius ceil(2*sigma) and reflective
/// borders.
pub fn gaussian_smooth<T: Scalar>(image: &Array2<T>, sigma: f64) -> Array2<T> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (h, w) = image.dim();
    let mut horizontal: Array2<T> = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &weight) in kernel.iter().enumerate() {
                let sx = reflect(x as i64 + k as i64 - radius, w as i64);
                acc += weight * image[[y, sx]].as_f64();
            }
            horizontal[[y, x]] = s(acc);
        }
    }
    let mut out: Array2<T> = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &weight) in kernel.iter().enumerate() {
                let sy = reflect(y as i64 + k as i64 - radius, h as i64);
                acc += weight * horizontal[[sy, x]].as_f64();
            }
            out[[y, x]] = s(acc);
        }
    }
    out
}

/// Builds the 3-channel encoder input from one gray image: channel 0 is the
/// gray image, channel 1 its histogram equalization, channel 2 a Gaussian
/// smoothing. With `use_three_channels` off, the gray channel is replicated
/// so the encoder input shape never changes.
pub fn synthesize_channels<T: Scalar>(
    gray: &Array2<T>,
    config: &PreprocessConfig,
) -> Array3<T> {
    let (h, w) = gray.dim();
    let mut out = Array3::zeros((3, h, w));
    out.index_axis_mut(ndarray::Axis(0), 0).assign(gray);
    if config.use_three_channels {
        out.index_axis_mut(ndarray::Axis(0), 1)
            .assign(&equalize_histogram(gray));
        out.index_axis_mut(ndarray::Axis(0), 2)
            .assign(&gaussian_smooth(gray, config.smoothing_sigma));
    } else {
        out.index_axis_mut(ndarray::Axis(0), 1).assign(gray);
        out.index_axis_mut(ndarray::Axis(0), 2).assign(gray);
    }
    out
}

/// Exact horizontal mirror; applying it twice recovers the input bitwise.
pub fn hflip<T: Scalar>(image: &Array3<T>) -> Array3<T> {
    let (c, h, w) = image.dim();
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ci, y, x]] = image[[ci, y, w - 1 - x]];
            }
        }
    }
    out
}

/// One random draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub zoom: f64,
    pub shift_x: f64,
    pub rotation_rad: f64,
    pub shear_rad: f64,
    pub flip: bool,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        Self {
            zoom: 1.0,
            shift_x: 0.0,
            rotation_rad: 0.0,
            shear_rad: 0.0,
            flip: false,
        }
    }

    fn is_identity_affine(&self) -> bool {
        self.zoom == 1.0
            && self.shift_x == 0.0
            && self.rotation_rad == 0.0
            && self.shear_rad == 0.0
    }
}

fn sample_range(rng: &mut ChaCha8Rng, half_range: f64) -> f64 {
    if half_range == 0.0 {
        0.0
    } else {
        rng.random_range(-half_range..=half_range)
    }
}

/// Draws one set of augmentation parameters from a per-sample stream seed.
pub fn draw_augmentation(config: &AugmentConfig, sample_seed: u64) -> AugmentDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let zoom = 1.0 + sample_range(&mut rng, config.zoom_range);
    let shift_x = sample_range(&mut rng, config.width_shift);
    let rotation_rad = sample_range(&mut rng, config.rotation_deg).to_radians();
    let shear_rad = sample_range(&mut rng, config.shear);
    let flip = config.horizontal_flip && rng.random_range(0.0..1.0) < 0.5;
    AugmentDraw {
        zoom,
        shift_x,
        rotation_rad,
        shear_rad,
        flip,
    }
}

/// Applies one drawn geometric transform to all channels, sampling the source
/// bilinearly and filling out-of-frame lookups with the nearest edge pixel.
pub fn apply_augmentation<T: Scalar>(image: &Array3<T>, draw: &AugmentDraw) -> Array3<T> {
    let flipped;
    let source = if draw.flip {
        flipped = hflip(image);
        &flipped
    } else {
        image
    };
    if draw.is_identity_affine() {
        return source.clone();
    }

    let (c, h, w) = source.dim();
    // Forward map: p_out = C + Z*Sh*R*(p - C) + t. Sampling inverts it.
    let (sin_r, cos_r) = draw.rotation_rad.sin_cos();
    let shear_t = draw.shear_rad.tan();
    let z = draw.zoom;
    // A = Z * Shear * Rotation
    let a00 = z * (cos_r + shear_t * sin_r);
    let a01 = z * (-sin_r + shear_t * cos_r);
    let a10 = z * sin_r;
    let a11 = z * cos_r;
    let det = a00 * a11 - a01 * a10;
    let inv00 = a11 / det;
    let inv01 = -a01 / det;
    let inv10 = -a10 / det;
    let inv11 = a00 / det;
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let tx = draw.shift_x * w as f64;

    let mut out = Array3::zeros((c, h, w));
    for oy in 0..h {
        let dy = oy as f64 - cy;
        for ox in 0..w {
            let dx = ox as f64 - cx - tx;
            let sx = (inv00 * dx + inv01 * dy + cx).clamp(0.0, (w - 1) as f64);
            let sy = (inv10 * dx + inv11 * dy + cy).clamp(0.0, (h - 1) as f64);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            for ci in 0..c {
                let top = source[[ci, y0, x0]] * s::<T>(1.0 - fx)
                    + source[[ci, y0, x1]] * s::<T>(fx);
                let bottom = source[[ci, y1, x0]] * s::<T>(1.0 - fx)
                    + source[[ci, y1, x1]] * s::<T>(fx);
                out[[ci, oy, ox]] = top * s::<T>(1.0 - fy) + bottom * s::<T>(fy);
            }
        }
    }
    out
}

/// Random training augmentation for one sample: draws transform parameters
/// from the per-sample stream seed and applies them to all channels. Task
/// targets pass through unchanged.
pub fn augment<T: Scalar>(
    image: &Array3<T>,
    targets: &TaskTargets,
    config: &AugmentConfig,
    sample_seed: u64,
) -> (Array3<T>, TaskTargets) {
    let draw = draw_augmentation(config, sample_seed);
    (apply_augmentation(image, &draw), targets.clone())
}

/// Full inference-time pipeline for one record: load, optionally crop the
/// tumor square, resize, and synthesize channels.
pub fn preprocess_record<T: Scalar>(
    record: &ImageRecord,
    config: &PreprocessConfig,
) -> Result<Array3<T>> {
    let gray = load_grayscale::<T>(&record.image_path)?;
    preprocess_image(&gray, &record.bbox, config)
}

/// Pipeline starting from an already-loaded gray image.
pub fn preprocess_image<T: Scalar>(
    gray: &Array2<T>,
    bbox: &BBox,
    config: &PreprocessConfig,
) -> Result<Array3<T>> {
    config.validate()?;
    let square = if config.use_crop {
        crop_tumor_square(gray, bbox)?
    } else {
        let (h, w) = gray.dim();
        let side = h.min(w);
        // Without tumor-guided cropping the image is center-cropped to a
        // square so the resize never distorts the aspect ratio differently
        // across configurations.
        let y0 = (h - side) / 2;
        let x0 = (w - side) / 2;
        gray.slice(ndarray::s![y0..y0 + side, x0..x0 + side]).to_owned()
    };
    let resized = resize_bilinear(&square, config.target_size);
    Ok(synthesize_channels(&resized, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn ramp(h: usize, w: usize) -> Array2<f32> {
        Array2::from_shape_fn((h, w), |(_, x)| x as f32 / (w - 1) as f32)
    }

    #[test]
    fn crop_region_matches_centering_and_clamp_rule() {
        // Wide image, interior bbox: center (400, 200), side 400.
        let bbox = BBox::new(300, 100, 500, 300);
        assert_eq!(crop_region(400, 800, &bbox).unwrap(), (200, 0, 400));
        // Bbox hugging the left edge: the square goes flush with x = 0.
        let bbox = BBox::new(0, 150, 120, 260);
        assert_eq!(crop_region(400, 800, &bbox).unwrap(), (0, 0, 400));
    }

    #[test]
    fn crop_is_identity_on_square_images() {
        let img = ramp(64, 64);
        let bbox = BBox::new(20, 20, 44, 44);
        let cropped = crop_tumor_square(&img, &bbox).unwrap();
        assert_eq!(cropped, img);
    }

    #[test]
    fn crop_contains_bbox_when_it_fits() {
        let bbox = BBox::new(250, 10, 299, 90);
        let (x0, y0, side) = crop_region(100, 300, &bbox).unwrap();
        assert_eq!(side, 100);
        assert!(x0 as u32 <= bbox.x0 && bbox.x1 <= (x0 + side) as u32);
        assert!(y0 as u32 <= bbox.y0 && bbox.y1 <= (y0 + side) as u32);
    }

    #[test]
    fn crop_rejects_degenerate_images() {
        assert!(crop_region(0, 10, &BBox::new(0, 0, 1, 1)).is_err());
    }

    #[test]
    fn resize_same_size_is_bitwise_identity() {
        let img = ramp(256, 256);
        assert_eq!(resize_bilinear(&img, 256), img);
    }

    #[test]
    fn resize_preserves_constants_and_range() {
        let img = Array2::from_elem((512, 512), 0.375f32);
        let out = resize_bilinear(&img, 256);
        assert!(out.iter().all(|&v| v == 0.375));

        let img = ramp(400, 400);
        let out = resize_bilinear(&img, 256);
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn resize_keeps_ramp_monotone() {
        let img = ramp(400, 400);
        let out = resize_bilinear(&img, 256);
        for row in out.rows() {
            for pair in row.as_slice().unwrap().windows(2) {
                assert!(pair[1] >= pair[0] - 1e-6);
            }
        }
    }

    #[test]
    fn equalize_constant_is_identity() {
        let img = Array2::from_elem((32, 32), 0.6f32);
        assert_eq!(equalize_histogram(&img), img);
    }

    #[test]
    fn equalize_ramp_gives_uniform_cdf() {
        // 256 columns, one intensity per column: the equalized histogram must
        // be uniform within one quantization step.
        let img = Array2::from_shape_fn((256, 256), |(_, x)| x as f32 / 255.0);
        let eq = equalize_histogram(&img);
        let mut hist = [0usize; 256];
        for &v in eq.iter() {
            hist[((v as f64) * 255.0).round() as usize] += 1;
        }
        let n = eq.len() as f64;
        let mut running = 0.0;
        for (bin, count) in hist.iter().enumerate() {
            running += *count as f64;
            let ideal = (bin + 1) as f64 / 256.0;
            assert!(
                (running / n - ideal).abs() < 2.0 / 256.0,
                "cdf deviation too large at bin {bin}"
            );
        }
    }

    #[test]
    fn equalize_preserves_ordering() {
        let img = Array2::from_shape_fn((40, 40), |(y, x)| {
            ((x * 7 + y * 3) % 101) as f32 / 100.0
        });
        let eq = equalize_histogram(&img);
        let mut pairs: Vec<(f32, f32)> =
            img.iter().copied().zip(eq.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for window in pairs.windows(2) {
            assert!(window[1].1 >= window[0].1);
        }
    }

    #[test]
    fn smoothing_reduces_an_isolated_peak() {
        let mut img = Array2::zeros((31, 31));
        img[[15, 15]] = 1.0f32;
        let smoothed = gaussian_smooth(&img, 1.0);
        assert!(smoothed[[15, 15]] < 1.0);
        assert!(smoothed[[15, 15]] > 0.0);
    }

    #[test]
    fn channels_have_fixed_shape_in_all_configurations() {
        let img = ramp(64, 64);
        for three in [true, false] {
            let cfg = PreprocessConfig {
                target_size: 64,
                use_three_channels: three,
                ..Default::default()
            };
            let out = synthesize_channels(&img, &cfg);
            assert_eq!(out.dim(), (3, 64, 64));
        }
    }

    #[test]
    fn constant_image_synthesizes_constant_channels() {
        let img = Array2::from_elem((64, 64), 0.42f32);
        let out = synthesize_channels(&img, &PreprocessConfig::default());
        assert!(out
            .index_axis(ndarray::Axis(0), 1)
            .iter()
            .all(|&v| v == 0.42));
        assert!(out
            .index_axis(ndarray::Axis(0), 2)
            .iter()
            .all(|&v| (v - 0.42).abs() < 1e-6));
    }

    #[test]
    fn double_flip_is_identity() {
        let img = Array3::from_shape_fn((3, 16, 16), |(c, y, x)| {
            (c * 331 + y * 17 + x) as f32 / 997.0
        });
        assert_eq!(hflip(&hflip(&img)), img);
    }

    #[test]
    fn null_augmentation_is_identity() {
        let cfg = AugmentConfig {
            zoom_range: 0.0,
            width_shift: 0.0,
            rotation_deg: 0.0,
            shear: 0.0,
            horizontal_flip: false,
            seed: 9,
        };
        let img = Array3::from_shape_fn((3, 24, 24), |(c, y, x)| {
            ((c + 2) * (y + 3) * (x + 5)) as f32 / 5000.0
        });
        let draw = draw_augmentation(&cfg, cfg.sample_seed(0, 0));
        assert_eq!(draw, AugmentDraw::identity());
        let out = apply_augmentation(&img, &draw);
        assert_eq!(out, img);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn crop_window_is_square_and_inside(
                h in 2usize..300,
                w in 2usize..300,
                x0 in 0u32..299,
                y0 in 0u32..299,
                dx in 1u32..300,
                dy in 1u32..300,
            ) {
                let x0 = x0.min(w as u32 - 1);
                let y0 = y0.min(h as u32 - 1);
                let bbox = BBox::new(
                    x0,
                    y0,
                    (x0 + dx).min(w as u32),
                    (y0 + dy).min(h as u32),
                );
                let (cx, cy, side) = crop_region(h, w, &bbox).unwrap();
                prop_assert_eq!(side, h.min(w));
                prop_assert!(cx + side <= w);
                prop_assert!(cy + side <= h);
                if bbox.width() as usize <= side && bbox.height() as usize <= side {
                    prop_assert!(cx as u32 <= bbox.x0 && bbox.x1 <= (cx + side) as u32);
                    prop_assert!(cy as u32 <= bbox.y0 && bbox.y1 <= (cy + side) as u32);
                }
            }

            #[test]
            fn resize_stays_within_input_range(
                h in 1usize..64,
                w in 1usize..64,
                target in 1usize..96,
                seed in 0u64..1000,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let img = Array2::from_shape_fn((h, w), |_| rng.random_range(0.0f32..1.0));
                let lo = img.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let out = resize_bilinear(&img, target);
                prop_assert_eq!(out.dim(), (target, target));
                for &v in out.iter() {
                    prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
                }
            }
        }
    }

    #[test]
    fn augmentation_is_reproducible_and_label_preserving() {
        let cfg = AugmentConfig::default();
        let img = Array3::from_shape_fn((3, 32, 32), |(c, y, x)| {
            ((c * 7 + y * 3 + x) % 19) as f32 / 19.0
        });
        let targets = crate::lexicon::encode_labels(
            &crate::lexicon::DescriptorLabels {
                shape: crate::lexicon::ShapeClass::Oval,
                orientation: crate::lexicon::OrientationClass::Parallel,
                margin: crate::lexicon::MarginClass::circumscribed(),
                echo: crate::lexicon::EchoPatternClass::Anechoic,
                posterior: crate::lexicon::PosteriorClass::None,
            },
            crate::lexicon::BiradsCategory::Cat3,
            crate::lexicon::TumorClass::Benign,
        )
        .unwrap();
        let seed = cfg.sample_seed(4, 17);
        let (a, ta) = augment(&img, &targets, &cfg, seed);
        let (b, tb) = augment(&img, &targets, &cfg, seed);
        assert_eq!(a, b);
        assert_eq!(ta, targets);
        assert_eq!(tb, targets);
        let other = cfg.sample_seed(4, 18);
        let (c, _) = augment(&img, &targets, &cfg, other);
        assert_ne!(a, c);
    }
}
