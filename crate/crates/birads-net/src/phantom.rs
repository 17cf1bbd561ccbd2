//! Synthetic breast-ultrasound-like phantoms with self-consistent labels.
//!
//! Each phantom is a mass rendered over multiplicative speckle. Every
//! descriptor steers a visual property:
//!
//! - shape: ellipse (oval), near-circle (round), or wobbled ellipse (irregular)
//! - orientation: major axis horizontal (parallel) or vertical (not parallel)
//! - margin: sharp vs blurred boundary; the sub-types add corners, scallops,
//!   or radiating spikes
//! - echo pattern: interior brightness and texture
//! - posterior features: brightening/darkening of the column beneath the mass
//!
//! A deterministic [`ScoringRule`] turns descriptor labels into an assessment
//! category and tumor class, so generated datasets are consistent across all
//! eleven task targets. The default rule weights margin highest, then shape
//! and orientation, then echo pattern and posterior features.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{manifest_row, write_manifest_rows, BBox, DatasetManifest, ImageRecord};
use crate::error::{Error, Result};
use crate::lexicon::{
    BiradsCategory, DescriptorLabels, EchoPatternClass, MarginClass, OrientationClass,
    PosteriorClass, ShapeClass, TumorClass,
};
use crate::util::derive_seed;

/// Specification of one phantom image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub labels: DescriptorLabels,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        self.labels.validate()?;
        if self.height < 64 || self.width < 64 {
            return Err(Error::Config(format!(
                "phantom must be at least 64x64, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// A rendered phantom: the grayscale image in [0, 1] and the tight bbox of
/// the mass.
#[derive(Debug, Clone)]
pub struct RenderedPhantom {
    pub image: Array2<f32>,
    pub bbox: BBox,
}

/// Maps descriptor findings to an assessment category and tumor class.
/// The score is a weighted count of suspicious findings; category bins and
/// the malignant cutoff are monotone in the score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringRule {
    pub margin_not_circumscribed: u32,
    pub shape_irregular: u32,
    pub orientation_not_parallel: u32,
    pub echo_suspicious: u32,
    pub posterior_suspicious: u32,
    /// Minimum scores for categories 4A, 4B, 4C, 5 (category 3 below).
    pub category_thresholds: [u32; 4],
    /// Minimum score for the malignant class.
    pub malignant_threshold: u32,
}

impl Default for ScoringRule {
    fn default() -> Self {
        Self {
            margin_not_circumscribed: 3,
            shape_irregular: 2,
            orientation_not_parallel: 2,
            echo_suspicious: 1,
            posterior_suspicious: 1,
            category_thresholds: [1, 3, 5, 7],
            malignant_threshold: 5,
        }
    }
}

impl ScoringRule {
    /// Weighted suspicious-finding score of one label set.
    pub fn score(&self, labels: &DescriptorLabels) -> u32 {
        let mut score = 0;
        if !labels.margin.circumscribed {
            score += self.margin_not_circumscribed;
        }
        if labels.shape == ShapeClass::Irregular {
            score += self.shape_irregular;
        }
        if labels.orientation == OrientationClass::NotParallel {
            score += self.orientation_not_parallel;
        }
        if matches!(
            labels.echo,
            EchoPatternClass::Hypoechoic
                | EchoPatternClass::Heterogeneous
                | EchoPatternClass::ComplexCysticSolid
        ) {
            score += self.echo_suspicious;
        }
        if matches!(
            labels.posterior,
            PosteriorClass::Shadowing | PosteriorClass::Combined
        ) {
            score += self.posterior_suspicious;
        }
        score
    }
}

/// Applies the scoring rule: suspicious-finding score -> assessment category
/// and tumor class.
pub fn score_labels(labels: &DescriptorLabels, rule: &ScoringRule) -> (BiradsCategory, TumorClass) {
    let score = rule.score(labels);
    let [t4a, t4b, t4c, t5] = rule.category_thresholds;
    let category = if score >= t5 {
        BiradsCategory::Cat5
    } else if score >= t4c {
        BiradsCategory::Cat4C
    } else if score >= t4b {
        BiradsCategory::Cat4B
    } else if score >= t4a {
        BiradsCategory::Cat4A
    } else {
        BiradsCategory::Cat3
    };
    let tumor = if score >= rule.malignant_threshold {
        TumorClass::Malignant
    } else {
        TumorClass::Benign
    };
    (category, tumor)
}

struct MassGeometry {
    cx: f64,
    cy: f64,
    semi_x: f64,
    semi_y: f64,
    wobble: Vec<(f64, f64, f64)>, // (amplitude, frequency, phase)
    lobe_amp: f64,
    lobe_freq: f64,
    lobe_phase: f64,
    corner_amp: f64,
    corner_freq: f64,
    corner_phase: f64,
    spike_amp: f64,
    spike_freq: f64,
    spike_phase: f64,
    edge_softness: f64,
    parallel: bool,
}

impl MassGeometry {
    /// Radial boundary multiplier at parametric angle theta. All texture
    /// terms bump outward only and are damped away from the major axis so
    /// the mass bbox keeps the orientation implied by the labels.
    fn boundary(&self, theta: f64) -> f64 {
        let alignment = if self.parallel {
            theta.cos().abs()
        } else {
            theta.sin().abs()
        };
        let wobble_gate = 0.6 + 0.4 * alignment * alignment;
        let spike_gate = alignment.powi(4);
        let mut g = 1.0;
        for &(amp, freq, phase) in &self.wobble {
            g += amp * wobble_gate * (0.5 + 0.5 * (freq * theta + phase).sin());
        }
        g += self.lobe_amp * wobble_gate * (0.5 + 0.5 * (self.lobe_freq * theta + self.lobe_phase).sin());
        g += self.corner_amp * wobble_gate * triangle_wave(self.corner_freq * theta + self.corner_phase);
        g += self.spike_amp
            * spike_gate
            * (self.spike_freq * theta + self.spike_phase).cos().max(0.0).powi(10);
        g
    }
}

fn triangle_wave(t: f64) -> f64 {
    let phase = (t / std::f64::consts::TAU).fract();
    let phase = if phase < 0.0 { phase + 1.0 } else { phase };
    1.0 - (2.0 * phase - 1.0).abs()
}

fn draw_geometry(
    spec: &PhantomSpec,
    rng: &mut ChaCha8Rng,
    perturbation_scale: f64,
) -> MassGeometry {
    let labels = &spec.labels;
    let (h, w) = (spec.height as f64, spec.width as f64);
    let min_side = h.min(w);
    let cx = rng.random_range(0.38..0.62) * w;
    let cy = rng.random_range(0.30..0.45) * h;
    let base_radius = rng.random_range(0.11..0.15) * min_side;

    let ratio = match labels.shape {
        ShapeClass::Oval => rng.random_range(1.5..1.9),
        ShapeClass::Round => rng.random_range(1.08..1.10),
        ShapeClass::Irregular => rng.random_range(1.5..1.85),
    };
    let parallel = labels.orientation == OrientationClass::Parallel;
    let (semi_x, semi_y) = if parallel {
        (base_radius * ratio, base_radius)
    } else {
        (base_radius, base_radius * ratio)
    };

    let mut wobble = Vec::new();
    if labels.shape == ShapeClass::Irregular {
        for k in 2..5 {
            wobble.push((
                rng.random_range(0.08..0.14) * perturbation_scale,
                k as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
            ));
        }
    } else {
        // Keep the noise-draw count identical across shapes.
        for _ in 2..5 {
            let _ = rng.random_range(0.0..1.0);
            let _ = rng.random_range(0.0..std::f64::consts::TAU);
        }
    }

    let round = labels.shape == ShapeClass::Round;
    let m = &labels.margin;
    let lobe_amp = if m.microlobulated {
        (if round { 0.04 } else { 0.08 }) * perturbation_scale
    } else {
        0.0
    };
    let corner_amp = if m.angular {
        (if round { 0.05 } else { 0.12 }) * perturbation_scale
    } else {
        0.0
    };
    let spike_amp = if m.spiculated { 0.30 * perturbation_scale } else { 0.0 };

    MassGeometry {
        cx,
        cy,
        semi_x,
        semi_y,
        wobble,
        lobe_amp,
        lobe_freq: rng.random_range(10.0f64..14.0).round(),
        lobe_phase: rng.random_range(0.0..std::f64::consts::TAU),
        corner_amp,
        corner_freq: rng.random_range(5.0f64..7.0).round(),
        corner_phase: rng.random_range(0.0..std::f64::consts::TAU),
        spike_amp,
        spike_freq: rng.random_range(6.0f64..9.0).round(),
        spike_phase: rng.random_range(0.0..std::f64::consts::TAU),
        edge_softness: if m.indistinct { 0.30 } else { 0.03 },
        parallel,
    }
}

struct EchoModel {
    base: f64,
    texture_sigma: f64,
    split_dir: (f64, f64),
    blob: [(f64, f64, f64); 2],
}

fn draw_echo_model(echo: EchoPatternClass, rng: &mut ChaCha8Rng) -> EchoModel {
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let blob = [
        (
            rng.random_range(0.05..0.12),
            rng.random_range(0.05..0.12),
            rng.random_range(0.0..std::f64::consts::TAU),
        ),
        (
            rng.random_range(0.04..0.10),
            rng.random_range(0.04..0.10),
            rng.random_range(0.0..std::f64::consts::TAU),
        ),
    ];
    let (base, texture_sigma) = match echo {
        EchoPatternClass::Anechoic => (0.05, 0.08),
        EchoPatternClass::Hypoechoic => (0.20, 0.22),
        EchoPatternClass::Isoechoic => (0.35, 0.30),
        EchoPatternClass::Hyperechoic => (0.68, 0.20),
        EchoPatternClass::ComplexCysticSolid => (0.0, 0.18),
        EchoPatternClass::Heterogeneous => (0.0, 0.18),
    };
    EchoModel {
        base,
        texture_sigma,
        split_dir: (angle.cos(), angle.sin()),
        blob,
    }
}

impl EchoModel {
    fn interior_value(&self, echo: EchoPatternClass, dx: f64, dy: f64) -> f64 {
        match echo {
            EchoPatternClass::ComplexCysticSolid => {
                if dx * self.split_dir.0 + dy * self.split_dir.1 > 0.0 {
                    0.10
                } else {
                    0.45
                }
            }
            EchoPatternClass::Heterogeneous => {
                let w0 = (self.blob[0].0 * dx + self.blob[0].1 * dy + self.blob[0].2).sin();
                let w1 = (self.blob[1].0 * dx - self.blob[1].1 * dy + self.blob[1].2).sin();
                let mix = 0.5 + 0.25 * w0 + 0.25 * w1;
                0.18 + 0.34 * mix
            }
            _ => self.base,
        }
    }
}

const BACKGROUND_LEVEL: f64 = 0.35;
const BACKGROUND_SPECKLE_SIGMA: f64 = 0.30;

fn speckle(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (sigma * z - sigma * sigma / 2.0).exp()
}

fn orientation_holds(bbox: &BBox, parallel: bool) -> bool {
    if parallel {
        bbox.width() > bbox.height()
    } else {
        bbox.height() > bbox.width()
    }
}

/// Renders one phantom deterministically from its spec, returning the image
/// and the tight mass bbox. The bbox aspect follows the orientation label;
/// if a perturbation draw breaks that, the render retries with progressively
/// damped perturbations (still fully seed-deterministic).
pub fn render_phantom(spec: &PhantomSpec) -> Result<RenderedPhantom> {
    spec.validate()?;
    let mut result = None;
    for attempt in 0..12u32 {
        let scale = 0.8f64.powi(attempt as i32);
        let rendered = render_attempt(spec, attempt, scale);
        let parallel = spec.labels.orientation == OrientationClass::Parallel;
        if orientation_holds(&rendered.bbox, parallel) {
            result = Some(rendered);
            break;
        }
        result = Some(rendered);
    }
    Ok(result.unwrap())
}

fn render_attempt(spec: &PhantomSpec, attempt: u32, perturbation_scale: f64) -> RenderedPhantom {
    let mut geom_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, geometry_stream(attempt)));
    let geometry = draw_geometry(spec, &mut geom_rng, perturbation_scale);
    let echo_model = draw_echo_model(spec.labels.echo, &mut geom_rng);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0x4e6f6973));

    let (h, w) = (spec.height, spec.width);
    let mut image = Array2::<f32>::zeros((h, w));
    let mut x_min = w;
    let mut x_max = 0usize;
    let mut y_min = h;
    let mut y_max = 0usize;

    for y in 0..h {
        for x in 0..w {
            let background = BACKGROUND_LEVEL * speckle(&mut noise_rng, BACKGROUND_SPECKLE_SIGMA);
            let interior_speckle = speckle(&mut noise_rng, echo_model.texture_sigma);

            let dx = (x as f64 - geometry.cx) / geometry.semi_x;
            let dy = (y as f64 - geometry.cy) / geometry.semi_y;
            let rho = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx);
            let boundary = geometry.boundary(theta);

            if rho <= boundary {
                x_min = x_min.min(x);
                x_max = x_max.max(x);
                y_min = y_min.min(y);
                y_max = y_max.max(y);
            }

            let alpha =
                ((boundary - rho) / geometry.edge_softness + 0.5).clamp(0.0, 1.0);
            let interior = echo_model.interior_value(
                spec.labels.echo,
                x as f64 - geometry.cx,
                y as f64 - geometry.cy,
            ) * interior_speckle;
            let value = background * (1.0 - alpha) + interior * alpha;
            image[[y, x]] = value as f32;
        }
    }

    let bbox = if x_min <= x_max && y_min <= y_max {
        BBox::new(x_min as u32, y_min as u32, (x_max + 1) as u32, (y_max + 1) as u32)
    } else {
        BBox::new(
            geometry.cx as u32 - 1,
            geometry.cy as u32 - 1,
            geometry.cx as u32 + 1,
            geometry.cy as u32 + 1,
        )
    };

    apply_posterior(&mut image, &bbox, spec.labels.posterior);
    image.mapv_inplace(|v| v.clamp(0.0, 1.0));
    RenderedPhantom { image, bbox }
}

fn geometry_stream(attempt: u32) -> u64 {
    0x47656f_u64.wrapping_mul(attempt as u64 + 1)
}

fn apply_posterior(image: &mut Array2<f32>, bbox: &BBox, posterior: PosteriorClass) {
    let (h, _) = image.dim();
    let (x0, x1) = (bbox.x0 as usize, bbox.x1 as usize);
    let y_start = bbox.y1 as usize;
    if y_start >= h || x0 >= x1 {
        return;
    }
    let mid = (x0 + x1) / 2;
    for y in y_start..h {
        for x in x0..x1 {
            let factor = match posterior {
                PosteriorClass::None => 1.0,
                PosteriorClass::Enhancement => 1.5,
                PosteriorClass::Shadowing => 0.45,
                PosteriorClass::Combined => {
                    if x < mid {
                        1.5
                    } else {
                        0.45
                    }
                }
            };
            image[[y, x]] *= factor as f32;
        }
    }
}

/// Dataset-generation knobs. The malignant fraction is targeted exactly via
/// class-conditional label sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateOptions {
    pub height: usize,
    pub width: usize,
    pub malignant_fraction: f64,
    pub rule: ScoringRule,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            height: 128,
            width: 160,
            malignant_fraction: 0.4,
            rule: ScoringRule::default(),
        }
    }
}

fn sample_labels(rng: &mut ChaCha8Rng) -> DescriptorLabels {
    let shape = match rng.random_range(0.0..1.0) {
        v if v < 0.40 => ShapeClass::Oval,
        v if v < 0.62 => ShapeClass::Round,
        _ => ShapeClass::Irregular,
    };
    let orientation = if rng.random_range(0.0..1.0) < 0.60 {
        OrientationClass::Parallel
    } else {
        OrientationClass::NotParallel
    };
    let margin = if rng.random_range(0.0..1.0) < 0.45 {
        MarginClass::circumscribed()
    } else {
        let mut flags = [false; 4];
        for flag in &mut flags {
            *flag = rng.random_range(0.0..1.0) < 0.35;
        }
        if !flags.iter().any(|&f| f) {
            flags[rng.random_range(0..4usize)] = true;
        }
        MarginClass::not_circumscribed(flags[0], flags[1], flags[2], flags[3])
    };
    let echo = match rng.random_range(0.0..1.0) {
        v if v < 0.15 => EchoPatternClass::Anechoic,
        v if v < 0.45 => EchoPatternClass::Hypoechoic,
        v if v < 0.60 => EchoPatternClass::Isoechoic,
        v if v < 0.75 => EchoPatternClass::Hyperechoic,
        v if v < 0.85 => EchoPatternClass::ComplexCysticSolid,
        _ => EchoPatternClass::Heterogeneous,
    };
    let posterior = match rng.random_range(0.0..1.0) {
        v if v < 0.40 => PosteriorClass::None,
        v if v < 0.60 => PosteriorClass::Enhancement,
        v if v < 0.85 => PosteriorClass::Shadowing,
        _ => PosteriorClass::Combined,
    };
    DescriptorLabels {
        shape,
        orientation,
        margin,
        echo,
        posterior,
    }
}

fn forced_labels(malignant: bool) -> DescriptorLabels {
    if malignant {
        DescriptorLabels {
            shape: ShapeClass::Irregular,
            orientation: OrientationClass::NotParallel,
            margin: MarginClass::not_circumscribed(false, false, false, true),
            echo: EchoPatternClass::Hypoechoic,
            posterior: PosteriorClass::Shadowing,
        }
    } else {
        DescriptorLabels {
            shape: ShapeClass::Oval,
            orientation: OrientationClass::Parallel,
            margin: MarginClass::circumscribed(),
            echo: EchoPatternClass::Isoechoic,
            posterior: PosteriorClass::None,
        }
    }
}

fn sample_labels_for_class(
    rng: &mut ChaCha8Rng,
    rule: &ScoringRule,
    want_malignant: bool,
) -> DescriptorLabels {
    for _ in 0..1000 {
        let labels = sample_labels(rng);
        let (_, class) = score_labels(&labels, rule);
        if (class == TumorClass::Malignant) == want_malignant {
            return labels;
        }
    }
    forced_labels(want_malignant)
}

/// Generates `n` phantoms under `out_dir`: one PNG per record, a manifest CSV
/// in the dataset schema, and a `generation.json` sidecar recording the seed,
/// options, and scoring rule. Reruns with the same arguments are
/// byte-identical. The malignant fraction tracks
/// `options.malignant_fraction` exactly (rounded to a whole record).
pub fn generate_dataset_with(
    n: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
    options: &GenerateOptions,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Config("phantom count must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&options.malignant_fraction) {
        return Err(Error::Config("malignant fraction must lie in [0, 1]".into()));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;

    let target_malignant = (n as f64 * options.malignant_fraction).round() as usize;
    // Interleave classes deterministically so any prefix is roughly balanced.
    let mut want_malignant = vec![false; n];
    let mut assigned = 0usize;
    for (i, flag) in want_malignant.iter_mut().enumerate() {
        let due = ((i + 1) as f64 * options.malignant_fraction).round() as usize;
        if assigned < due.min(target_malignant) {
            *flag = true;
            assigned += 1;
        }
    }

    let records: Result<Vec<(ImageRecord, String)>> = want_malignant
        .par_iter()
        .enumerate()
        .map(|(i, &malignant)| {
            let mut label_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x4c61_0000 + i as u64));
            let labels = sample_labels_for_class(&mut label_rng, &options.rule, malignant);
            let (category, tumor_class) = score_labels(&labels, &options.rule);

            let spec = PhantomSpec {
                labels,
                height: options.height,
                width: options.width,
                seed: derive_seed(seed, 0x5068_0000 + i as u64),
            };
            let rendered = render_phantom(&spec)?;

            let file_name = format!("img_{i:05}.png");
            let path = out_dir.join(&file_name);
            write_png(&rendered.image, &path)?;

            Ok((
                ImageRecord {
                    image_path: path,
                    bbox: rendered.bbox,
                    labels,
                    category,
                    tumor_class,
                },
                file_name,
            ))
        })
        .collect();
    let records = records?;

    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|(record, file_name)| manifest_row(record, file_name.clone()))
        .collect();
    write_manifest_rows(&rows, out_dir.join("manifest.csv"))?;

    let sidecar = serde_json::json!({
        "seed": seed,
        "count": n,
        "options": options,
    });
    fs::write(
        out_dir.join("generation.json"),
        serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::Config(e.to_string()))?
            + "\n",
    )?;

    Ok(DatasetManifest {
        records: records.into_iter().map(|(r, _)| r).collect(),
        source: out_dir.display().to_string(),
    })
}

/// [`generate_dataset_with`] under default options.
pub fn generate_dataset(n: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    generate_dataset_with(n, seed, out_dir, &GenerateOptions::default())
}

fn write_png(image: &Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = image.dim();
    let mut buffer = image::GrayImage::new(w as u32, h as u32);
    for (x, y, pixel) in buffer.enumerate_pixels_mut() {
        let v = image[[y as usize, x as usize]].clamp(0.0, 1.0);
        pixel.0[0] = (v * 255.0).round() as u8;
    }
    buffer
        .save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(
        shape: ShapeClass,
        orientation: OrientationClass,
        margin: MarginClass,
        echo: EchoPatternClass,
        posterior: PosteriorClass,
    ) -> DescriptorLabels {
        DescriptorLabels {
            shape,
            orientation,
            margin,
            echo,
            posterior,
        }
    }

    #[test]
    fn scoring_rule_worked_examples() {
        let rule = ScoringRule::default();
        let benign = labels(
            ShapeClass::Oval,
            OrientationClass::Parallel,
            MarginClass::circumscribed(),
            EchoPatternClass::Anechoic,
            PosteriorClass::None,
        );
        assert_eq!(rule.score(&benign), 0);
        assert_eq!(
            score_labels(&benign, &rule),
            (BiradsCategory::Cat3, TumorClass::Benign)
        );

        let malignant = labels(
            ShapeClass::Irregular,
            OrientationClass::NotParallel,
            MarginClass::not_circumscribed(true, false, false, true),
            EchoPatternClass::Hypoechoic,
            PosteriorClass::Shadowing,
        );
        assert_eq!(rule.score(&malignant), 9);
        assert_eq!(
            score_labels(&malignant, &rule),
            (BiradsCategory::Cat5, TumorClass::Malignant)
        );

        let middling = labels(
            ShapeClass::Oval,
            OrientationClass::Parallel,
            MarginClass::not_circumscribed(true, false, false, false),
            EchoPatternClass::Isoechoic,
            PosteriorClass::None,
        );
        assert_eq!(rule.score(&middling), 3);
        assert_eq!(
            score_labels(&middling, &rule),
            (BiradsCategory::Cat4B, TumorClass::Benign)
        );
    }

    #[test]
    fn scoring_is_monotone_in_each_finding() {
        let rule = ScoringRule::default();
        let base = labels(
            ShapeClass::Oval,
            OrientationClass::Parallel,
            MarginClass::circumscribed(),
            EchoPatternClass::Isoechoic,
            PosteriorClass::None,
        );
        let (base_cat, _) = score_labels(&base, &rule);

        let flips = [
            labels(ShapeClass::Irregular, base.orientation, base.margin, base.echo, base.posterior),
            labels(base.shape, OrientationClass::NotParallel, base.margin, base.echo, base.posterior),
            labels(
                base.shape,
                base.orientation,
                MarginClass::not_circumscribed(true, false, false, false),
                base.echo,
                base.posterior,
            ),
            labels(base.shape, base.orientation, base.margin, EchoPatternClass::Hypoechoic, base.posterior),
            labels(base.shape, base.orientation, base.margin, base.echo, PosteriorClass::Shadowing),
        ];
        for flipped in flips {
            let (cat, _) = score_labels(&flipped, &rule);
            assert!(cat >= base_cat);
        }
    }

    fn spec_with(labels_value: DescriptorLabels, seed: u64) -> PhantomSpec {
        PhantomSpec {
            labels: labels_value,
            height: 128,
            width: 160,
            seed,
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = spec_with(
            labels(
                ShapeClass::Irregular,
                OrientationClass::NotParallel,
                MarginClass::not_circumscribed(true, true, true, true),
                EchoPatternClass::Heterogeneous,
                PosteriorClass::Combined,
            ),
            77,
        );
        let a = render_phantom(&spec).unwrap();
        let b = render_phantom(&spec).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.bbox, b.bbox);
    }

    #[test]
    fn bbox_follows_orientation_label() {
        for seed in 0..30u64 {
            for orientation in [OrientationClass::Parallel, OrientationClass::NotParallel] {
                for shape in [ShapeClass::Oval, ShapeClass::Round, ShapeClass::Irregular] {
                    let margin = if seed % 2 == 0 {
                        MarginClass::not_circumscribed(false, true, true, true)
                    } else {
                        MarginClass::circumscribed()
                    };
                    let spec = spec_with(
                        labels(shape, orientation, margin, EchoPatternClass::Hypoechoic, PosteriorClass::None),
                        seed,
                    );
                    let rendered = render_phantom(&spec).unwrap();
                    if orientation == OrientationClass::Parallel {
                        assert!(
                            rendered.bbox.width() > rendered.bbox.height(),
                            "seed {seed} shape {shape:?}: bbox {:?}",
                            rendered.bbox
                        );
                    } else {
                        assert!(
                            rendered.bbox.height() > rendered.bbox.width(),
                            "seed {seed} shape {shape:?}: bbox {:?}",
                            rendered.bbox
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn shadowing_darkens_the_strip_below_the_mass() {
        let spec = spec_with(
            labels(
                ShapeClass::Oval,
                OrientationClass::Parallel,
                MarginClass::circumscribed(),
                EchoPatternClass::Hypoechoic,
                PosteriorClass::Shadowing,
            ),
            5,
        );
        let rendered = render_phantom(&spec).unwrap();
        let bbox = rendered.bbox;
        let image = &rendered.image;
        let (h, _) = image.dim();
        let strip = image.slice(ndarray::s![
            bbox.y1 as usize..h,
            bbox.x0 as usize..bbox.x1 as usize
        ]);
        let left = image.slice(ndarray::s![bbox.y1 as usize..h, 0..bbox.x0 as usize]);
        let right = image.slice(ndarray::s![bbox.y1 as usize..h, bbox.x1 as usize..]);
        let strip_mean = strip.iter().map(|&v| v as f64).sum::<f64>() / strip.len() as f64;
        let flank_mean = (left.iter().chain(right.iter()).map(|&v| v as f64).sum::<f64>())
            / (left.len() + right.len()) as f64;
        assert!(
            strip_mean < flank_mean,
            "strip {strip_mean} should be darker than flanks {flank_mean}"
        );
    }

    #[test]
    fn anechoic_and_hyperechoic_interiors_are_separable() {
        let mut anechoic_means = Vec::new();
        let mut hyperechoic_means = Vec::new();
        for seed in 0..5u64 {
            for (echo, acc) in [
                (EchoPatternClass::Anechoic, &mut anechoic_means),
                (EchoPatternClass::Hyperechoic, &mut hyperechoic_means),
            ] {
                let spec = spec_with(
                    labels(
                        ShapeClass::Oval,
                        OrientationClass::Parallel,
                        MarginClass::circumscribed(),
                        echo,
                        PosteriorClass::None,
                    ),
                    seed,
                );
                let rendered = render_phantom(&spec).unwrap();
                let b = rendered.bbox;
                // Sample the central half of the bbox to stay inside the mass.
                let cx0 = b.x0 + b.width() / 4;
                let cx1 = b.x1 - b.width() / 4;
                let cy0 = b.y0 + b.height() / 4;
                let cy1 = b.y1 - b.height() / 4;
                let interior = rendered.image.slice(ndarray::s![
                    cy0 as usize..cy1 as usize,
                    cx0 as usize..cx1 as usize
                ]);
                acc.push(
                    interior.iter().map(|&v| v as f64).sum::<f64>() / interior.len() as f64,
                );
            }
        }
        let anechoic = anechoic_means.iter().sum::<f64>() / anechoic_means.len() as f64;
        let hyperechoic =
            hyperechoic_means.iter().sum::<f64>() / hyperechoic_means.len() as f64;
        assert!(
            hyperechoic - anechoic >= 0.2,
            "anechoic {anechoic} vs hyperechoic {hyperechoic}"
        );
    }

    #[test]
    fn generated_dataset_is_deterministic_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let manifest = generate_dataset(12, 1, &out_a).unwrap();
        assert_eq!(manifest.len(), 12);
        generate_dataset(12, 1, &out_b).unwrap();
        let bytes_a = fs::read(out_a.join("manifest.csv")).unwrap();
        let bytes_b = fs::read(out_b.join("manifest.csv")).unwrap();
        assert_eq!(bytes_a, bytes_b);
        let img_a = fs::read(out_a.join("img_00003.png")).unwrap();
        let img_b = fs::read(out_b.join("img_00003.png")).unwrap();
        assert_eq!(img_a, img_b);

        // Every generated row passes full manifest validation.
        let loaded = crate::dataset::load_manifest(out_a.join("manifest.csv")).unwrap();
        assert_eq!(loaded.len(), 12);
        let (benign, malignant) = loaded.class_counts();
        assert_eq!(benign + malignant, 12);
        let fraction = malignant as f64 / 12.0;
        assert!((0.3..=0.5).contains(&fraction), "fraction {fraction}");
    }
}
