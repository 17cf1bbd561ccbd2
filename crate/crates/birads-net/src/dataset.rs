//! Manifest-driven dataset loading, validation, and stratified
//! cross-validation splits.
//!
//! A dataset is described by a UTF-8 CSV manifest with the exact header
//! [`MANIFEST_HEADER`]. Image paths may be relative to the manifest file.
//! Fold plans assign every record index to train/validation/test sets per
//! fold, stratified by tumor class, and serialize to JSON.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{
    BiradsCategory, DescriptorLabels, MarginClass, TumorClass,
};
use crate::util::derive_seed;

/// Tumor-enclosing bounding box in pixel coordinates, half-open on the
/// upper edges: x in [x0, x1), y in [y0, y1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    /// Checks 0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height.
    pub fn validate(&self, image_width: u32, image_height: u32) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::Image(format!(
                "degenerate bbox ({},{},{},{})",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        if self.x1 > image_width || self.y1 > image_height {
            return Err(Error::Image(format!(
                "bbox ({},{},{},{}) exceeds image {}x{}",
                self.x0, self.y0, self.x1, self.y1, image_width, image_height
            )));
        }
        Ok(())
    }
}

/// One annotated image: path, tumor bounding box, and all ground-truth labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_path: PathBuf,
    pub bbox: BBox,
    pub labels: DescriptorLabels,
    pub category: BiradsCategory,
    pub tumor_class: TumorClass,
}

/// An ordered collection of records; order is the manifest file order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub source: String,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let malignant = self
            .records
            .iter()
            .filter(|r| r.tumor_class == TumorClass::Malignant)
            .count();
        (self.records.len() - malignant, malignant)
    }
}

/// Exact manifest header, column order included.
pub const MANIFEST_HEADER: [&str; 16] = [
    "image_path",
    "bbox_x0",
    "bbox_y0",
    "bbox_x1",
    "bbox_y1",
    "tumor_class",
    "shape",
    "orientation",
    "margin",
    "margin_indistinct",
    "margin_angular",
    "margin_microlobulated",
    "margin_spiculated",
    "echo_pattern",
    "posterior",
    "birads_category",
];

fn row_err(row: usize, message: impl Into<String>) -> Error {
    Error::ManifestRow {
        row,
        message: message.into(),
    }
}

fn parse_flag(text: &str, field: &str, row: usize) -> Result<bool> {
    match text {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(row_err(
            row,
            format!("field `{field}`: expected 0 or 1, got `{other}`"),
        )),
    }
}

fn parse_u32(text: &str, field: &str, row: usize) -> Result<u32> {
    text.parse::<u32>()
        .map_err(|_| row_err(row, format!("field `{field}`: invalid integer `{text}`")))
}

/// Loads and validates a manifest CSV.
///
/// Every row is checked: enum vocabulary, margin sub-type consistency,
/// trainable category, image decodability, and bounding box versus the
/// actual image dimensions. Row numbers in errors are 1-based data rows.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| {
        Error::ManifestSchema(format!("cannot open {}: {e}", path.display()))
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));

    let headers = reader
        .headers()
        .map_err(|e| Error::ManifestSchema(format!("cannot read header: {e}")))?
        .clone();
    for (i, expected) in MANIFEST_HEADER.iter().enumerate() {
        match headers.get(i) {
            Some(actual) if actual == *expected => {}
            Some(actual) => {
                return Err(Error::ManifestSchema(format!(
                    "column {i} is `{actual}`, expected `{expected}`"
                )))
            }
            None => {
                return Err(Error::ManifestSchema(format!(
                    "missing column `{expected}`"
                )))
            }
        }
    }
    if headers.len() != MANIFEST_HEADER.len() {
        return Err(Error::ManifestSchema(format!(
            "expected {} columns, found {}",
            MANIFEST_HEADER.len(),
            headers.len()
        )));
    }

    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let row_no = idx + 1;
        let row = row.map_err(|e| row_err(row_no, format!("unreadable row: {e}")))?;
        if row.len() != MANIFEST_HEADER.len() {
            return Err(row_err(
                row_no,
                format!("expected {} fields, found {}", MANIFEST_HEADER.len(), row.len()),
            ));
        }
        let field = |i: usize| row.get(i).unwrap().trim();

        let raw_path = PathBuf::from(field(0));
        let image_path = if raw_path.is_absolute() {
            raw_path
        } else {
            base_dir.join(raw_path)
        };
        let bbox = BBox::new(
            parse_u32(field(1), "bbox_x0", row_no)?,
            parse_u32(field(2), "bbox_y0", row_no)?,
            parse_u32(field(3), "bbox_x1", row_no)?,
            parse_u32(field(4), "bbox_y1", row_no)?,
        );
        let tumor_class: TumorClass = field(5)
            .parse()
            .map_err(|e| row_err(row_no, format!("field `tumor_class`: {e}")))?;
        let shape = field(6)
            .parse()
            .map_err(|e| row_err(row_no, format!("field `shape`: {e}")))?;
        let orientation = field(7)
            .parse()
            .map_err(|e| row_err(row_no, format!("field `orientation`: {e}")))?;
        let circumscribed = match field(8) {
            "circumscribed" => true,
            "not_circumscribed" => false,
            other => {
                return Err(row_err(
                    row_no,
                    format!("field `margin`: unknown value `{other}`"),
                ))
            }
        };
        let margin = MarginClass {
            circumscribed,
            indistinct: parse_flag(field(9), "margin_indistinct", row_no)?,
            angular: parse_flag(field(10), "margin_angular", row_no)?,
            microlobulated: parse_flag(field(11), "margin_microlobulated", row_no)?,
            spiculated: parse_flag(field(12), "margin_spiculated", row_no)?,
        };
        let echo = field(13)
            .parse()
            .map_err(|e| row_err(row_no, format!("field `echo_pattern`: {e}")))?;
        let posterior = field(14)
            .parse()
            .map_err(|e| row_err(row_no, format!("field `posterior`: {e}")))?;
        let category: BiradsCategory = field(15)
            .parse()
            .map_err(|e| row_err(row_no, format!("field `birads_category`: {e}")))?;
        if !BiradsCategory::TRAINABLE.contains(&category) {
            return Err(row_err(
                row_no,
                format!("field `birads_category`: `{category}` is not a trainable category"),
            ));
        }

        let labels = DescriptorLabels {
            shape,
            orientation,
            margin,
            echo,
            posterior,
        };
        labels
            .validate()
            .map_err(|e| row_err(row_no, e.to_string()))?;

        let (width, height) = image::image_dimensions(&image_path).map_err(|e| {
            row_err(
                row_no,
                format!("image `{}`: {e}", image_path.display()),
            )
        })?;
        bbox.validate(width, height)
            .map_err(|e| row_err(row_no, e.to_string()))?;

        records.push(ImageRecord {
            image_path,
            bbox,
            labels,
            category,
            tumor_class,
        });
    }

    if records.is_empty() {
        return Err(Error::ManifestSchema("manifest has no data rows".into()));
    }
    Ok(DatasetManifest {
        records,
        source: path.display().to_string(),
    })
}

/// Writes records back out in the manifest schema. Paths are written as
/// stored on the records.
pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let mut rows = Vec::with_capacity(manifest.records.len());
    for record in &manifest.records {
        rows.push(manifest_row(record, record.image_path.display().to_string()));
    }
    write_manifest_rows(&rows, path)
}

pub(crate) fn manifest_row(record: &ImageRecord, path_text: String) -> Vec<String> {
    let m = &record.labels.margin;
    vec![
        path_text,
        record.bbox.x0.to_string(),
        record.bbox.y0.to_string(),
        record.bbox.x1.to_string(),
        record.bbox.y1.to_string(),
        record.tumor_class.as_str().to_string(),
        record.labels.shape.as_str().to_string(),
        record.labels.orientation.as_str().to_string(),
        if m.circumscribed { "circumscribed" } else { "not_circumscribed" }.to_string(),
        u8::from(m.indistinct).to_string(),
        u8::from(m.angular).to_string(),
        u8::from(m.microlobulated).to_string(),
        u8::from(m.spiculated).to_string(),
        record.labels.echo.as_str().to_string(),
        record.labels.posterior.as_str().to_string(),
        record.category.as_str().to_string(),
    ]
}

pub(crate) fn write_manifest_rows(rows: &[Vec<String>], path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    writer
        .write_record(MANIFEST_HEADER)
        .map_err(|e| Error::ManifestSchema(e.to_string()))?;
    for row in rows {
        writer
            .write_record(row)
            .map_err(|e| Error::ManifestSchema(e.to_string()))?;
    }
    writer
        .flush()
        .map_err(|e| Error::ManifestSchema(e.to_string()))?;
    Ok(())
}

/// Index sets of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// A k-fold split plan over manifest record indices.
///
/// Test sets partition the dataset; within each fold the validation set is a
/// stratified carve-out from the non-test records. Identical seeds produce
/// identical plans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub folds: Vec<FoldIndices>,
}

impl FoldPlan {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = BufWriter::new(File::create(path.as_ref())?);
        serde_json::to_writer_pretty(&mut file, self)
            .map_err(|e| Error::Config(format!("cannot serialize fold plan: {e}")))?;
        file.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path.as_ref())?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Config(format!("cannot parse fold plan: {e}")))
    }
}

fn indices_by_class(manifest: &DatasetManifest) -> [Vec<usize>; 2] {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, record) in manifest.records.iter().enumerate() {
        by_class[record.tumor_class.index()].push(i);
    }
    by_class
}

/// Builds a stratified k-fold plan with a per-fold validation carve-out.
///
/// Records of each tumor class are shuffled once under the seed and dealt
/// round-robin into k test buckets; within each fold the remaining records
/// are reshuffled per class and `val_fraction` of them (rounded per class)
/// become the validation set.
pub fn make_fold_plan(
    manifest: &DatasetManifest,
    k: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::FoldPlan(format!("k must be >= 2, got {k}")));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::FoldPlan(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let by_class = indices_by_class(manifest);
    for (class, indices) in by_class.iter().enumerate() {
        if indices.len() < k {
            return Err(Error::FoldPlan(format!(
                "class `{}` has {} records, need at least {k} for {k}-fold splitting",
                TumorClass::ALL[class],
                indices.len()
            )));
        }
    }

    // Deal each class round-robin into k test buckets.
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (class, indices) in by_class.iter().enumerate() {
        let mut shuffled = indices.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class as u64));
        shuffled.shuffle(&mut rng);
        for (i, idx) in shuffled.into_iter().enumerate() {
            buckets[i % k].push(idx);
        }
    }

    let mut folds = Vec::with_capacity(k);
    for (fold, bucket) in buckets.iter().enumerate() {
        let mut test = bucket.clone();
        test.sort_unstable();
        let in_test = |i: &usize| test.binary_search(i).is_ok();

        let mut train = Vec::new();
        let mut val = Vec::new();
        for (class, indices) in by_class.iter().enumerate() {
            let mut rest: Vec<usize> =
                indices.iter().copied().filter(|i| !in_test(i)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                0x1000 + (fold * 2 + class) as u64,
            ));
            rest.shuffle(&mut rng);
            let n_val = ((rest.len() as f64) * val_fraction).round() as usize;
            let n_val = n_val.min(rest.len().saturating_sub(1)).max(1);
            val.extend_from_slice(&rest[..n_val]);
            train.extend_from_slice(&rest[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        folds.push(FoldIndices { train, val, test });
    }

    Ok(FoldPlan {
        k,
        seed,
        val_fraction,
        folds,
    })
}

/// Builds a single stratified train/validation/test split expressed as a
/// one-fold plan: `train_fraction` of each class is kept for training (of
/// which `val_fraction` becomes validation) and the remainder is the test set.
pub fn make_single_split(
    manifest: &DatasetManifest,
    train_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<FoldPlan> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::FoldPlan(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::FoldPlan(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let by_class = indices_by_class(manifest);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (class, indices) in by_class.iter().enumerate() {
        if indices.len() < 3 {
            return Err(Error::FoldPlan(format!(
                "class `{}` has too few records ({})",
                TumorClass::ALL[class],
                indices.len()
            )));
        }
        let mut shuffled = indices.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x2000 + class as u64));
        shuffled.shuffle(&mut rng);
        let n_train_total = (((shuffled.len() as f64) * train_fraction).round() as usize)
            .clamp(2, shuffled.len() - 1);
        let n_val = (((n_train_total as f64) * val_fraction).round() as usize)
            .clamp(1, n_train_total - 1);
        val.extend_from_slice(&shuffled[..n_val]);
        train.extend_from_slice(&shuffled[n_val..n_train_total]);
        test.extend_from_slice(&shuffled[n_train_total..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(FoldPlan {
        k: 1,
        seed,
        val_fraction,
        folds: vec![FoldIndices { train, val, test }],
    })
}
