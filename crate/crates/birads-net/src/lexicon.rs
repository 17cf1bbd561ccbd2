//! BI-RADS vocabulary for breast ultrasound: descriptor classes, assessment
//! categories, the category/likelihood-of-malignancy mapping, and encoding of
//! ground-truth labels into the eleven per-task training targets.
//!
//! String forms of every class are lowercase snake_case and double as the
//! manifest-file vocabulary (see [`crate::dataset`]).

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

macro_rules! descriptor_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            /// Stable integer encoding, in declaration order.
            pub fn index(self) -> usize {
                Self::ALL.iter().position(|v| *v == self).unwrap()
            }

            pub fn count() -> usize {
                Self::ALL.len()
            }

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(text: &str) -> Result<Self> {
                match text {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::InvalidLabels(format!(
                        "unknown {} value `{}`", stringify!($name), other
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

descriptor_enum! {
    /// Mass shape descriptor.
    ShapeClass {
        Oval => "oval",
        Round => "round",
        Irregular => "irregular",
    }
}

descriptor_enum! {
    /// Mass orientation relative to the skin line.
    OrientationClass {
        Parallel => "parallel",
        NotParallel => "not_parallel",
    }
}

descriptor_enum! {
    /// Internal echo pattern of the mass.
    EchoPatternClass {
        Anechoic => "anechoic",
        Hypoechoic => "hypoechoic",
        Isoechoic => "isoechoic",
        Hyperechoic => "hyperechoic",
        ComplexCysticSolid => "complex_cystic_solid",
        Heterogeneous => "heterogeneous",
    }
}

descriptor_enum! {
    /// Acoustic behavior of the tissue column beneath the mass.
    PosteriorClass {
        None => "none",
        Enhancement => "enhancement",
        Shadowing => "shadowing",
        Combined => "combined",
    }
}

descriptor_enum! {
    /// Benign/malignant tumor class.
    TumorClass {
        Benign => "benign",
        Malignant => "malignant",
    }
}

/// Margin descriptor: circumscribed, or not circumscribed with one or more
/// of the four suspicious sub-types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MarginClass {
    pub circumscribed: bool,
    pub indistinct: bool,
    pub angular: bool,
    pub microlobulated: bool,
    pub spiculated: bool,
}

impl MarginClass {
    pub fn circumscribed() -> Self {
        Self {
            circumscribed: true,
            indistinct: false,
            angular: false,
            microlobulated: false,
            spiculated: false,
        }
    }

    pub fn not_circumscribed(
        indistinct: bool,
        angular: bool,
        microlobulated: bool,
        spiculated: bool,
    ) -> Self {
        Self {
            circumscribed: false,
            indistinct,
            angular,
            microlobulated,
            spiculated,
        }
    }

    /// Sub-type flags in canonical task order:
    /// indistinct, angular, microlobulated, spiculated.
    pub fn subtype_flags(&self) -> [bool; 4] {
        [
            self.indistinct,
            self.angular,
            self.microlobulated,
            self.spiculated,
        ]
    }

    /// Index of the binary margin class: 0 = circumscribed, 1 = not.
    pub fn binary_index(&self) -> usize {
        usize::from(!self.circumscribed)
    }

    /// Ground-truth consistency: a circumscribed margin carries no sub-type
    /// flags, a not-circumscribed margin carries at least one.
    pub fn validate(&self) -> Result<()> {
        let any = self.subtype_flags().iter().any(|&f| f);
        if self.circumscribed && any {
            return Err(Error::InvalidLabels(
                "circumscribed margin must not set any sub-type flag".into(),
            ));
        }
        if !self.circumscribed && !any {
            return Err(Error::InvalidLabels(
                "not-circumscribed margin must set at least one sub-type flag".into(),
            ));
        }
        Ok(())
    }
}

/// BI-RADS assessment category, ordered by increasing suspicion.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum BiradsCategory {
    #[serde(rename = "0")]
    Cat0,
    #[serde(rename = "1")]
    Cat1,
    #[serde(rename = "2")]
    Cat2,
    #[serde(rename = "3")]
    Cat3,
    #[serde(rename = "4A")]
    Cat4A,
    #[serde(rename = "4B")]
    Cat4B,
    #[serde(rename = "4C")]
    Cat4C,
    #[serde(rename = "5")]
    Cat5,
    #[serde(rename = "6")]
    Cat6,
}

impl BiradsCategory {
    pub const ALL: &'static [BiradsCategory] = &[
        BiradsCategory::Cat0,
        BiradsCategory::Cat1,
        BiradsCategory::Cat2,
        BiradsCategory::Cat3,
        BiradsCategory::Cat4A,
        BiradsCategory::Cat4B,
        BiradsCategory::Cat4C,
        BiradsCategory::Cat5,
        BiradsCategory::Cat6,
    ];

    /// Categories that carry a numeric likelihood and appear as training
    /// targets: 3, 4A, 4B, 4C, 5.
    pub const TRAINABLE: &'static [BiradsCategory] = &[
        BiradsCategory::Cat3,
        BiradsCategory::Cat4A,
        BiradsCategory::Cat4B,
        BiradsCategory::Cat4C,
        BiradsCategory::Cat5,
    ];

    /// Ordinal rank, 0 for category 0 through 8 for category 6.
    pub fn rank(self) -> u8 {
        Self::ALL.iter().position(|c| *c == self).unwrap() as u8
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BiradsCategory::Cat0 => "0",
            BiradsCategory::Cat1 => "1",
            BiradsCategory::Cat2 => "2",
            BiradsCategory::Cat3 => "3",
            BiradsCategory::Cat4A => "4A",
            BiradsCategory::Cat4B => "4B",
            BiradsCategory::Cat4C => "4C",
            BiradsCategory::Cat5 => "5",
            BiradsCategory::Cat6 => "6",
        }
    }
}

impl FromStr for BiradsCategory {
    type Err = Error;
    fn from_str(text: &str) -> Result<Self> {
        BiradsCategory::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == text)
            .ok_or_else(|| {
                Error::InvalidLabels(format!("unknown BI-RADS category `{text}`"))
            })
    }
}

impl fmt::Display for BiradsCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The five BI-RADS descriptors of one mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DescriptorLabels {
    pub shape: ShapeClass,
    pub orientation: OrientationClass,
    pub margin: MarginClass,
    pub echo: EchoPatternClass,
    pub posterior: PosteriorClass,
}

impl DescriptorLabels {
    pub fn validate(&self) -> Result<()> {
        self.margin.validate()
    }
}

/// Class counts of the five descriptor tasks, in canonical order
/// (shape, orientation, margin, echo pattern, posterior features).
pub const DESCRIPTOR_ARITIES: [usize; 5] = [3, 2, 2, 6, 4];

/// Canonical names of the five descriptor tasks.
pub const DESCRIPTOR_NAMES: [&str; 5] =
    ["shape", "orientation", "margin", "echo_pattern", "posterior"];

/// Canonical names of the four margin sub-type tasks.
pub const SUBTYPE_NAMES: [&str; 4] =
    ["indistinct", "angular", "microlobulated", "spiculated"];

/// Canonical ordering of all eleven tasks; embedded in checkpoints so a
/// loaded model cannot silently disagree about which output is which.
pub const TASK_ORDER: [&str; 11] = [
    "shape",
    "orientation",
    "margin",
    "echo_pattern",
    "posterior",
    "margin_indistinct",
    "margin_angular",
    "margin_microlobulated",
    "margin_spiculated",
    "likelihood_of_malignancy",
    "tumor_class",
];

/// Median likelihood of malignancy for one assessment category.
///
/// Categories 0, 1, and 6 have no numeric likelihood and produce an error;
/// category 2 maps to 0.0 but is not a training target.
pub fn category_to_likelihood(category: BiradsCategory) -> Result<f64> {
    match category {
        BiradsCategory::Cat2 => Ok(0.0),
        BiradsCategory::Cat3 => Ok(0.01),
        BiradsCategory::Cat4A => Ok(0.06),
        BiradsCategory::Cat4B => Ok(0.30),
        BiradsCategory::Cat4C => Ok(0.725),
        BiradsCategory::Cat5 => Ok(0.975),
        BiradsCategory::Cat0 | BiradsCategory::Cat1 | BiradsCategory::Cat6 => {
            Err(Error::NoLikelihood(category))
        }
    }
}

/// Decodes a predicted likelihood back into an assessment category by
/// binning over the category likelihood ranges. Boundary values belong to
/// the lower category, so the mapping round-trips the category medians.
pub fn likelihood_to_category(likelihood: f64) -> BiradsCategory {
    if likelihood <= 0.02 {
        BiradsCategory::Cat3
    } else if likelihood <= 0.10 {
        BiradsCategory::Cat4A
    } else if likelihood <= 0.50 {
        BiradsCategory::Cat4B
    } else if likelihood <= 0.95 {
        BiradsCategory::Cat4C
    } else {
        BiradsCategory::Cat5
    }
}

/// Ground-truth targets for all eleven tasks of one image.
///
/// Categorical targets are stored as one-hot vectors whose dimensions follow
/// [`DESCRIPTOR_ARITIES`]; sub-type targets are four 0/1 scalars; the
/// likelihood target is the category median; the tumor target is a
/// benign/malignant one-hot pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTargets {
    pub shape: [f64; 3],
    pub orientation: [f64; 2],
    pub margin: [f64; 2],
    pub echo: [f64; 6],
    pub posterior: [f64; 4],
    pub subtypes: [f64; 4],
    pub likelihood: f64,
    pub tumor: [f64; 2],
}

impl TaskTargets {
    pub fn shape_index(&self) -> usize {
        argmax(&self.shape)
    }
    pub fn orientation_index(&self) -> usize {
        argmax(&self.orientation)
    }
    pub fn margin_index(&self) -> usize {
        argmax(&self.margin)
    }
    pub fn echo_index(&self) -> usize {
        argmax(&self.echo)
    }
    pub fn posterior_index(&self) -> usize {
        argmax(&self.posterior)
    }
    /// 1 when the ground truth is malignant.
    pub fn malignant_indicator(&self) -> f64 {
        self.tumor[1]
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn one_hot<const N: usize>(index: usize) -> [f64; N] {
    let mut v = [0.0; N];
    v[index] = 1.0;
    v
}

/// Encodes validated ground-truth labels into the eleven task targets.
///
/// The category must be one of the trainable categories (3, 4A, 4B, 4C, 5);
/// inconsistent margin sub-types are rejected.
pub fn encode_labels(
    labels: &DescriptorLabels,
    category: BiradsCategory,
    tumor_class: TumorClass,
) -> Result<TaskTargets> {
    labels.validate()?;
    if !BiradsCategory::TRAINABLE.contains(&category) {
        return Err(Error::InvalidLabels(format!(
            "category {category} is not a trainable target (expected one of 3, 4A, 4B, 4C, 5)"
        )));
    }
    let flags = labels.margin.subtype_flags();
    Ok(TaskTargets {
        shape: one_hot(labels.shape.index()),
        orientation: one_hot(labels.orientation.index()),
        margin: one_hot(labels.margin.binary_index()),
        echo: one_hot(labels.echo.index()),
        posterior: one_hot(labels.posterior.index()),
        subtypes: flags.map(f64::from),
        likelihood: category_to_likelihood(category)?,
        tumor: one_hot(tumor_class.index()),
    })
}
