//! Datasets with binary sensitive attributes: synthetic generation with
//! pixel-exact feature masks, manifest import/export, and composition of
//! biased training splits.

mod compose;
pub mod draw;
mod manifest;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use compose::{
    allocate_class_counts, compose_joint_split, compose_split, reserve_test_split, ComposedSplit,
    SplitIds,
};
pub use manifest::{export_dataset, import_dataset, read_split, write_split};
pub use synthetic::{
    concept_images, generate_synthetic_dataset, SyntheticConfig, CLASS_FEATURE,
};

/// One of the two instances of a binary attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Instance {
    A,
    B,
}

impl Instance {
    pub const BOTH: [Instance; 2] = [Instance::A, Instance::B];

    pub fn index(self) -> usize {
        match self {
            Instance::A => 0,
            Instance::B => 1,
        }
    }

    pub fn other(self) -> Instance {
        match self {
            Instance::A => Instance::B,
            Instance::B => Instance::A,
        }
    }
}

impl fmt::Display for Instance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Instance::A => "A",
            Instance::B => "B",
        })
    }
}

/// A sensitive attribute with exactly two instances and the expert list of
/// features that, when an explanation focuses on them, indicate bias.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub instances: [String; 2],
    pub feature_list: Vec<String>,
}

impl AttributeSpec {
    pub fn new(name: &str, a: &str, b: &str, features: &[&str]) -> Self {
        AttributeSpec {
            name: name.to_string(),
            instances: [a.to_string(), b.to_string()],
            feature_list: features.iter().map(|f| f.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_list.is_empty() {
            return Err(Error::Config(format!(
                "attribute {} has an empty feature list",
                self.name
            )));
        }
        if self.instances[0] == self.instances[1] {
            return Err(Error::Config(format!(
                "attribute {} has two identical instances",
                self.name
            )));
        }
        Ok(())
    }

    pub fn instance_label(&self, instance: Instance) -> &str {
        &self.instances[instance.index()]
    }

    pub fn parse_instance(&self, label: &str) -> Option<Instance> {
        Instance::BOTH
            .into_iter()
            .find(|i| self.instances[i.index()] == label)
    }
}

/// Binary pixel mask with the same geometry as its image.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mask({}x{}, {} set)", self.width, self.height, self.count())
    }
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; (width * height) as usize],
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != (width * height) as usize {
            return Err(Error::Shape(format!(
                "mask of {width}x{height} needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Mask {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width;
        self.bits[(y * w + x) as usize] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    /// Bounding box `(x0, y0, x1, y1)` inclusive, or `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<(u32, u32, u32, u32)> {
        let mut bbox: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bbox = Some(match bbox {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bbox
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            image::Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    /// Any non-zero pixel counts as set.
    pub fn from_gray(img: &GrayImage) -> Self {
        Mask {
            width: img.width(),
            height: img.height(),
            bits: img.pixels().map(|p| p.0[0] > 0).collect(),
        }
    }
}

/// Intersection of a class label with one instance per attribute.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Subgroup {
    pub class_label: u8,
    pub instances: Vec<Instance>,
}

impl Subgroup {
    /// All `2 × 2^k` subgroups in canonical order.
    pub fn enumerate(attribute_count: usize) -> Vec<Subgroup> {
        let mut out = Vec::with_capacity(2 << attribute_count);
        for class_label in 0..2u8 {
            for combo in instance_combinations(attribute_count) {
                out.push(Subgroup {
                    class_label,
                    instances: combo,
                });
            }
        }
        out
    }
}

/// All instance vectors of length `k`, A before B, first attribute slowest.
pub fn instance_combinations(k: usize) -> Vec<Vec<Instance>> {
    (0..1usize << k)
        .map(|bits| {
            (0..k)
                .map(|i| {
                    if bits >> (k - 1 - i) & 1 == 0 {
                        Instance::A
                    } else {
                        Instance::B
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub class_label: u8,
    /// One instance per attribute, aligned with the manifest's attribute list.
    pub attributes: Vec<Instance>,
    pub image: RgbImage,
    /// Feature name to mask. Empty for mask-less imported samples.
    pub masks: BTreeMap<String, Mask>,
}

impl SampleRecord {
    pub fn subgroup(&self) -> Subgroup {
        Subgroup {
            class_label: self.class_label,
            instances: self.attributes.clone(),
        }
    }

    pub fn has_masks(&self) -> bool {
        !self.masks.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub attributes: Vec<AttributeSpec>,
    pub class_names: [String; 2],
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attributes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::Config(format!("unknown attribute {name:?}")))
    }

    pub fn sample(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Lookup table from sample id to position in `samples`.
    pub fn index(&self) -> BTreeMap<&str, usize> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect()
    }

    pub fn subgroup_counts(&self) -> BTreeMap<Subgroup, usize> {
        let mut counts: BTreeMap<Subgroup, usize> = Subgroup::enumerate(self.attributes.len())
            .into_iter()
            .map(|s| (s, 0))
            .collect();
        for s in &self.samples {
            *counts.entry(s.subgroup()).or_default() += 1;
        }
        counts
    }

    pub fn subgroup_label(&self, subgroup: &Subgroup) -> String {
        let mut parts = vec![self.class_names[subgroup.class_label as usize].clone()];
        for (attr, inst) in self.attributes.iter().zip(&subgroup.instances) {
            parts.push(attr.instance_label(*inst).to_string());
        }
        parts.join("/")
    }

    /// Label for a (class, single attribute instance) cell.
    pub fn cell_label(&self, class_label: u8, attribute: usize, instance: Instance) -> String {
        format!(
            "{}/{}",
            self.class_names[class_label as usize],
            self.attributes[attribute].instance_label(instance)
        )
    }
}

/// Per-class composition ratio `A:B`; class 1 uses the interchanged `B:A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    a: f64,
    b: f64,
    label: String,
}

impl Ratio {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) || a < 0.0 || b < 0.0 || a + b <= 0.0 {
            return Err(Error::Config(format!("invalid ratio {a}:{b}")));
        }
        Ok(Ratio {
            a,
            b,
            label: format!("{a}:{b}"),
        })
    }

    /// The five compositions of the standard sweep, from fully favoring A
    /// in class 0 to fully favoring B.
    pub fn standard_sweep() -> Vec<Ratio> {
        ["1:0", "3:1", "1:1", "1:3", "0:1"]
            .iter()
            .map(|s| s.parse().expect("static ratio"))
            .collect()
    }

    pub fn balanced() -> Ratio {
        "1:1".parse().expect("static ratio")
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Filesystem-safe form of the label (`3:1` -> `3-1`).
    pub fn slug(&self) -> String {
        self.label.replace(':', "-")
    }

    /// Fraction of instance A among class-0 training samples.
    pub fn fraction_a(&self) -> f64 {
        self.a / (self.a + self.b)
    }

    /// `(p_A, p_B)` within the given class.
    pub fn fractions(&self, class_label: u8) -> [f64; 2] {
        let fa = self.fraction_a();
        if class_label == 0 {
            [fa, 1.0 - fa]
        } else {
            [1.0 - fa, fa]
        }
    }

    pub fn fraction(&self, class_label: u8, instance: Instance) -> f64 {
        self.fractions(class_label)[instance.index()]
    }

    pub fn swapped(&self) -> Ratio {
        Ratio {
            a: self.b,
            b: self.a,
            label: self
                .label
                .split_once(':')
                .map(|(a, b)| format!("{b}:{a}"))
                .unwrap_or_else(|| format!("{}:{}", self.b, self.a)),
        }
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("ratio {s:?} is not of the form A:B")))?;
        let parse = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("ratio {s:?} has a non-numeric part")))
        };
        let mut ratio = Ratio::new(parse(a)?, parse(b)?)?;
        ratio.label = format!("{}:{}", a.trim(), b.trim());
        Ok(ratio)
    }
}

impl TryFrom<String> for Ratio {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.label
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

/// Bias degree injected for one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionSpec {
    pub attribute: String,
    pub ratio: Ratio,
}

impl CompositionSpec {
    pub fn new(attribute: &str, ratio: Ratio) -> Self {
        CompositionSpec {
            attribute: attribute.to_string(),
            ratio,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_fractions_interchange_between_classes() {
        let r: Ratio = "3:1".parse().unwrap();
        assert_eq!(r.fractions(0), [0.75, 0.25]);
        assert_eq!(r.fractions(1), [0.25, 0.75]);
        assert_eq!(r.slug(), "3-1");
        assert_eq!(r.swapped().label(), "1:3");
        let explicit: Ratio = "0.6:0.4".parse().unwrap();
        assert!((explicit.fraction_a() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn ratio_rejects_garbage() {
        assert!("3".parse::<Ratio>().is_err());
        assert!("0:0".parse::<Ratio>().is_err());
        assert!("x:1".parse::<Ratio>().is_err());
        assert!("-1:2".parse::<Ratio>().is_err());
    }

    #[test]
    fn subgroup_enumeration_size() {
        assert_eq!(Subgroup::enumerate(1).len(), 4);
        assert_eq!(Subgroup::enumerate(2).len(), 8);
        assert_eq!(
            instance_combinations(2),
            vec![
                vec![Instance::A, Instance::A],
                vec![Instance::A, Instance::B],
                vec![Instance::B, Instance::A],
                vec![Instance::B, Instance::B],
            ]
        );
    }

    #[test]
    fn attribute_spec_requires_features() {
        let mut spec = AttributeSpec::new("gender", "male", "female", &["face"]);
        assert!(spec.validate().is_ok());
        spec.feature_list.clear();
        assert!(spec.validate().is_err());
    }
}
