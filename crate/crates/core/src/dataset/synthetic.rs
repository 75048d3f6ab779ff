use std::collections::BTreeMap;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::draw::{self, Rect, Shape};
use super::{AttributeSpec, DatasetManifest, Instance, Mask, SampleRecord, Subgroup};
use crate::error::{Error, Result};

/// Mask name of the planted class-discriminating glyph.
pub const CLASS_FEATURE: &str = "class_glyph";

const CLASS_NAMES: [&str; 2] = ["plus", "ring"];
const CLASS_SHAPES: [Shape; 2] = [Shape::Plus, Shape::Ring];

struct PlantedAttribute {
    name: &'static str,
    instances: [&'static str; 2],
    feature: &'static str,
    shape: Shape,
    colors: [[u8; 3]; 2],
}

const PLANTED: [PlantedAttribute; 3] = [
    PlantedAttribute {
        name: "disc_color",
        instances: ["red", "blue"],
        feature: "disc",
        shape: Shape::Disc,
        colors: [draw::RED, draw::BLUE],
    },
    PlantedAttribute {
        name: "tag_color",
        instances: ["green", "yellow"],
        feature: "tag",
        shape: Shape::Square,
        colors: [draw::GREEN, draw::YELLOW],
    },
    PlantedAttribute {
        name: "bar_shade",
        instances: ["white", "black"],
        feature: "bar",
        shape: Shape::Bar,
        colors: [draw::WHITE, draw::BLACK],
    },
];

pub const MIN_DIM: u32 = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub per_subgroup: usize,
    pub width: u32,
    pub height: u32,
    pub attribute_count: usize,
    pub seed: u64,
    /// Side of the class glyph box. Kept smaller than the markers so the
    /// class cue is the weaker one.
    pub glyph_size: u32,
    /// Gray level of the class glyph; closer to the background means weaker.
    pub glyph_shade: u8,
    /// Fraction of samples whose class glyph is half erased.
    pub occlusion_fraction: f64,
    pub marker_size: u32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            per_subgroup: 200,
            width: 64,
            height: 64,
            attribute_count: 2,
            seed: 0,
            glyph_size: 12,
            glyph_shade: 40,
            occlusion_fraction: 0.3,
            marker_size: 11,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_subgroup == 0 {
            return Err(Error::Config("per_subgroup must be at least 1".into()));
        }
        if self.width < MIN_DIM || self.height < MIN_DIM {
            return Err(Error::Config(format!(
                "image dims {}x{} below the {MIN_DIM}x{MIN_DIM} minimum",
                self.width, self.height
            )));
        }
        if self.attribute_count == 0 || self.attribute_count > PLANTED.len() {
            return Err(Error::Config(format!(
                "attribute_count must be in 1..={}",
                PLANTED.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.occlusion_fraction) {
            return Err(Error::Config("occlusion_fraction must lie in [0, 1]".into()));
        }
        if self.glyph_size < 4 || self.marker_size < 4 {
            return Err(Error::Config("feature sizes must be at least 4 pixels".into()));
        }
        Ok(())
    }

    pub fn attribute_specs(&self) -> Vec<AttributeSpec> {
        PLANTED[..self.attribute_count]
            .iter()
            .map(|p| AttributeSpec::new(p.name, p.instances[0], p.instances[1], &[p.feature]))
            .collect()
    }
}

/// Generates the balanced synthetic benchmark: `2 × 2^k` subgroups of
/// `per_subgroup` images each, every image carrying one class glyph and one
/// marker per attribute at random non-overlapping positions.
pub fn generate_synthetic_dataset(config: &SyntheticConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samples = Vec::new();
    for subgroup in Subgroup::enumerate(config.attribute_count) {
        for _ in 0..config.per_subgroup {
            let planted: Vec<Option<Instance>> =
                subgroup.instances.iter().copied().map(Some).collect();
            let (image, masks) = render(config, subgroup.class_label, &planted, &mut rng)?;
            samples.push(SampleRecord {
                id: format!("s{:05}", samples.len()),
                class_label: subgroup.class_label,
                attributes: subgroup.instances.clone(),
                image,
                masks,
            });
        }
    }
    Ok(DatasetManifest {
        attributes: config.attribute_specs(),
        class_names: [CLASS_NAMES[0].to_string(), CLASS_NAMES[1].to_string()],
        samples,
    })
}

/// Images showing `instance` of attribute `attribute`, or no marker for that
/// attribute when `instance` is `None`; class glyph and the other attributes
/// are drawn at random so they do not correlate with the concept.
pub fn concept_images(
    config: &SyntheticConfig,
    attribute: usize,
    instance: Option<Instance>,
    count: usize,
    seed: u64,
) -> Result<Vec<RgbImage>> {
    config.validate()?;
    if attribute >= config.attribute_count {
        return Err(Error::Config(format!("no attribute #{attribute}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let class_label = rng.random_range(0..2u8);
            let instances: Vec<Option<Instance>> = (0..config.attribute_count)
                .map(|a| {
                    if a == attribute {
                        instance
                    } else if rng.random_bool(0.5) {
                        Some(Instance::A)
                    } else {
                        Some(Instance::B)
                    }
                })
                .collect();
            render(config, class_label, &instances, &mut rng).map(|(img, _)| img)
        })
        .collect()
}

fn render(
    config: &SyntheticConfig,
    class_label: u8,
    instances: &[Option<Instance>],
    rng: &mut impl Rng,
) -> Result<(RgbImage, BTreeMap<String, Mask>)> {
    let (w, h) = (config.width, config.height);
    let (mut img, base) = draw::background(w, h, rng);
    let mut taken: Vec<Rect> = Vec::new();
    let mut masks = BTreeMap::new();
    let too_small = || {
        Error::Config(format!(
            "{w}x{h} image too small to place all features without overlap"
        ))
    };

    let glyph_box = draw::place(w, h, config.glyph_size, &taken, 2, rng).ok_or_else(too_small)?;
    taken.push(glyph_box);
    for (attr, inst) in PLANTED.iter().zip(instances) {
        let Some(inst) = inst else { continue };
        let r = draw::place(w, h, config.marker_size, &taken, 2, rng).ok_or_else(too_small)?;
        taken.push(r);
        let painted = draw::paint(
            &mut img,
            attr.shape,
            config.marker_size,
            r.x,
            r.y,
            attr.colors[inst.index()],
            rng,
        );
        masks.insert(attr.feature.to_string(), pixels_to_mask(w, h, &painted));
    }

    let shade = config.glyph_shade;
    let mut glyph = draw::paint(
        &mut img,
        CLASS_SHAPES[class_label as usize],
        config.glyph_size,
        glyph_box.x,
        glyph_box.y,
        [shade, shade, shade],
        rng,
    );
    if rng.random_bool(config.occlusion_fraction) {
        let cut = config.glyph_size / 2;
        let side = rng.random_range(0..4u8);
        let (gx, gy) = (glyph_box.x, glyph_box.y);
        let (erased, kept): (Vec<_>, Vec<_>) = glyph.iter().partition(|&&(x, y)| match side {
            0 => x - gx < cut,
            1 => x - gx >= cut,
            2 => y - gy < cut,
            _ => y - gy >= cut,
        });
        draw::erase(&mut img, &erased, base, rng);
        glyph = kept;
    }
    masks.insert(CLASS_FEATURE.to_string(), pixels_to_mask(w, h, &glyph));
    Ok((img, masks))
}

fn pixels_to_mask(w: u32, h: u32, pixels: &[(u32, u32)]) -> Mask {
    let mut m = Mask::new(w, h);
    for &(x, y) in pixels {
        m.set(x, y, true);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(per_subgroup: usize, attribute_count: usize) -> SyntheticConfig {
        SyntheticConfig {
            per_subgroup,
            attribute_count,
            seed: 11,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn subgroup_structure() {
        let one = generate_synthetic_dataset(&small(50, 1)).unwrap();
        assert_eq!(one.subgroup_counts().len(), 4);
        assert_eq!(one.samples.len(), 200);
        let two = generate_synthetic_dataset(&small(50, 2)).unwrap();
        assert_eq!(two.subgroup_counts().len(), 8);
        assert_eq!(two.samples.len(), 400);
        assert!(two.subgroup_counts().values().all(|&c| c == 50));
    }

    #[test]
    fn class_and_attribute_masks_never_overlap() {
        let ds = generate_synthetic_dataset(&small(10, 3)).unwrap();
        for s in &ds.samples {
            let glyph = &s.masks[CLASS_FEATURE];
            assert!(glyph.count() > 0);
            for spec in &ds.attributes {
                let m = &s.masks[&spec.feature_list[0]];
                assert!(m.count() > 0);
                assert_eq!(glyph.intersection_count(m), 0, "{}", s.id);
            }
        }
    }

    #[test]
    fn masks_are_pixel_exact() {
        // Every mask pixel carries the feature's color, and the mask stays
        // inside one feature-sized box.
        let cfg = small(5, 2);
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        for s in &ds.samples {
            for (a, spec) in ds.attributes.iter().enumerate() {
                let mask = &s.masks[&spec.feature_list[0]];
                let (x0, y0, x1, y1) = mask.bounding_box().unwrap();
                assert!(x1 - x0 < cfg.marker_size && y1 - y0 < cfg.marker_size);
                let color = PLANTED[a].colors[s.attributes[a].index()];
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        if mask.get(x, y) {
                            let p = s.image.get_pixel(x, y).0;
                            for c in 0..3 {
                                assert!((p[c] as i32 - color[c] as i32).abs() <= 10);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic_dataset(&small(3, 2)).unwrap();
        let b = generate_synthetic_dataset(&small(3, 2)).unwrap();
        assert_eq!(a, b);
        let mut other = small(3, 2);
        other.seed = 12;
        assert_ne!(a, generate_synthetic_dataset(&other).unwrap());
    }

    #[test]
    fn rejects_tiny_images() {
        let cfg = SyntheticConfig {
            width: 16,
            height: 64,
            ..small(1, 1)
        };
        assert!(matches!(generate_synthetic_dataset(&cfg), Err(Error::Config(_))));
        // Legal dims but markers too large to fit three boxes apart.
        let cfg = SyntheticConfig {
            width: 32,
            height: 32,
            marker_size: 14,
            ..small(1, 3)
        };
        assert!(matches!(generate_synthetic_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn balanced_manifest_has_zero_attribute_class_correlation() {
        let ds = generate_synthetic_dataset(&small(7, 2)).unwrap();
        for a in 0..2 {
            // Phi coefficient from the 2x2 contingency table.
            let mut n = [[0f64; 2]; 2];
            for s in &ds.samples {
                n[s.class_label as usize][s.attributes[a].index()] += 1.0;
            }
            let num = n[0][0] * n[1][1] - n[0][1] * n[1][0];
            let den = ((n[0][0] + n[0][1]) * (n[1][0] + n[1][1]) * (n[0][0] + n[1][0])
                * (n[0][1] + n[1][1]))
                .sqrt();
            assert_eq!(num / den, 0.0);
        }
    }

    #[test]
    fn concept_images_fix_the_requested_instance() {
        let cfg = small(1, 2);
        let imgs = concept_images(&cfg, 0, Some(Instance::A), 6, 3).unwrap();
        assert_eq!(imgs.len(), 6);
        let red_pixels = |img: &RgbImage| {
            img.pixels()
                .filter(|p| p.0[0] > 180 && p.0[1] < 80 && p.0[2] < 80)
                .count()
        };
        assert!(imgs.iter().all(|i| red_pixels(i) > 40));
        let blue = concept_images(&cfg, 0, Some(Instance::B), 6, 3).unwrap();
        assert!(blue.iter().all(|i| red_pixels(i) == 0));
        let blue_pixels = |img: &RgbImage| {
            img.pixels()
                .filter(|p| p.0[2] > 180 && p.0[0] < 80 && p.0[1] < 110)
                .count()
        };
        assert!(blue.iter().all(|i| blue_pixels(i) > 40));
        let none = concept_images(&cfg, 0, None, 6, 3).unwrap();
        assert!(none.iter().all(|i| red_pixels(i) == 0 && blue_pixels(i) == 0));
    }
}
