//! Gradient-weighted class activation maps and their conversion into
//! biased/unbiased verdicts through overlap with ground-truth feature masks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array1, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AttributeSpec, DatasetManifest, Mask, Subgroup};
use crate::error::{Error, Result};
use crate::metrics::{BiasCountTable, CountCell};
use crate::nn::Model;

/// Max-normalized saliency over the input's pixel grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
    pub target_class: u8,
    pub layer: String,
    /// Set when the class score has zero gradient at the layer, or the
    /// rectified map vanishes; `values` are then all zero.
    pub all_zero: bool,
}

impl SaliencyMap {
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[(y * self.width + x) as usize]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Activation of `layer` and the Grad-CAM channel weights: the spatial mean
/// of the target-class score gradient in each channel.
pub fn channel_weights(
    model: &Model,
    image: &Array3<f64>,
    target_class: u8,
    layer: &str,
) -> Result<(Array3<f64>, Array1<f64>)> {
    let (act, grad) = model.class_gradient(image, layer, target_class)?;
    let weights = grad
        .mean_axis(Axis(2))
        .and_then(|g| g.mean_axis(Axis(1)))
        .ok_or_else(|| Error::Shape(format!("layer {layer} has an empty activation")))?;
    Ok((act, weights))
}

/// Rectified weighted channel sum at the layer's resolution.
pub fn coarse_map(activation: &Array3<f64>, weights: &Array1<f64>) -> ndarray::Array2<f64> {
    let (_, h, w) = activation.dim();
    let mut map = ndarray::Array2::zeros((h, w));
    for (k, &wk) in weights.iter().enumerate() {
        if wk != 0.0 {
            map.scaled_add(wk, &activation.index_axis(Axis(0), k));
        }
    }
    map.mapv_inplace(|v| v.max(0.0));
    map
}

/// Bilinear resize (pixel-center aligned, edge clamped).
pub fn upsample_bilinear(map: &ndarray::Array2<f64>, out_h: usize, out_w: usize) -> Vec<f64> {
    let (h, w) = map.dim();
    let coord = |dst: usize, n_in: usize, n_out: usize| {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
            let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Grad-CAM saliency of `target_class` at the named convolutional layer,
/// upsampled to the input resolution and max-normalized.
pub fn grad_cam(model: &Model, image: &Array3<f64>, target_class: u8, layer: &str) -> Result<SaliencyMap> {
    let (act, weights) = channel_weights(model, image, target_class, layer)?;
    let (_, h, w) = image.dim();
    let mut values = upsample_bilinear(&coarse_map(&act, &weights), h, w);
    let max = values.iter().copied().fold(0.0, f64::max);
    let all_zero = max <= 0.0;
    if all_zero {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(SaliencyMap {
        width: w as u32,
        height: h as u32,
        values,
        target_class,
        layer: layer.to_string(),
        all_zero,
    })
}

/// Fraction of the top-mass region that lies inside `mask`.
///
/// The region is the smallest pixel set holding at least `mass_quantile` of
/// the total saliency; pixels enter by decreasing value, lower index first
/// on ties. Returns `Ok(None)` — no signal — for an all-zero map.
pub fn overlap_score(saliency: &SaliencyMap, mask: &Mask, mass_quantile: f64) -> Result<Option<f64>> {
    if saliency.width != mask.width() || saliency.height != mask.height() {
        return Err(Error::Shape(format!(
            "saliency {}×{} vs mask {}×{}",
            saliency.width,
            saliency.height,
            mask.width(),
            mask.height()
        )));
    }
    if !(mass_quantile > 0.0 && mass_quantile <= 1.0) {
        return Err(Error::Config(format!("mass_quantile {mass_quantile} outside (0, 1]")));
    }
    let total: f64 = saliency.values.iter().sum();
    if total <= 0.0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..saliency.values.len()).collect();
    order.sort_by(|&a, &b| {
        saliency.values[b]
            .total_cmp(&saliency.values[a])
            .then(a.cmp(&b))
    });
    let target = mass_quantile * total * (1.0 - 1e-12);
    let bits = mask.bits();
    let (mut mass, mut taken, mut inside) = (0.0, 0usize, 0usize);
    for i in order {
        if mass >= target {
            break;
        }
        mass += saliency.values[i];
        taken += 1;
        if bits[i] {
            inside += 1;
        }
    }
    Ok(Some(inside as f64 / taken as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictSource {
    Automatic,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasVerdict {
    pub biased: bool,
    pub attribute: Option<String>,
    pub feature: Option<String>,
    pub source: VerdictSource,
    /// Overlap of the best-matching listed feature (automatic verdicts).
    pub overlap: Option<f64>,
}

impl BiasVerdict {
    pub fn unbiased(source: VerdictSource) -> Self {
        BiasVerdict {
            biased: false,
            attribute: None,
            feature: None,
            source,
            overlap: None,
        }
    }

    pub fn biased(attribute: &str, feature: &str, source: VerdictSource) -> Self {
        BiasVerdict {
            biased: true,
            attribute: Some(attribute.to_string()),
            feature: Some(feature.to_string()),
            source,
            overlap: None,
        }
    }
}

/// Outcome of automatic judging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "status")]
pub enum Judgement {
    Judged { verdict: BiasVerdict },
    Unjudgeable { reason: String },
}

/// A prediction plus its saliency map; the unit being counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub sample_id: String,
    pub truth: Subgroup,
    pub predicted: u8,
    pub correct: bool,
    #[serde(skip)]
    pub saliency: Option<SaliencyMap>,
    pub automatic: Option<Judgement>,
    pub human: Option<BiasVerdict>,
}

impl ExplanationRecord {
    pub fn new(sample_id: &str, truth: Subgroup, predicted: u8, saliency: SaliencyMap) -> Self {
        ExplanationRecord {
            sample_id: sample_id.to_string(),
            correct: predicted == truth.class_label,
            truth,
            predicted,
            saliency: Some(saliency),
            automatic: None,
            human: None,
        }
    }

    /// Fills the automatic slot; a slot is filled at most once.
    pub fn set_automatic(&mut self, judgement: Judgement) -> Result<()> {
        if self.automatic.is_some() {
            return Err(Error::InvalidVerdict(format!(
                "{} already has an automatic verdict",
                self.sample_id
            )));
        }
        self.automatic = Some(judgement);
        Ok(())
    }

    pub fn set_human(&mut self, verdict: BiasVerdict) -> Result<()> {
        if self.human.is_some() {
            return Err(Error::InvalidVerdict(format!(
                "{} already has a human verdict",
                self.sample_id
            )));
        }
        self.human = Some(verdict);
        Ok(())
    }

    /// The verdict for `source`, `None` when unjudged or unjudgeable.
    pub fn verdict(&self, source: VerdictSource) -> Option<&BiasVerdict> {
        match source {
            VerdictSource::Automatic => match &self.automatic {
                Some(Judgement::Judged { verdict }) => Some(verdict),
                _ => None,
            },
            VerdictSource::Human => self.human.as_ref(),
        }
    }
}

/// Automatic verdict: biased iff the overlap with some listed feature's mask
/// reaches `tau` (closed threshold). The maximally overlapping feature is
/// reported; ties go to the feature listed first.
pub fn auto_verdict(
    saliency: &SaliencyMap,
    masks: &BTreeMap<String, Mask>,
    attributes: &[AttributeSpec],
    tau: f64,
    mass_quantile: f64,
) -> Result<Judgement> {
    let mut best: Option<(&str, &str, f64)> = None;
    for spec in attributes {
        for feature in &spec.feature_list {
            let Some(mask) = masks.get(feature) else {
                return Ok(Judgement::Unjudgeable {
                    reason: format!("no mask for feature {feature}"),
                });
            };
            let Some(score) = overlap_score(saliency, mask, mass_quantile)? else {
                return Ok(Judgement::Unjudgeable {
                    reason: "saliency map carries no signal".into(),
                });
            };
            if best.is_none_or(|(_, _, s)| score > s) {
                best = Some((&spec.name, feature, score));
            }
        }
    }
    let Some((attribute, feature, score)) = best else {
        return Err(Error::Config("feature checklist is empty".into()));
    };
    let verdict = if score >= tau {
        BiasVerdict {
            overlap: Some(score),
            ..BiasVerdict::biased(attribute, feature, VerdictSource::Automatic)
        }
    } else {
        BiasVerdict {
            overlap: Some(score),
            ..BiasVerdict::unbiased(VerdictSource::Automatic)
        }
    };
    Ok(Judgement::Judged { verdict })
}

/// Deterministic stratified sample of `budget` ids per subgroup, drawn from
/// `ids` and returned in subgroup order. Subgroups are formed by class and
/// the instances of `attributes`.
pub fn examination_sample(
    manifest: &DatasetManifest,
    ids: &[String],
    attributes: &[usize],
    budget: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let mut by_subgroup: BTreeMap<Subgroup, Vec<String>> = Subgroup::enumerate(attributes.len())
        .into_iter()
        .map(|s| (s, Vec::new()))
        .collect();
    for id in ids {
        let s = manifest
            .sample(id)
            .ok_or_else(|| Error::Config(format!("unknown sample id {id}")))?;
        let key = Subgroup {
            class_label: s.class_label,
            instances: attributes.iter().map(|&a| s.attributes[a]).collect(),
        };
        by_subgroup.entry(key).or_default().push(id.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (subgroup, mut pool) in by_subgroup {
        if pool.len() < budget {
            let mut label = vec![manifest.class_names[subgroup.class_label as usize].clone()];
            for (a, i) in attributes.iter().zip(&subgroup.instances) {
                label.push(manifest.attributes[*a].instance_label(*i).to_string());
            }
            return Err(Error::InsufficientSamples {
                subgroup: label.join("/"),
                needed: budget,
                available: pool.len(),
            });
        }
        pool.sort();
        pool.shuffle(&mut rng);
        pool.truncate(budget);
        pool.sort();
        out.extend(pool);
    }
    Ok(out)
}

/// Folds judged records into per-subgroup counts. Subgroups are keyed by
/// class and the instances of `attributes` (indices into each record's truth).
pub fn collect_counts(
    records: &[ExplanationRecord],
    source: VerdictSource,
    ratio: &str,
    attribute_names: &[String],
    attributes: &[usize],
) -> Result<BiasCountTable> {
    let mut cells: BTreeMap<Subgroup, CountCell> = BTreeMap::new();
    for class_label in 0..2u8 {
        for instances in crate::dataset::instance_combinations(attributes.len()) {
            cells.insert(
                Subgroup {
                    class_label,
                    instances: instances.clone(),
                },
                CountCell {
                    class_label,
                    instances,
                    n_examined: 0,
                    n_bias: 0,
                    n_incorrect_bias: 0,
                },
            );
        }
    }
    let mut unjudgeable = 0;
    for r in records {
        let key = Subgroup {
            class_label: r.truth.class_label,
            instances: attributes
                .iter()
                .map(|&a| {
                    r.truth.instances.get(a).copied().ok_or_else(|| {
                        Error::Mismatch(format!("record {} lacks attribute #{a}", r.sample_id))
                    })
                })
                .collect::<Result<_>>()?,
        };
        let Some(verdict) = r.verdict(source) else {
            unjudgeable += 1;
            continue;
        };
        let cell = cells.get_mut(&key).expect("all subgroups enumerated");
        cell.n_examined += 1;
        if verdict.biased {
            cell.n_bias += 1;
            if !r.correct {
                cell.n_incorrect_bias += 1;
            }
        }
    }
    BiasCountTable::new(
        ratio,
        attribute_names.to_vec(),
        cells.into_values().collect(),
        unjudgeable,
    )
}

/// Fixed colormap (blue → cyan → yellow → red) used for every overlay.
pub fn heat_color(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let stops = [
        (0.0, [0.0, 0.0, 160.0]),
        (0.35, [0.0, 200.0, 255.0]),
        (0.7, [255.0, 230.0, 0.0]),
        (1.0, [220.0, 0.0, 0.0]),
    ];
    let i = stops.windows(2).position(|w| v <= w[1].0).unwrap_or(stops.len() - 2);
    let (t0, c0) = stops[i];
    let (t1, c1) = stops[i + 1];
    let f = (v - t0) / (t1 - t0);
    [0, 1, 2].map(|k| (c0[k] + (c1[k] - c0[k]) * f).round() as u8)
}

/// Opacity of the heatmap layer in overlays.
pub const OVERLAY_ALPHA: f64 = 0.5;

/// Heatmap alpha-blended over the image at [`OVERLAY_ALPHA`].
pub fn render_overlay(image: &RgbImage, saliency: &SaliencyMap) -> Result<RgbImage> {
    if image.dimensions() != (saliency.width, saliency.height) {
        return Err(Error::Shape("overlay image and saliency differ in size".into()));
    }
    Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let base = image.get_pixel(x, y).0;
        let heat = heat_color(saliency.get(x, y));
        Rgb([0, 1, 2].map(|k| {
            (base[k] as f64 * (1.0 - OVERLAY_ALPHA) + heat[k] as f64 * OVERLAY_ALPHA).round() as u8
        }))
    }))
}

/// Sidecar describing a persisted explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplanationSidecar {
    pub sample_id: String,
    pub pred: u8,
    pub correct: bool,
    pub layer: String,
    pub target_class: u8,
    pub all_zero: bool,
    pub params: serde_json::Value,
    pub verdict: Option<Judgement>,
}

/// Paths written by [`save_explanation`].
#[derive(Debug, Clone)]
pub struct ExplanationFiles {
    pub overlay: PathBuf,
    pub raw: PathBuf,
    pub sidecar: PathBuf,
}

pub fn explanation_files(dir: &Path, sample_id: &str) -> ExplanationFiles {
    ExplanationFiles {
        overlay: dir.join(format!("{sample_id}_overlay.png")),
        raw: dir.join(format!("{sample_id}_map.png")),
        sidecar: dir.join(format!("{sample_id}.json")),
    }
}

/// Writes the overlay PNG, the raw map as a 16-bit grayscale PNG and the
/// JSON sidecar.
pub fn save_explanation(
    dir: &Path,
    record: &ExplanationRecord,
    image: &RgbImage,
    params: &serde_json::Value,
) -> Result<ExplanationFiles> {
    let saliency = record
        .saliency
        .as_ref()
        .ok_or_else(|| Error::Config(format!("record {} has no saliency map", record.sample_id)))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = explanation_files(dir, &record.sample_id);
    render_overlay(image, saliency)?
        .save(&files.overlay)
        .map_err(|e| Error::image(&files.overlay, e))?;
    let raw: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(saliency.width, saliency.height, |x, y| {
            Luma([(saliency.get(x, y) * 65535.0).round() as u16])
        });
    raw.save(&files.raw).map_err(|e| Error::image(&files.raw, e))?;
    let sidecar = ExplanationSidecar {
        sample_id: record.sample_id.clone(),
        pred: record.predicted,
        correct: record.correct,
        layer: saliency.layer.clone(),
        target_class: saliency.target_class,
        all_zero: saliency.all_zero,
        params: params.clone(),
        verdict: record.automatic.clone(),
    };
    let json = serde_json::to_vec_pretty(&sidecar)?;
    std::fs::write(&files.sidecar, json).map_err(|e| Error::io(&files.sidecar, e))?;
    Ok(files)
}

/// Reads a raw map written by [`save_explanation`] (16-bit quantized).
pub fn load_saliency(path: &Path, target_class: u8, layer: &str) -> Result<SaliencyMap> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_luma16();
    let values: Vec<f64> = img.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
    Ok(SaliencyMap {
        width: img.width(),
        height: img.height(),
        all_zero: values.iter().all(|v| *v == 0.0),
        values,
        target_class,
        layer: layer.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Instance;

    fn map(width: u32, height: u32, values: Vec<f64>) -> SaliencyMap {
        SaliencyMap {
            width,
            height,
            all_zero: values.iter().all(|v| *v == 0.0),
            values,
            target_class: 0,
            layer: "conv".into(),
        }
    }

    #[test]
    fn uniform_ten_pixels_half_masked() {
        let mut values = vec![0.0; 25];
        let mut mask = Mask::new(5, 5);
        for i in 0..10 {
            values[i * 2] = 1.0;
            if i < 5 {
                mask.set((i * 2 % 5) as u32, (i * 2 / 5) as u32, true);
            }
        }
        assert_eq!(overlap_score(&map(5, 5, values), &mask, 1.0).unwrap(), Some(0.5));
    }

    #[test]
    fn overlap_extremes_and_no_signal() {
        let mut values = vec![0.0; 16];
        values[5] = 1.0;
        values[6] = 0.5;
        let mut inside = Mask::new(4, 4);
        inside.set(1, 1, true);
        let outside = Mask::new(4, 4);
        let m = map(4, 4, values);
        assert_eq!(overlap_score(&m, &inside, 0.2).unwrap(), Some(1.0));
        assert_eq!(overlap_score(&m, &outside, 0.2).unwrap(), Some(0.0));
        assert_eq!(overlap_score(&map(4, 4, vec![0.0; 16]), &inside, 0.2).unwrap(), None);
        assert!(overlap_score(&m, &Mask::new(3, 4), 0.2).is_err());
        assert!(overlap_score(&m, &inside, 0.0).is_err());
    }

    #[test]
    fn ties_resolve_to_lower_index() {
        // Two equal pixels; a quarter of the mass needs only the first.
        let mut values = vec![0.0; 4];
        values[1] = 1.0;
        values[2] = 1.0;
        let mut mask = Mask::new(2, 2);
        mask.set(1, 0, true);
        assert_eq!(overlap_score(&map(2, 2, values.clone()), &mask, 0.25).unwrap(), Some(1.0));
        let mut mask = Mask::new(2, 2);
        mask.set(0, 1, true);
        assert_eq!(overlap_score(&map(2, 2, values), &mask, 0.25).unwrap(), Some(0.0));
    }

    fn spec() -> Vec<AttributeSpec> {
        vec![AttributeSpec::new("color", "red", "blue", &["disc", "rim"])]
    }

    fn masks() -> BTreeMap<String, Mask> {
        let mut disc = Mask::new(4, 4);
        disc.set(0, 0, true);
        disc.set(1, 0, true);
        let mut rim = Mask::new(4, 4);
        rim.set(0, 0, true);
        rim.set(3, 3, true);
        [("disc".to_string(), disc), ("rim".to_string(), rim)].into()
    }

    #[test]
    fn verdict_threshold_is_closed_and_ties_go_first() {
        // Region = pixels (0,0) and (3,0): overlap 0.5 with both features.
        let mut values = vec![0.0; 16];
        values[0] = 1.0;
        values[3] = 1.0;
        let j = auto_verdict(&map(4, 4, values), &masks(), &spec(), 0.5, 1.0).unwrap();
        let Judgement::Judged { verdict } = j else { panic!("unjudged") };
        assert!(verdict.biased);
        assert_eq!(verdict.feature.as_deref(), Some("disc"));
        assert_eq!(verdict.attribute.as_deref(), Some("color"));
        assert_eq!(verdict.overlap, Some(0.5));
    }

    #[test]
    fn saliency_off_the_list_is_unbiased() {
        let mut values = vec![0.0; 16];
        values[10] = 1.0;
        let j = auto_verdict(&map(4, 4, values), &masks(), &spec(), 0.5, 0.2).unwrap();
        let Judgement::Judged { verdict } = j else { panic!("unjudged") };
        assert!(!verdict.biased);
        assert_eq!(verdict.overlap, Some(0.0));
    }

    #[test]
    fn missing_mask_is_unjudgeable() {
        let mut m = masks();
        m.remove("rim");
        let j = auto_verdict(&map(4, 4, vec![1.0; 16]), &m, &spec(), 0.5, 0.2).unwrap();
        assert!(matches!(j, Judgement::Unjudgeable { .. }));
    }

    #[test]
    fn verdict_slots_fill_once() {
        let truth = Subgroup {
            class_label: 0,
            instances: vec![Instance::A],
        };
        let mut r = ExplanationRecord::new("s1", truth, 1, map(1, 1, vec![1.0]));
        assert!(!r.correct);
        r.set_human(BiasVerdict::unbiased(VerdictSource::Human)).unwrap();
        assert!(r.set_human(BiasVerdict::unbiased(VerdictSource::Human)).is_err());
        r.set_automatic(Judgement::Unjudgeable { reason: "x".into() }).unwrap();
        assert!(r.set_automatic(Judgement::Unjudgeable { reason: "x".into() }).is_err());
    }

    #[test]
    fn bilinear_preserves_constants_and_corners() {
        let m = ndarray::Array2::from_elem((3, 3), 2.0);
        assert!(upsample_bilinear(&m, 7, 5).iter().all(|v| (v - 2.0).abs() < 1e-12));
        let m = ndarray::arr2(&[[0.0, 1.0], [2.0, 3.0]]);
        let up = upsample_bilinear(&m, 4, 4);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[15], 3.0);
        // Pixel (1,0) sits a quarter of the way between the two top cells.
        assert!((up[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(heat_color(0.0), [0, 0, 160]);
        assert_eq!(heat_color(1.0), [220, 0, 0]);
    }
}
