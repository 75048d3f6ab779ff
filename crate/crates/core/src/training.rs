//! Extractor pretraining, head fine-tuning on a frozen extractor, and
//! per-subgroup accuracy tables.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array1, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::draw::{self, Shape};
use crate::dataset::{instance_combinations, DatasetManifest, Instance, Ratio};
use crate::error::{Error, Result};
use crate::metrics::round1;
use crate::nn::layers::Dense;
use crate::nn::network::Network;
use crate::nn::optim::Adam;
use crate::nn::{argmax, image_tensor, Extractor, ExtractorConfig, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            samples: 2000,
            epochs: 10,
            batch_size: 16,
            learning_rate: 3e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub final_loss: f64,
    pub checksum: String,
}

/// Auxiliary task: scenes of one to three random primitives; predict which
/// shapes and which colors are present (multi-label).
fn auxiliary_scene(width: u32, height: u32, rng: &mut impl Rng) -> (Array3<f64>, Array1<f64>) {
    let (mut img, _) = draw::background(width, height, rng);
    let mut labels = Array1::zeros(Shape::ALL.len() + draw::PALETTE.len());
    let mut taken = Vec::new();
    for _ in 0..rng.random_range(1..=3) {
        let size = rng.random_range(6..=12);
        let Some(r) = draw::place(width, height, size, &taken, 1, rng) else {
            continue;
        };
        taken.push(r);
        let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
        let color_idx = rng.random_range(0..draw::PALETTE.len());
        draw::paint(&mut img, shape, size, r.x, r.y, draw::PALETTE[color_idx], rng);
        labels[shape.index()] = 1.0;
        labels[Shape::ALL.len() + color_idx] = 1.0;
    }
    (image_tensor(&img), labels)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Trains the convolutional extractor on the auxiliary shape/color task and
/// returns it for freezing.
pub fn pretrain_extractor(
    config: &ExtractorConfig,
    pretrain: &PretrainConfig,
    width: u32,
    height: u32,
    seed: u64,
) -> Result<(Extractor, PretrainReport)> {
    let extractor = Extractor::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let n_labels = Shape::ALL.len() + draw::PALETTE.len();
    let mut net = Network {
        fc: Dense::new(extractor.out_channels(), n_labels, &mut rng),
        blocks: extractor.blocks,
    };
    let data: Vec<(Array3<f64>, Array1<f64>)> = (0..pretrain.samples)
        .map(|_| auxiliary_scene(width, height, &mut rng))
        .collect();
    let mut opt = Adam::new(pretrain.learning_rate, 0.0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last_loss = f64::NAN;
    for epoch in 0..pretrain.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(pretrain.batch_size.max(1)) {
            let mut grads = net.zero_gradients(0);
            for &i in batch {
                let (x, y) = &data[i];
                let trace = net.trace_from(0, x.clone());
                let p = trace.logits.mapv(sigmoid);
                epoch_loss -= p
                    .iter()
                    .zip(y)
                    .map(|(p, y)| y * p.max(1e-12).ln() + (1.0 - y) * (1.0 - p).max(1e-12).ln())
                    .sum::<f64>();
                let g = &p - y;
                let back = net.backward(&trace, &g, 0, true, None);
                grads.add(&back.params.expect("params requested"));
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(net.params_mut(0), &grads.slices());
        }
        last_loss = epoch_loss / data.len() as f64;
        if !last_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: last_loss,
                config: format!("{pretrain:?}"),
            });
        }
        log::debug!("pretrain epoch {epoch}: loss {last_loss:.4}");
    }
    let extractor = Extractor { blocks: net.blocks };
    let checksum = extractor.checksum();
    Ok((
        extractor,
        PretrainReport {
            final_loss: last_loss,
            checksum,
        },
    ))
}

/// Cached extractor outputs keyed by sample id. The extractor is frozen, so
/// one bank serves every model built on it.
#[derive(Debug, Clone, Default)]
pub struct FeatureBank {
    checksum: String,
    features: HashMap<String, Array3<f64>>,
}

impl FeatureBank {
    pub fn build<'a>(
        extractor: &Extractor,
        manifest: &DatasetManifest,
        ids: impl IntoIterator<Item = &'a String>,
    ) -> Result<Self> {
        let index = manifest.index();
        let mut features = HashMap::new();
        for id in ids {
            if features.contains_key(id) {
                continue;
            }
            let i = *index
                .get(id.as_str())
                .ok_or_else(|| Error::Config(format!("unknown sample id {id}")))?;
            let x = image_tensor(&manifest.samples[i].image);
            features.insert(id.clone(), extractor.features(&x));
        }
        Ok(FeatureBank {
            checksum: extractor.checksum(),
            features,
        })
    }

    pub fn get(&self, id: &str) -> Result<&Array3<f64>> {
        self.features
            .get(id)
            .ok_or_else(|| Error::Config(format!("sample {id} missing from feature bank")))
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            learning_rate: 0.01,
            batch_size: 32,
            weight_decay: 1e-3,
            hidden: 32,
        }
    }
}

pub struct TrainedModel {
    pub model: Model,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

/// Fine-tunes a fresh head on top of `extractor`; extractor parameters are
/// never touched. Single-threaded and deterministic given `seed`.
pub fn train_model(
    extractor: &Extractor,
    bank: &FeatureBank,
    manifest: &DatasetManifest,
    train_ids: &[String],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainedModel> {
    if bank.checksum() != extractor.checksum() {
        return Err(Error::Mismatch(
            "feature bank was built with a different extractor".into(),
        ));
    }
    let index = manifest.index();
    let mut examples: Vec<(&Array3<f64>, u8)> = Vec::with_capacity(train_ids.len());
    for id in train_ids {
        let i = *index
            .get(id.as_str())
            .ok_or_else(|| Error::Config(format!("unknown sample id {id}")))?;
        examples.push((bank.get(id)?, manifest.samples[i].class_label));
    }
    for c in 0..2u8 {
        if !examples.iter().any(|(_, y)| *y == c) {
            return Err(Error::Empty(format!("training split has no class {c} samples")));
        }
    }

    let mut model = Model::new(extractor, config.hidden, seed);
    let frozen = model.frozen_blocks();
    let before = model.extractor_checksum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_0002);
    let mut opt = Adam::new(config.learning_rate, config.weight_decay);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut final_loss = f64::NAN;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut grads = model.network().zero_gradients(frozen);
            for &i in batch {
                let (features, y) = examples[i];
                let trace = model.trace_head(features);
                let mut g = softmax(&trace.logits);
                epoch_loss -= g[y as usize].max(1e-300).ln();
                g[y as usize] -= 1.0;
                let back = model.network().backward(&trace, &g, frozen, true, None);
                grads.add(&back.params.expect("params requested"));
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(model.network_mut().params_mut(frozen), &grads.slices());
        }
        final_loss = epoch_loss / examples.len() as f64;
        if !final_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: final_loss,
                config: format!("{config:?}, seed {seed}"),
            });
        }
    }
    if before != model.extractor_checksum() {
        return Err(Error::Mismatch("frozen extractor weights changed during head training".into()));
    }
    let correct = examples
        .iter()
        .filter(|(f, y)| argmax(&model.logits_from_features(f)) == *y)
        .count();
    Ok(TrainedModel {
        model,
        final_loss,
        train_accuracy: 100.0 * correct as f64 / examples.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub class_label: u8,
    pub instances: Vec<Instance>,
    pub label: String,
    pub correct: usize,
    pub total: usize,
    /// Percent, one decimal, round half up.
    pub accuracy: f64,
}

/// Per-subgroup accuracy for one composition, plus the equal-weight average
/// and the composition-weighted average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupAccuracyTable {
    pub ratio: String,
    pub attributes: Vec<String>,
    pub cells: Vec<AccuracyCell>,
    pub avg: f64,
    pub w_bias: f64,
}

impl SubgroupAccuracyTable {
    /// Builds the aggregate columns from (already rounded) cell accuracies.
    /// `ratios` gives the composition of each attribute in `attributes`.
    pub fn from_cells(
        ratio_label: &str,
        attributes: Vec<String>,
        ratios: &[Ratio],
        cells: Vec<AccuracyCell>,
    ) -> Result<Self> {
        if ratios.len() != attributes.len() {
            return Err(Error::Mismatch("one ratio per attribute required".into()));
        }
        let expected = 2usize << attributes.len();
        if cells.len() != expected {
            return Err(Error::Mismatch(format!(
                "expected {expected} subgroup cells, got {}",
                cells.len()
            )));
        }
        if let Some(c) = cells.iter().find(|c| c.total == 0 && c.accuracy.is_nan()) {
            return Err(Error::Empty(format!("subgroup {} has no test samples", c.label)));
        }
        let avg = cells.iter().map(|c| c.accuracy).sum::<f64>() / cells.len() as f64;
        let mut w_bias = 0.0;
        for class_label in 0..2u8 {
            w_bias += cells
                .iter()
                .filter(|c| c.class_label == class_label)
                .map(|c| {
                    let w: f64 = ratios
                        .iter()
                        .zip(&c.instances)
                        .map(|(r, i)| r.fraction(class_label, *i))
                        .product();
                    w * c.accuracy
                })
                .sum::<f64>();
        }
        Ok(SubgroupAccuracyTable {
            ratio: ratio_label.to_string(),
            attributes,
            cells,
            avg: round1(avg),
            w_bias: round1(w_bias / 2.0),
        })
    }

    /// Single-attribute table from four accuracies ordered
    /// `(class 0, A), (class 0, B), (class 1, A), (class 1, B)`.
    pub fn single(ratio: &Ratio, attribute: &str, accuracies: [f64; 4]) -> Result<Self> {
        let cells = accuracies
            .iter()
            .enumerate()
            .map(|(i, &acc)| AccuracyCell {
                class_label: (i / 2) as u8,
                instances: vec![Instance::BOTH[i % 2]],
                label: format!("c{}/{}", i / 2, Instance::BOTH[i % 2]),
                correct: 0,
                total: 0,
                accuracy: acc,
            })
            .collect();
        Self::from_cells(
            ratio.label(),
            vec![attribute.to_string()],
            std::slice::from_ref(ratio),
            cells,
        )
    }

    pub fn cell(&self, class_label: u8, instances: &[Instance]) -> Option<&AccuracyCell> {
        self.cells
            .iter()
            .find(|c| c.class_label == class_label && c.instances == instances)
    }

    /// Accuracy for a single-attribute table cell.
    pub fn accuracy(&self, class_label: u8, instance: Instance) -> Option<f64> {
        self.cell(class_label, &[instance]).map(|c| c.accuracy)
    }
}

/// One test prediction: true class, instances of the tabulated attributes,
/// predicted class.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub class_label: u8,
    pub instances: Vec<Instance>,
    pub predicted: u8,
}

/// Tabulates outcomes into subgroup cells. Every cell must be populated and
/// all cells must hold the same number of samples.
pub fn tabulate(
    manifest: &DatasetManifest,
    attributes: &[usize],
    ratios: &[Ratio],
    ratio_label: &str,
    outcomes: &[Outcome],
) -> Result<SubgroupAccuracyTable> {
    let mut counts: BTreeMap<(u8, Vec<Instance>), (usize, usize)> = BTreeMap::new();
    for class_label in 0..2u8 {
        for combo in instance_combinations(attributes.len()) {
            counts.insert((class_label, combo), (0, 0));
        }
    }
    for o in outcomes {
        let e = counts
            .get_mut(&(o.class_label, o.instances.clone()))
            .ok_or_else(|| Error::Mismatch("outcome with wrong attribute arity".into()))?;
        e.1 += 1;
        if o.predicted == o.class_label {
            e.0 += 1;
        }
    }
    let label = |class_label: u8, inst: &[Instance]| {
        let mut parts = vec![manifest.class_names[class_label as usize].clone()];
        for (a, i) in attributes.iter().zip(inst) {
            parts.push(manifest.attributes[*a].instance_label(*i).to_string());
        }
        parts.join("/")
    };
    if let Some(((c, inst), _)) = counts.iter().find(|(_, (_, n))| *n == 0) {
        return Err(Error::Empty(format!(
            "subgroup {} has no test samples",
            label(*c, inst)
        )));
    }
    let sizes: Vec<usize> = counts.values().map(|(_, n)| *n).collect();
    if sizes.iter().any(|n| *n != sizes[0]) {
        return Err(Error::Mismatch(format!(
            "test split is not balanced across subgroups: {sizes:?}"
        )));
    }
    let cells = counts
        .into_iter()
        .map(|((class_label, instances), (correct, total))| AccuracyCell {
            label: label(class_label, &instances),
            class_label,
            instances,
            correct,
            total,
            accuracy: round1(100.0 * correct as f64 / total as f64),
        })
        .collect();
    SubgroupAccuracyTable::from_cells(
        ratio_label,
        attributes
            .iter()
            .map(|a| manifest.attributes[*a].name.clone())
            .collect(),
        ratios,
        cells,
    )
}

/// Evaluates `model` on the test ids, tabulated over `attributes` (given by
/// name) with the training composition `ratios` used for w-bias.
pub fn evaluate_subgroups(
    model: &Model,
    bank: &FeatureBank,
    manifest: &DatasetManifest,
    test_ids: &[String],
    attributes: &[&str],
    ratios: &[Ratio],
    ratio_label: &str,
) -> Result<SubgroupAccuracyTable> {
    let attr_idx: Vec<usize> = attributes
        .iter()
        .map(|a| manifest.attribute_index(a))
        .collect::<Result<_>>()?;
    let index = manifest.index();
    let mut outcomes = Vec::with_capacity(test_ids.len());
    for id in test_ids {
        let s = &manifest.samples[*index
            .get(id.as_str())
            .ok_or_else(|| Error::Config(format!("unknown sample id {id}")))?];
        outcomes.push(Outcome {
            class_label: s.class_label,
            instances: attr_idx.iter().map(|a| s.attributes[*a]).collect(),
            predicted: argmax(&model.logits_from_features(bank.get(id)?)),
        });
    }
    tabulate(manifest, &attr_idx, ratios, ratio_label, &outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(s: &str) -> Ratio {
        s.parse().unwrap()
    }

    #[test]
    fn aggregate_columns_for_published_rows() {
        let t = SubgroupAccuracyTable::single(&r("1:1"), "g", [79.4, 82.2, 77.3, 72.1]).unwrap();
        assert_eq!(t.avg, 77.8);
        let t = SubgroupAccuracyTable::single(&r("1:0"), "g", [81.0, 62.8, 57.0, 77.5]).unwrap();
        assert_eq!(t.w_bias, 79.3);
        // 0.75·77.8 + 0.25·72.9 and 0.75·79.1 + 0.25·76.6, averaged: 77.525.
        let t = SubgroupAccuracyTable::single(&r("3:1"), "g", [77.8, 72.9, 76.6, 79.1]).unwrap();
        assert_eq!(t.w_bias, 77.5);
    }

    fn toy_manifest() -> DatasetManifest {
        crate::dataset::generate_synthetic_dataset(&crate::dataset::SyntheticConfig {
            per_subgroup: 1,
            attribute_count: 1,
            ..Default::default()
        })
        .unwrap()
    }

    fn outcomes(pred: impl Fn(u8, Instance, usize) -> u8) -> Vec<Outcome> {
        let mut out = Vec::new();
        for c in 0..2u8 {
            for inst in Instance::BOTH {
                for k in 0..10 {
                    out.push(Outcome {
                        class_label: c,
                        instances: vec![inst],
                        predicted: pred(c, inst, k),
                    });
                }
            }
        }
        out
    }

    #[test]
    fn oracle_predictions_score_100_everywhere() {
        let ds = toy_manifest();
        let t = tabulate(&ds, &[0], &[r("3:1")], "3:1", &outcomes(|c, _, _| c)).unwrap();
        assert!(t.cells.iter().all(|c| c.accuracy == 100.0));
        assert_eq!((t.avg, t.w_bias), (100.0, 100.0));
    }

    #[test]
    fn flipping_labels_complements_accuracy() {
        let ds = toy_manifest();
        let pred = |c: u8, inst: Instance, k: usize| {
            // Wrong on the first (k_threshold) samples of each cell.
            let wrong = k < (c as usize * 3 + inst.index() * 2 + 1);
            if wrong {
                1 - c
            } else {
                c
            }
        };
        let base = outcomes(pred);
        let flipped: Vec<Outcome> = base
            .iter()
            .map(|o| Outcome {
                class_label: 1 - o.class_label,
                ..o.clone()
            })
            .collect();
        let t = tabulate(&ds, &[0], &[r("1:1")], "1:1", &base).unwrap();
        let f = tabulate(&ds, &[0], &[r("1:1")], "1:1", &flipped).unwrap();
        for c in 0..2u8 {
            for inst in Instance::BOTH {
                let a = t.accuracy(c, inst).unwrap();
                let b = f.accuracy(1 - c, inst).unwrap();
                assert!((a + b - 100.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_subgroup_is_an_error() {
        let ds = toy_manifest();
        let partial: Vec<Outcome> = outcomes(|c, _, _| c)
            .into_iter()
            .filter(|o| !(o.class_label == 1 && o.instances[0] == Instance::B))
            .collect();
        assert!(matches!(
            tabulate(&ds, &[0], &[r("1:1")], "1:1", &partial),
            Err(Error::Empty(_))
        ));
    }
}
