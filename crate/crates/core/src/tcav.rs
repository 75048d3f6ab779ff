//! Concept activation vectors, directional derivatives, TCAV scores and
//! their significance against random concepts.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::nn::optim::Adam;
use crate::nn::{image_tensor, ActivationSource, Model};
use crate::seed::{derive_seed, sha256_hex};

/// Positive and negative examples of a concept, as network input tensors.
#[derive(Debug, Clone)]
pub struct ConceptSet {
    pub name: String,
    pub positives: Vec<Array3<f64>>,
    pub negatives: Vec<Array3<f64>>,
    /// Free-text provenance, e.g. how and from where examples were drawn.
    pub notes: String,
    /// Optional declared composition of the examples (attribute → instance
    /// → count), so correlated confounds can be recorded.
    pub composition: Option<BTreeMap<String, BTreeMap<String, usize>>>,
}

fn tensor_hash(t: &Array3<f64>) -> String {
    let mut bytes = Vec::with_capacity(t.len() * 8 + 24);
    for d in t.shape() {
        bytes.extend((*d as u64).to_le_bytes());
    }
    for v in t.iter() {
        bytes.extend(v.to_le_bytes());
    }
    sha256_hex(&bytes)
}

impl ConceptSet {
    pub fn new(name: &str, positives: Vec<Array3<f64>>, negatives: Vec<Array3<f64>>) -> Result<Self> {
        if positives.len() < 2 || negatives.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "concept {name} needs at least 2 examples per side ({} positive, {} negative)",
                positives.len(),
                negatives.len()
            )));
        }
        let pos: HashSet<String> = positives.iter().map(tensor_hash).collect();
        if negatives.iter().any(|n| pos.contains(&tensor_hash(n))) {
            return Err(Error::Config(format!(
                "concept {name} has an example on both sides"
            )));
        }
        Ok(ConceptSet {
            name: name.to_string(),
            positives,
            negatives,
            notes: String::new(),
            composition: None,
        })
    }

    pub fn with_notes(mut self, notes: impl Into<String>) -> Self {
        self.notes = notes.into();
        self
    }

    /// Loads `positives/*.png`, `negatives/*.png` and `concept.json`.
    pub fn load(dir: &Path) -> Result<Self> {
        let descriptor_path = dir.join("concept.json");
        let raw = std::fs::read(&descriptor_path).map_err(|e| Error::io(&descriptor_path, e))?;
        let d: ConceptDescriptor = serde_json::from_slice(&raw)?;
        let side = |name: &str| -> Result<Vec<Array3<f64>>> {
            let sub = dir.join(name);
            let mut paths: Vec<_> = std::fs::read_dir(&sub)
                .map_err(|e| Error::io(&sub, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            paths.sort();
            paths
                .iter()
                .map(|p| {
                    let img = image::open(p).map_err(|e| Error::image(p, e))?.into_rgb8();
                    Ok(image_tensor(&img))
                })
                .collect()
        };
        let mut set = ConceptSet::new(&d.name, side("positives")?, side("negatives")?)?;
        set.notes = d.notes;
        set.composition = d.composition;
        Ok(set)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptDescriptor {
    pub name: String,
    #[serde(default)]
    pub notes: String,
    #[serde(default)]
    pub composition: Option<BTreeMap<String, BTreeMap<String, usize>>>,
}

/// Unit direction in a layer's flattened activation space, oriented toward
/// the concept's positives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cav {
    pub concept: String,
    pub layer: String,
    pub shape: (usize, usize, usize),
    pub direction: Vec<f64>,
    /// Accuracy of the linear classifier on held-out examples.
    pub accuracy: f64,
    pub seed: u64,
}

impl Cav {
    pub fn negated(&self) -> Cav {
        Cav {
            direction: self.direction.iter().map(|v| -v).collect(),
            accuracy: self.accuracy,
            ..self.clone()
        }
    }
}

/// Fraction of examples held out to measure CAV accuracy.
pub const HELD_OUT_FRACTION: f64 = 0.25;

const CAV_STEPS: usize = 300;
const CAV_LEARNING_RATE: f64 = 0.05;
const CAV_L2: f64 = 1e-3;

fn flatten(acts: &[Array3<f64>]) -> Result<(Array2<f64>, (usize, usize, usize))> {
    let shape = acts
        .first()
        .map(|a| a.dim())
        .ok_or_else(|| Error::InsufficientData("no activations".into()))?;
    let d = shape.0 * shape.1 * shape.2;
    let mut x = Array2::zeros((acts.len(), d));
    for (i, a) in acts.iter().enumerate() {
        if a.dim() != shape {
            return Err(Error::Shape("activations differ in shape".into()));
        }
        x.row_mut(i).iter_mut().zip(a.iter()).for_each(|(o, v)| *o = *v);
    }
    Ok((x, shape))
}

/// Fits a logistic-regression CAV on precomputed activations.
///
/// Each side is shuffled with `seed`; a quarter of each side (at least one
/// example) is held out for the accuracy estimate.
pub fn fit_cav(
    concept: &str,
    layer: &str,
    positives: &[Array3<f64>],
    negatives: &[Array3<f64>],
    seed: u64,
) -> Result<Cav> {
    if positives.len() < 2 || negatives.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "concept {concept} needs at least 2 examples per side"
        )));
    }
    let (xp, shape) = flatten(positives)?;
    let (xn, shape_n) = flatten(negatives)?;
    if shape != shape_n {
        return Err(Error::Shape("positive and negative activations differ in shape".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = |n: usize, rng: &mut ChaCha8Rng| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let held = ((n as f64 * HELD_OUT_FRACTION).round() as usize).clamp(1, n - 1);
        let train = idx.split_off(held);
        (train, idx)
    };
    let (p_train, p_test) = split(xp.nrows(), &mut rng);
    let (n_train, n_test) = split(xn.nrows(), &mut rng);

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for &i in &p_train {
        rows.push(xp.row(i));
        labels.push(1.0);
    }
    for &i in &n_train {
        rows.push(xn.row(i));
        labels.push(0.0);
    }
    let x = ndarray::stack(ndarray::Axis(0), &rows).expect("equal row lengths");
    let y = Array1::from(labels);

    // Centering and a single global scale change only the intercept and the
    // norm of w, not its direction, but make the optimisation well posed.
    let mean = x.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = &x - &mean;
    let rms = (centered.mapv(|v| v * v).sum() / centered.len() as f64).sqrt();
    if !(rms > 1e-12) {
        return Err(Error::Degenerate(format!(
            "activations for concept {concept} at {layer} have zero variance"
        )));
    }
    let xs = centered / rms;

    let n = xs.nrows() as f64;
    let mut w = Array1::<f64>::zeros(xs.ncols());
    let mut b = Array1::<f64>::zeros(1);
    let mut opt = Adam::new(CAV_LEARNING_RATE, 0.0);
    for _ in 0..CAV_STEPS {
        let z = xs.dot(&w) + b[0];
        let err = z.mapv(|v| 1.0 / (1.0 + (-v).exp())) - &y;
        let gw = xs.t().dot(&err) / n + &w * CAV_L2;
        let gb = Array1::from(vec![err.sum() / n]);
        opt.step(
            vec![
                w.as_slice_mut().expect("standard layout"),
                b.as_slice_mut().expect("standard layout"),
            ],
            &[
                gw.as_slice().expect("standard layout"),
                gb.as_slice().expect("standard layout"),
            ],
        );
    }
    let norm = w.dot(&w).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate(format!(
            "CAV for concept {concept} at {layer} did not converge to a direction"
        )));
    }
    // Decision function in the original activation space.
    let predict = |row: ndarray::ArrayView1<f64>| ((&row - &mean) / rms).dot(&w) + b[0] > 0.0;
    let correct = p_test.iter().filter(|&&i| predict(xp.row(i))).count()
        + n_test.iter().filter(|&&i| !predict(xn.row(i))).count();
    Ok(Cav {
        concept: concept.to_string(),
        layer: layer.to_string(),
        shape,
        direction: (w / norm).to_vec(),
        accuracy: correct as f64 / (p_test.len() + n_test.len()) as f64,
        seed,
    })
}

/// Activations of every image at `layer`.
pub fn activations(
    source: &dyn ActivationSource,
    layer: &str,
    images: &[Array3<f64>],
) -> Result<Vec<Array3<f64>>> {
    images.iter().map(|x| source.activation(x, layer)).collect()
}

/// Trains a CAV for `concept` at `layer`.
pub fn train_cav(source: &dyn ActivationSource, layer: &str, concept: &ConceptSet, seed: u64) -> Result<Cav> {
    let pos = activations(source, layer, &concept.positives)?;
    let neg = activations(source, layer, &concept.negatives)?;
    fit_cav(&concept.name, layer, &pos, &neg, seed)
}

/// Fraction of concept examples kept in each run's subsample.
pub const RUN_SUBSAMPLE: f64 = 0.8;

/// Per-run CAVs from precomputed activations: run `r` uses a seed derived
/// from `(seed, r)` and a subsample of each side.
pub fn fit_cav_runs(
    concept: &str,
    layer: &str,
    positives: &[Array3<f64>],
    negatives: &[Array3<f64>],
    n_runs: usize,
    seed: u64,
) -> Result<Vec<Cav>> {
    (0..n_runs)
        .map(|r| {
            let run_seed = derive_seed(seed, concept, &format!("cav-run-{r}"));
            let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
            let pick = |acts: &[Array3<f64>], rng: &mut ChaCha8Rng| {
                let k = ((acts.len() as f64 * RUN_SUBSAMPLE).round() as usize).clamp(2, acts.len());
                let mut idx = index::sample(rng, acts.len(), k).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| acts[i].clone()).collect::<Vec<_>>()
            };
            let p = pick(positives, &mut rng);
            let n = pick(negatives, &mut rng);
            fit_cav(concept, layer, &p, &n, run_seed)
        })
        .collect()
}

/// `∇(class logit w.r.t. the flattened layer activation) · cav` at the
/// image's activation.
pub fn directional_derivative(
    model: &Model,
    layer: &str,
    image: &Array3<f64>,
    target_class: u8,
    cav: &Cav,
) -> Result<f64> {
    if cav.layer != layer {
        return Err(Error::Mismatch(format!(
            "CAV was trained at {} but {layer} was requested",
            cav.layer
        )));
    }
    let (_, grad) = model.class_gradient(image, layer, target_class)?;
    derivative_from_gradient(&grad, cav)
}

/// Dot product of a precomputed activation gradient with the CAV.
pub fn derivative_from_gradient(grad: &Array3<f64>, cav: &Cav) -> Result<f64> {
    if grad.dim() != cav.shape || grad.len() != cav.direction.len() {
        return Err(Error::Shape(format!(
            "gradient shape {:?} does not match CAV shape {:?}",
            grad.dim(),
            cav.shape
        )));
    }
    Ok(grad.iter().zip(&cav.direction).map(|(g, d)| g * d).sum())
}

/// Class-logit gradients at `layer` for every image, computed once and
/// shared across CAVs.
pub fn class_gradients(
    model: &Model,
    layer: &str,
    images: &[Array3<f64>],
    target_class: u8,
) -> Result<Vec<Array3<f64>>> {
    images
        .iter()
        .map(|x| model.class_gradient(x, layer, target_class).map(|(_, g)| g))
        .collect()
}

/// `100 × |{x : derivative > 0}| / |images|` per CAV. A zero derivative is
/// not positive.
pub fn run_scores(gradients: &[Array3<f64>], cavs: &[Cav]) -> Result<Vec<f64>> {
    if gradients.is_empty() {
        return Err(Error::Empty("no class images to score".into()));
    }
    cavs.iter()
        .map(|cav| {
            let mut positive = 0usize;
            for g in gradients {
                if derivative_from_gradient(g, cav)? > 0.0 {
                    positive += 1;
                }
            }
            Ok(100.0 * positive as f64 / gradients.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub p_value: f64,
    pub significant: bool,
    pub alpha: f64,
}

/// Default significance level.
pub const ALPHA: f64 = 0.05;

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Welch's two-sided two-sample t-test of equal means.
///
/// When both samples have zero variance the p-value is 1 for equal means
/// and 0 otherwise.
pub fn significance_test(concept_runs: &[f64], random_runs: &[f64], alpha: f64) -> Result<Significance> {
    if concept_runs.len() < 2 || random_runs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "significance test needs at least 2 runs per side ({} vs {})",
            concept_runs.len(),
            random_runs.len()
        )));
    }
    let (m1, v1) = mean_var(concept_runs);
    let (m2, v2) = mean_var(random_runs);
    let (n1, n2) = (concept_runs.len() as f64, random_runs.len() as f64);
    let se2 = v1 / n1 + v2 / n2;
    let p_value = if se2 == 0.0 {
        if m1 == m2 {
            1.0
        } else {
            0.0
        }
    } else {
        let t = (m1 - m2) / se2.sqrt();
        let df = se2 * se2 / ((v1 / n1).powi(2) / (n1 - 1.0) + (v2 / n2).powi(2) / (n2 - 1.0));
        let dist = StudentsT::new(0.0, 1.0, df)
            .map_err(|e| Error::Degenerate(format!("t distribution: {e}")))?;
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(Significance {
        p_value,
        significant: p_value < alpha,
        alpha,
    })
}

/// Random concepts of the given cardinalities drawn from a pooled universe
/// of activations; positives and negatives never share an example.
pub fn random_concept_runs(
    universe: &[Array3<f64>],
    n_positive: usize,
    n_negative: usize,
    layer: &str,
    n_runs: usize,
    seed: u64,
) -> Result<Vec<Cav>> {
    if n_positive + n_negative > universe.len() {
        return Err(Error::InsufficientData(format!(
            "random concepts need {} examples, universe has {}",
            n_positive + n_negative,
            universe.len()
        )));
    }
    (0..n_runs)
        .map(|r| {
            let run_seed = derive_seed(seed, "random", &format!("cav-run-{r}"));
            let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
            let idx = index::sample(&mut rng, universe.len(), n_positive + n_negative).into_vec();
            let pos: Vec<_> = idx[..n_positive].iter().map(|&i| universe[i].clone()).collect();
            let neg: Vec<_> = idx[n_positive..].iter().map(|&i| universe[i].clone()).collect();
            fit_cav(&format!("random-{r}"), layer, &pos, &neg, run_seed)
        })
        .collect()
}

/// Score of one concept for one class over several runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcavResult {
    pub class_label: u8,
    pub concept: String,
    pub score: f64,
    pub run_scores: Vec<f64>,
    pub p_value: Option<f64>,
    pub significant: Option<bool>,
}

impl TcavResult {
    pub fn from_runs(class_label: u8, concept: &str, run_scores: Vec<f64>) -> Result<Self> {
        if run_scores.is_empty() {
            return Err(Error::InsufficientData("no TCAV runs".into()));
        }
        Ok(TcavResult {
            class_label,
            concept: concept.to_string(),
            score: run_scores.iter().sum::<f64>() / run_scores.len() as f64,
            run_scores,
            p_value: None,
            significant: None,
        })
    }

    pub fn with_significance(mut self, s: Significance) -> Self {
        self.p_value = Some(s.p_value);
        self.significant = Some(s.significant);
        self
    }
}

/// TCAV score of `concept` for `target_class` over `n_runs` CAVs, without a
/// random-concept comparison.
pub fn tcav_score(
    model: &Model,
    layer: &str,
    concept: &ConceptSet,
    class_images: &[Array3<f64>],
    target_class: u8,
    n_runs: usize,
    seed: u64,
) -> Result<TcavResult> {
    if class_images.is_empty() {
        return Err(Error::Empty("no class images to score".into()));
    }
    let pos = activations(model, layer, &concept.positives)?;
    let neg = activations(model, layer, &concept.negatives)?;
    let cavs = fit_cav_runs(&concept.name, layer, &pos, &neg, n_runs, seed)?;
    let grads = class_gradients(model, layer, class_images, target_class)?;
    TcavResult::from_runs(target_class, &concept.name, run_scores(&grads, &cavs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, shift: f64, rng: &mut ChaCha8Rng) -> Vec<Array3<f64>> {
        (0..n)
            .map(|_| {
                Array3::from_shape_fn((1, 1, d), |(_, _, k)| {
                    let z: f64 = StandardNormal.sample(rng);
                    z + if k == 0 { shift } else { 0.0 }
                })
            })
            .collect()
    }

    #[test]
    fn separable_sets_give_perfect_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pos = gaussian(40, 8, 8.0, &mut rng);
        let neg = gaussian(40, 8, -8.0, &mut rng);
        let cav = fit_cav("c", "l", &pos, &neg, 1).unwrap();
        assert_eq!(cav.accuracy, 1.0);
        let norm: f64 = cav.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(cav.direction[0] > 0.9);
    }

    #[test]
    fn same_distribution_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pos = gaussian(200, 16, 0.0, &mut rng);
        let neg = gaussian(200, 16, 0.0, &mut rng);
        let cav = fit_cav("c", "l", &pos, &neg, 2).unwrap();
        assert!((cav.accuracy - 0.5).abs() <= 0.1, "accuracy {}", cav.accuracy);
    }

    #[test]
    fn cav_fitting_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pos = gaussian(10, 4, 1.0, &mut rng);
        let neg = gaussian(10, 4, -1.0, &mut rng);
        assert_eq!(
            fit_cav("c", "l", &pos, &neg, 9).unwrap(),
            fit_cav("c", "l", &pos, &neg, 9).unwrap()
        );
    }

    #[test]
    fn constant_activations_are_degenerate() {
        let same = vec![Array3::from_elem((1, 1, 3), 0.7); 6];
        assert!(matches!(
            fit_cav("c", "l", &same[..3], &same[3..], 0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn significance_conventions() {
        let s = significance_test(&[60.0, 60.0], &[60.0, 60.0], ALPHA).unwrap();
        assert_eq!((s.p_value, s.significant), (1.0, false));
        let s = significance_test(&[100.0, 100.0], &[0.0, 0.0], ALPHA).unwrap();
        assert_eq!((s.p_value, s.significant), (0.0, true));
        assert!(significance_test(&[1.0], &[1.0, 2.0], ALPHA).is_err());
        let a = [40.0, 55.0, 61.0, 48.0];
        let s = significance_test(&a, &a, ALPHA).unwrap();
        assert_eq!(s.p_value, 1.0);
    }

    #[test]
    fn welch_matches_hand_computation() {
        // Means 100 and 50, variances 0 and 10: t = 50/√(10/5) = 35.36,
        // df = 4, so p is far below 0.01.
        let s = significance_test(&[100.0; 5], &[46.0, 48.0, 50.0, 52.0, 54.0], ALPHA).unwrap();
        assert!(s.p_value < 1e-4 && s.significant);
        // Means 1 and 3, variances 1 and 1, n = 3: t = −2/√(2/3) = −2.449,
        // df = 4, two-sided p = 0.0705.
        let s = significance_test(&[0.0, 1.0, 2.0], &[2.0, 3.0, 4.0], ALPHA).unwrap();
        assert!((s.p_value - 0.0705).abs() < 5e-4, "p = {}", s.p_value);
        assert!(!s.significant);
    }

    #[test]
    fn concept_sets_validate_sides() {
        let a = Array3::from_elem((1, 2, 2), 0.1);
        let b = Array3::from_elem((1, 2, 2), 0.2);
        let c = Array3::from_elem((1, 2, 2), 0.3);
        assert!(ConceptSet::new("x", vec![a.clone()], vec![b.clone(), c.clone()]).is_err());
        assert!(ConceptSet::new("x", vec![a.clone(), b.clone()], vec![b.clone(), c.clone()]).is_err());
        assert!(ConceptSet::new("x", vec![a, b], vec![c.clone(), c * 2.0]).is_ok());
    }
}
