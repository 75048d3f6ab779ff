//! Group-fairness baseline (subgroup accuracy disparity) and the four
//! explanation-based fairness metrics M1–M4.
//!
//! Every metric is either a percentage rounded half-up to one decimal or
//! `None`, the explicit undefined marker used when a denominator vanishes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Instance;
use crate::error::{Error, Result};
use crate::training::SubgroupAccuracyTable;

/// Rounds half up to one decimal. The small epsilon absorbs binary
/// representation error so that e.g. 77.75 rounds to 77.8.
pub fn round1(x: f64) -> f64 {
    (x * 10.0 + 0.5 + 1e-9).floor() / 10.0
}

/// Explanation counts for one subgroup (class × attribute instances).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountCell {
    pub class_label: u8,
    pub instances: Vec<Instance>,
    pub n_examined: usize,
    pub n_bias: usize,
    pub n_incorrect_bias: usize,
}

/// Per-subgroup counts of examined explanations, explanations indicating
/// bias, and incorrect predictions whose explanation indicates bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCountTable {
    pub ratio: String,
    pub attributes: Vec<String>,
    /// Sorted by `(class_label, instances)`.
    pub cells: Vec<CountCell>,
    /// Records excluded because no verdict could be formed.
    pub unjudgeable: usize,
}

impl BiasCountTable {
    pub fn new(
        ratio: &str,
        attributes: Vec<String>,
        mut cells: Vec<CountCell>,
        unjudgeable: usize,
    ) -> Result<Self> {
        for c in &cells {
            if c.instances.len() != attributes.len() {
                return Err(Error::Mismatch(format!(
                    "count cell has {} instances for {} attributes",
                    c.instances.len(),
                    attributes.len()
                )));
            }
            if c.class_label > 1 {
                return Err(Error::Mismatch(format!("class {} outside {{0, 1}}", c.class_label)));
            }
            if !(c.n_incorrect_bias <= c.n_bias && c.n_bias <= c.n_examined) {
                return Err(Error::Mismatch(format!(
                    "count cell violates incorrect ≤ biased ≤ examined: {}/{}/{}",
                    c.n_incorrect_bias, c.n_bias, c.n_examined
                )));
            }
        }
        cells.sort_by(|a, b| (a.class_label, &a.instances).cmp(&(b.class_label, &b.instances)));
        if cells
            .windows(2)
            .any(|w| (w[0].class_label, &w[0].instances) == (w[1].class_label, &w[1].instances))
        {
            return Err(Error::Mismatch("duplicate subgroup in count table".into()));
        }
        Ok(BiasCountTable {
            ratio: ratio.to_string(),
            attributes,
            cells,
            unjudgeable,
        })
    }

    /// Single-attribute table from `(incorrect_biased, biased, examined)`
    /// triples ordered `(class 0, A), (class 0, B), (class 1, A), (class 1, B)`.
    pub fn single(ratio: &str, attribute: &str, counts: [(usize, usize, usize); 4]) -> Result<Self> {
        let cells = counts
            .iter()
            .enumerate()
            .map(|(i, &(inc, bias, exam))| CountCell {
                class_label: (i / 2) as u8,
                instances: vec![Instance::BOTH[i % 2]],
                n_examined: exam,
                n_bias: bias,
                n_incorrect_bias: inc,
            })
            .collect();
        Self::new(ratio, vec![attribute.to_string()], cells, 0)
    }

    pub fn cell(&self, class_label: u8, instances: &[Instance]) -> Option<&CountCell> {
        self.cells
            .iter()
            .find(|c| c.class_label == class_label && c.instances == instances)
    }

    /// `(Σ incorrect_biased, Σ biased, Σ examined)`.
    pub fn totals(&self) -> (usize, usize, usize) {
        self.cells.iter().fold((0, 0, 0), |(i, b, e), c| {
            (i + c.n_incorrect_bias, b + c.n_bias, e + c.n_examined)
        })
    }

    /// Counts summed over every attribute except `attribute`.
    pub fn marginal(&self, attribute: usize) -> Result<BiasCountTable> {
        if attribute >= self.attributes.len() {
            return Err(Error::Mismatch(format!("no attribute #{attribute} in count table")));
        }
        let mut acc: BTreeMap<(u8, Instance), (usize, usize, usize)> = BTreeMap::new();
        for c in &self.cells {
            let e = acc.entry((c.class_label, c.instances[attribute])).or_default();
            e.0 += c.n_incorrect_bias;
            e.1 += c.n_bias;
            e.2 += c.n_examined;
        }
        let cells = acc
            .into_iter()
            .map(|((class_label, inst), (inc, bias, exam))| CountCell {
                class_label,
                instances: vec![inst],
                n_examined: exam,
                n_bias: bias,
                n_incorrect_bias: inc,
            })
            .collect();
        BiasCountTable::new(
            &self.ratio,
            vec![self.attributes[attribute].clone()],
            cells,
            self.unjudgeable,
        )
    }

    /// The same table with instances A and B interchanged for `attribute`.
    pub fn relabeled(&self, attribute: usize) -> BiasCountTable {
        let cells = self
            .cells
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.instances[attribute] = c.instances[attribute].other();
                c
            })
            .collect();
        BiasCountTable::new(&self.ratio, self.attributes.clone(), cells, self.unjudgeable)
            .expect("relabeling preserves validity")
    }
}

/// Mean over classes of `|acc(c, A) − acc(c, B)|` for the attribute at
/// `attribute` (cells are averaged over the other attributes first).
pub fn unfairness(acc: &SubgroupAccuracyTable, attribute: usize) -> Option<f64> {
    let mut gaps = Vec::with_capacity(2);
    for class_label in 0..2u8 {
        let mean = |inst: Instance| {
            let v: Vec<f64> = acc
                .cells
                .iter()
                .filter(|c| c.class_label == class_label && c.instances.get(attribute) == Some(&inst))
                .map(|c| c.accuracy)
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        gaps.push((mean(Instance::A)? - mean(Instance::B)?).abs());
    }
    Some(round1(gaps.iter().sum::<f64>() / 2.0))
}

/// Percentage of examined explanations that indicate bias on an incorrect
/// prediction.
pub fn metric1(counts: &BiasCountTable) -> Option<f64> {
    let (inc, _, exam) = counts.totals();
    (exam > 0).then(|| round1(100.0 * inc as f64 / exam as f64))
}

/// Percentage of examined explanations that indicate bias.
pub fn metric2(counts: &BiasCountTable) -> Option<f64> {
    let (_, bias, exam) = counts.totals();
    (exam > 0).then(|| round1(100.0 * bias as f64 / exam as f64))
}

/// Mean over classes of the gap, between the two instances of `attribute`,
/// in the error rate among explanations indicating bias.
pub fn metric3(counts: &BiasCountTable, attribute: usize) -> Option<f64> {
    let table = counts.marginal(attribute).ok()?;
    let mut gaps = Vec::with_capacity(2);
    for class_label in 0..2u8 {
        let rate = |inst: Instance| {
            let c = table.cell(class_label, &[inst])?;
            (c.n_bias > 0).then(|| 100.0 * c.n_incorrect_bias as f64 / c.n_bias as f64)
        };
        gaps.push((rate(Instance::A)? - rate(Instance::B)?).abs());
    }
    Some(round1(gaps.iter().sum::<f64>() / 2.0))
}

/// TCAV score for one (class, concept instance) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScoreCell {
    pub class_label: u8,
    pub instance: Instance,
    pub score: f64,
    pub run_scores: Vec<f64>,
    pub p_value: Option<f64>,
    pub significant: Option<bool>,
}

/// TCAV scores of one attribute's two concepts against both classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScoreTable {
    pub ratio: String,
    pub attribute: String,
    pub cells: Vec<ConceptScoreCell>,
}

impl ConceptScoreTable {
    /// Table from scores ordered `(class 0, A), (class 0, B), (class 1, A),
    /// (class 1, B)`.
    pub fn from_scores(ratio: &str, attribute: &str, scores: [f64; 4]) -> Self {
        ConceptScoreTable {
            ratio: ratio.to_string(),
            attribute: attribute.to_string(),
            cells: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| ConceptScoreCell {
                    class_label: (i / 2) as u8,
                    instance: Instance::BOTH[i % 2],
                    score: s,
                    run_scores: vec![s],
                    p_value: None,
                    significant: None,
                })
                .collect(),
        }
    }

    pub fn score(&self, class_label: u8, instance: Instance) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.class_label == class_label && c.instance == instance)
            .map(|c| c.score)
    }
}

/// Mean over classes of `|score(c, A) − score(c, B)|`.
pub fn metric4(scores: &ConceptScoreTable) -> Option<f64> {
    let mut gaps = Vec::with_capacity(2);
    for class_label in 0..2u8 {
        gaps.push(
            (scores.score(class_label, Instance::A)? - scores.score(class_label, Instance::B)?).abs(),
        );
    }
    Some(round1(gaps.iter().sum::<f64>() / 2.0))
}

/// Parameters embedded into every report for reproducibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportParams {
    pub tau: f64,
    pub mass_quantile: f64,
    pub budget_per_subgroup: usize,
    pub judging: String,
    pub alpha: f64,
    pub tcav_runs: usize,
    /// Optional unfairness tolerance per attribute; exceeding it only flags
    /// the report.
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
}

impl Default for ReportParams {
    fn default() -> Self {
        ReportParams {
            tau: 0.5,
            mass_quantile: 0.2,
            budget_per_subgroup: 50,
            judging: "auto".into(),
            alpha: 0.05,
            tcav_runs: 10,
            tolerances: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeMetrics {
    pub attribute: String,
    pub unfairness: Option<f64>,
    pub m3: Option<f64>,
    pub m4: Option<f64>,
    pub tolerance_exceeded: bool,
}

/// Fairness metrics for one trained model. The top-level unfairness, M3 and
/// M4 refer to the first audited attribute; `per_attribute` lists all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ratio: String,
    pub avg: f64,
    pub w_bias: f64,
    pub unfairness: Option<f64>,
    pub m1: Option<f64>,
    pub m2: Option<f64>,
    pub m3: Option<f64>,
    pub m4: Option<f64>,
    pub per_attribute: Vec<AttributeMetrics>,
    pub params: ReportParams,
    pub flags: Vec<String>,
}

/// Assembles a report. All inputs must carry the same composition tag.
pub fn build_report(
    acc: &SubgroupAccuracyTable,
    counts: Option<&BiasCountTable>,
    tcav: &[ConceptScoreTable],
    params: &ReportParams,
) -> Result<MetricsReport> {
    let tags = counts
        .map(|c| c.ratio.as_str())
        .into_iter()
        .chain(tcav.iter().map(|t| t.ratio.as_str()));
    for tag in tags {
        if tag != acc.ratio {
            return Err(Error::Mismatch(format!(
                "report inputs come from different compositions: {} vs {tag}",
                acc.ratio
            )));
        }
    }
    let mut per_attribute = Vec::with_capacity(acc.attributes.len());
    let mut flags = Vec::new();
    for (i, name) in acc.attributes.iter().enumerate() {
        let unf = unfairness(acc, i);
        let m3 = counts.and_then(|c| {
            let j = c.attributes.iter().position(|a| a == name)?;
            metric3(c, j)
        });
        let m4 = tcav.iter().find(|t| &t.attribute == name).and_then(metric4);
        let tolerance_exceeded = match (params.tolerances.get(name), unf) {
            (Some(tol), Some(u)) => u > *tol,
            _ => false,
        };
        if tolerance_exceeded {
            flags.push(format!(
                "unfairness for {name} ({}) exceeds tolerance {}",
                unf.unwrap_or_default(),
                params.tolerances[name]
            ));
        }
        per_attribute.push(AttributeMetrics {
            attribute: name.clone(),
            unfairness: unf,
            m3,
            m4,
            tolerance_exceeded,
        });
    }
    let first = per_attribute.first();
    Ok(MetricsReport {
        ratio: acc.ratio.clone(),
        avg: acc.avg,
        w_bias: acc.w_bias,
        unfairness: first.and_then(|a| a.unfairness),
        m1: counts.and_then(metric1),
        m2: counts.and_then(metric2),
        m3: first.and_then(|a| a.m3),
        m4: first.and_then(|a| a.m4),
        per_attribute,
        params: params.clone(),
        flags,
    })
}
