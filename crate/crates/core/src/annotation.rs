//! Human review sessions over Grad-CAM explanations: a blinded, shuffled item
//! queue, an append-only verdict log, count export and agreement statistics.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AttributeSpec, Subgroup};
use crate::error::{Error, Result};
use crate::gradcam::{BiasVerdict, ExplanationRecord, Judgement, VerdictSource};
use crate::metrics::{BiasCountTable, CountCell};

pub const SESSION_FILE: &str = "session.json";
pub const LOG_FILE: &str = "verdicts.jsonl";

/// Annotator id recorded for verdicts copied from the automatic oracle.
pub const AUTO_ANNOTATOR: &str = "auto";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub id: String,
    /// Composition tag carried into exported counts.
    pub ratio: String,
    pub budget_per_subgroup: usize,
    pub seed: u64,
    /// Verdicts needed before an item counts as judged; with more than one,
    /// the item's verdict is the majority (ties count as unbiased).
    pub max_verdicts_per_item: usize,
}

/// An explanation offered to a session together with its overlay image.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub record: ExplanationRecord,
    pub overlay: PathBuf,
}

/// A queued item. Only [`ItemPayload`] is ever shown to annotators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionItem {
    pub item_id: String,
    pub sample_id: String,
    pub truth: Subgroup,
    pub predicted: u8,
    pub correct: bool,
    pub overlay: PathBuf,
    pub automatic: Option<Judgement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistEntry {
    pub attribute: String,
    pub features: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub judged: usize,
    pub total: usize,
}

/// What the annotator sees: no subgroup, class truth or correctness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemPayload {
    pub item_id: String,
    pub overlay_png_url: String,
    pub feature_checklist: Vec<ChecklistEntry>,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictSubmission {
    pub biased: bool,
    #[serde(default)]
    pub attribute: Option<String>,
    #[serde(default)]
    pub feature: Option<String>,
    #[serde(default)]
    pub annotator: Option<String>,
}

/// One line of the append-only verdict log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictEntry {
    pub item_id: String,
    pub biased: bool,
    pub attribute: Option<String>,
    pub feature: Option<String>,
    pub annotator: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    pub ratio: String,
    pub attributes: Vec<String>,
    pub progress: Progress,
    pub cursor: usize,
    pub complete: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionFile {
    config: SessionConfig,
    checklist: Vec<AttributeSpec>,
    attribute_names: Vec<String>,
    attribute_indices: Vec<usize>,
    items: Vec<SessionItem>,
}

#[derive(Debug)]
pub struct AnnotationSession {
    config: SessionConfig,
    checklist: Vec<AttributeSpec>,
    attribute_names: Vec<String>,
    attribute_indices: Vec<usize>,
    items: Vec<SessionItem>,
    log: Vec<VerdictEntry>,
    verdicts: BTreeMap<String, Vec<usize>>,
    dir: Option<PathBuf>,
}

fn tabulated(truth: &Subgroup, attributes: &[usize]) -> Result<Subgroup> {
    Ok(Subgroup {
        class_label: truth.class_label,
        instances: attributes
            .iter()
            .map(|&a| {
                truth
                    .instances
                    .get(a)
                    .copied()
                    .ok_or_else(|| Error::Mismatch(format!("record lacks attribute #{a}")))
            })
            .collect::<Result<_>>()?,
    })
}

impl AnnotationSession {
    /// Draws `budget_per_subgroup` candidates from every subgroup (class ×
    /// instances of the tabulated attributes), shuffles them and assigns
    /// opaque item ids in queue order.
    pub fn create(
        config: SessionConfig,
        checklist: Vec<AttributeSpec>,
        attributes: &[(String, usize)],
        candidates: Vec<Candidate>,
    ) -> Result<Self> {
        if config.max_verdicts_per_item == 0 {
            return Err(Error::Config("max_verdicts_per_item must be at least 1".into()));
        }
        for spec in &checklist {
            spec.validate()?;
        }
        let indices: Vec<usize> = attributes.iter().map(|(_, i)| *i).collect();
        let mut by_subgroup: BTreeMap<Subgroup, Vec<Candidate>> = Subgroup::enumerate(indices.len())
            .into_iter()
            .map(|s| (s, Vec::new()))
            .collect();
        for c in candidates {
            let key = tabulated(&c.record.truth, &indices)?;
            by_subgroup.entry(key).or_default().push(c);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut chosen = Vec::new();
        for (subgroup, mut pool) in by_subgroup {
            if pool.len() < config.budget_per_subgroup {
                let label = std::iter::once(format!("class {}", subgroup.class_label))
                    .chain(
                        attributes
                            .iter()
                            .zip(&subgroup.instances)
                            .map(|((name, _), inst)| format!("{name}={inst}")),
                    )
                    .collect::<Vec<_>>()
                    .join(", ");
                return Err(Error::InsufficientSamples {
                    subgroup: label,
                    needed: config.budget_per_subgroup,
                    available: pool.len(),
                });
            }
            pool.sort_by(|a, b| a.record.sample_id.cmp(&b.record.sample_id));
            pool.shuffle(&mut rng);
            pool.truncate(config.budget_per_subgroup);
            chosen.extend(pool);
        }
        chosen.shuffle(&mut rng);
        let items = chosen
            .into_iter()
            .enumerate()
            .map(|(i, c)| SessionItem {
                item_id: format!("item-{:04}", i + 1),
                sample_id: c.record.sample_id,
                truth: c.record.truth,
                predicted: c.record.predicted,
                correct: c.record.correct,
                overlay: c.overlay,
                automatic: c.record.automatic,
            })
            .collect();
        Ok(AnnotationSession {
            config,
            checklist,
            attribute_names: attributes.iter().map(|(n, _)| n.clone()).collect(),
            attribute_indices: indices,
            items,
            log: Vec::new(),
            verdicts: BTreeMap::new(),
            dir: None,
        })
    }

    /// Writes the session descriptor into `dir` (which must not already hold
    /// one) and appends every later verdict to the log there.
    pub fn persist(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SESSION_FILE);
        let file = SessionFile {
            config: self.config.clone(),
            checklist: self.checklist.clone(),
            attribute_names: self.attribute_names.clone(),
            attribute_indices: self.attribute_indices.clone(),
            items: self.items.clone(),
        };
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(&serde_json::to_vec_pretty(&file)?)
            .map_err(|e| Error::io(&path, e))?;
        let log_path = dir.join(LOG_FILE);
        let mut log = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        for entry in &self.log {
            writeln!(log, "{}", serde_json::to_string(entry)?).map_err(|e| Error::io(&log_path, e))?;
        }
        self.dir = Some(dir.to_path_buf());
        Ok(())
    }

    /// Reopens a persisted session by replaying its verdict log.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(SESSION_FILE);
        let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let file: SessionFile = serde_json::from_slice(&raw)?;
        let mut session = AnnotationSession {
            config: file.config,
            checklist: file.checklist,
            attribute_names: file.attribute_names,
            attribute_indices: file.attribute_indices,
            items: file.items,
            log: Vec::new(),
            verdicts: BTreeMap::new(),
            dir: None,
        };
        let log_path = dir.join(LOG_FILE);
        if log_path.exists() {
            let f = File::open(&log_path).map_err(|e| Error::io(&log_path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(&log_path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: VerdictEntry = serde_json::from_str(&line)?;
                session.check(&entry)?;
                session.apply(entry);
            }
        }
        session.dir = Some(dir.to_path_buf());
        Ok(session)
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn items(&self) -> &[SessionItem] {
        &self.items
    }

    pub fn log(&self) -> &[VerdictEntry] {
        &self.log
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn checklist(&self) -> Vec<ChecklistEntry> {
        self.checklist
            .iter()
            .map(|s| ChecklistEntry {
                attribute: s.name.clone(),
                features: s.feature_list.clone(),
            })
            .collect()
    }

    fn item(&self, item_id: &str) -> Result<&SessionItem> {
        self.items
            .iter()
            .find(|i| i.item_id == item_id)
            .ok_or_else(|| Error::UnknownItem(item_id.to_string()))
    }

    /// Overlay image of an item; relative paths are resolved against the
    /// session directory.
    pub fn overlay_path(&self, item_id: &str) -> Result<PathBuf> {
        let overlay = &self.item(item_id)?.overlay;
        Ok(match &self.dir {
            Some(dir) if overlay.is_relative() => dir.join(overlay),
            _ => overlay.clone(),
        })
    }

    fn is_judged(&self, item_id: &str) -> bool {
        self.verdicts
            .get(item_id)
            .is_some_and(|v| v.len() >= self.config.max_verdicts_per_item)
    }

    pub fn progress(&self) -> Progress {
        Progress {
            judged: self.items.iter().filter(|i| self.is_judged(&i.item_id)).count(),
            total: self.items.len(),
        }
    }

    /// Queue position of the first item still awaiting a verdict.
    pub fn cursor(&self) -> usize {
        self.items
            .iter()
            .position(|i| !self.is_judged(&i.item_id))
            .unwrap_or(self.items.len())
    }

    pub fn meta(&self) -> SessionMeta {
        let progress = self.progress();
        SessionMeta {
            id: self.config.id.clone(),
            ratio: self.config.ratio.clone(),
            attributes: self.attribute_names.clone(),
            progress,
            cursor: self.cursor(),
            complete: progress.judged == progress.total,
        }
    }

    pub fn payload(&self, item: &SessionItem) -> ItemPayload {
        ItemPayload {
            item_id: item.item_id.clone(),
            overlay_png_url: format!(
                "/sessions/{}/items/{}/overlay.png",
                self.config.id, item.item_id
            ),
            feature_checklist: self.checklist(),
            progress: self.progress(),
        }
    }

    /// The item at the cursor, or `None` when every item is judged.
    pub fn next_item(&self) -> Option<ItemPayload> {
        self.items.get(self.cursor()).map(|i| self.payload(i))
    }

    fn check(&self, entry: &VerdictEntry) -> Result<()> {
        self.item(&entry.item_id)?;
        let previous = self.verdicts.get(&entry.item_id).map(Vec::as_slice).unwrap_or(&[]);
        let repeat = previous
            .iter()
            .map(|&i| &self.log[i])
            .find(|e| e.annotator == entry.annotator);
        if let Some(existing) = repeat.or_else(|| {
            self.is_judged(&entry.item_id)
                .then(|| &self.log[*previous.last().expect("judged items have verdicts")])
        }) {
            return Err(Error::AlreadyJudged {
                item_id: entry.item_id.clone(),
                existing: Box::new(existing.clone()),
            });
        }
        match (entry.biased, &entry.attribute, &entry.feature) {
            (true, Some(attribute), Some(feature)) => {
                let known = self
                    .checklist
                    .iter()
                    .any(|s| &s.name == attribute && s.feature_list.contains(feature));
                if !known {
                    return Err(Error::UnknownFeature {
                        attribute: attribute.clone(),
                        feature: feature.clone(),
                    });
                }
            }
            (true, _, _) => {
                return Err(Error::InvalidVerdict(
                    "a biased verdict must name an attribute and a feature".into(),
                ))
            }
            (false, None, None) => {}
            (false, _, _) => {
                return Err(Error::InvalidVerdict(
                    "an unbiased verdict names no attribute or feature".into(),
                ))
            }
        }
        Ok(())
    }

    fn apply(&mut self, entry: VerdictEntry) {
        self.verdicts
            .entry(entry.item_id.clone())
            .or_default()
            .push(self.log.len());
        self.log.push(entry);
    }

    /// Validates and records a verdict, appending it to the log first when
    /// the session is persisted.
    pub fn submit_verdict(&mut self, item_id: &str, submission: VerdictSubmission) -> Result<Progress> {
        let entry = VerdictEntry {
            item_id: item_id.to_string(),
            biased: submission.biased,
            attribute: submission.attribute,
            feature: submission.feature,
            annotator: submission.annotator.unwrap_or_else(|| "annotator".into()),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        };
        self.check(&entry)?;
        if let Some(dir) = &self.dir {
            let path = dir.join(LOG_FILE);
            let mut f = OpenOptions::new()
                .append(true)
                .create(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&path, e))?;
            f.sync_data().map_err(|e| Error::io(&path, e))?;
        }
        self.apply(entry);
        Ok(self.progress())
    }

    /// Submits every item's automatic verdict under [`AUTO_ANNOTATOR`].
    /// Items the oracle could not judge stay unjudged.
    pub fn auto_judge(&mut self) -> Result<Progress> {
        let pending: Vec<(String, BiasVerdict)> = self
            .items
            .iter()
            .filter(|i| !self.is_judged(&i.item_id))
            .filter_map(|i| match &i.automatic {
                Some(Judgement::Judged { verdict }) => Some((i.item_id.clone(), verdict.clone())),
                _ => None,
            })
            .collect();
        for (item_id, v) in pending {
            for _ in 0..self.config.max_verdicts_per_item {
                self.submit_verdict(
                    &item_id,
                    VerdictSubmission {
                        biased: v.biased,
                        attribute: v.attribute.clone(),
                        feature: v.feature.clone(),
                        annotator: Some(AUTO_ANNOTATOR.into()),
                    },
                )
                .or_else(|e| match e {
                    // One oracle verdict fills one slot per item.
                    Error::AlreadyJudged { .. } => Ok(self.progress()),
                    e => Err(e),
                })?;
            }
        }
        Ok(self.progress())
    }

    /// Merged verdict of a judged item.
    pub fn item_verdict(&self, item_id: &str) -> Option<BiasVerdict> {
        if !self.is_judged(item_id) {
            return None;
        }
        let entries: Vec<&VerdictEntry> = self.verdicts[item_id].iter().map(|&i| &self.log[i]).collect();
        let biased: Vec<&&VerdictEntry> = entries.iter().filter(|e| e.biased).collect();
        if 2 * biased.len() <= entries.len() {
            return Some(BiasVerdict::unbiased(VerdictSource::Human));
        }
        // Most frequent (attribute, feature); earliest on ties.
        let mut tally: Vec<((String, String), usize)> = Vec::new();
        for e in &biased {
            let key = (
                e.attribute.clone().unwrap_or_default(),
                e.feature.clone().unwrap_or_default(),
            );
            match tally.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += 1,
                None => tally.push((key, 1)),
            }
        }
        let best = tally.iter().fold(&tally[0], |b, t| if t.1 > b.1 { t } else { b });
        Some(BiasVerdict::biased(&best.0 .0, &best.0 .1, VerdictSource::Human))
    }

    /// Ids of items still awaiting verdicts.
    pub fn unjudged(&self) -> Vec<String> {
        self.items
            .iter()
            .filter(|i| !self.is_judged(&i.item_id))
            .map(|i| i.item_id.clone())
            .collect()
    }

    /// Counts by true subgroup. Unjudged items are an error unless `partial`,
    /// in which case they are reported as unjudgeable.
    pub fn export_counts(&self, partial: bool) -> Result<BiasCountTable> {
        let unjudged = self.unjudged();
        if !partial && !unjudged.is_empty() {
            return Err(Error::Unjudged(unjudged));
        }
        let mut cells: BTreeMap<Subgroup, CountCell> = Subgroup::enumerate(self.attribute_indices.len())
            .into_iter()
            .map(|s| {
                let cell = CountCell {
                    class_label: s.class_label,
                    instances: s.instances.clone(),
                    n_examined: 0,
                    n_bias: 0,
                    n_incorrect_bias: 0,
                };
                (s, cell)
            })
            .collect();
        for item in &self.items {
            let Some(verdict) = self.item_verdict(&item.item_id) else {
                continue;
            };
            let cell = cells
                .get_mut(&tabulated(&item.truth, &self.attribute_indices)?)
                .expect("all subgroups enumerated");
            cell.n_examined += 1;
            if verdict.biased {
                cell.n_bias += 1;
                if !item.correct {
                    cell.n_incorrect_bias += 1;
                }
            }
        }
        BiasCountTable::new(
            &self.config.ratio,
            self.attribute_names.clone(),
            cells.into_values().collect(),
            unjudged.len(),
        )
    }

    /// Item-level agreement between this session's verdicts and automatic
    /// verdicts for the same samples.
    pub fn reconcile(&self, automatic: &[ExplanationRecord]) -> Result<AgreementStats> {
        let human: BTreeMap<String, bool> = self
            .items
            .iter()
            .filter_map(|i| self.item_verdict(&i.item_id).map(|v| (i.sample_id.clone(), v.biased)))
            .collect();
        let auto: BTreeMap<String, bool> = automatic
            .iter()
            .filter_map(|r| {
                r.verdict(VerdictSource::Automatic)
                    .map(|v| (r.sample_id.clone(), v.biased))
            })
            .collect();
        reconcile(&human, &auto)
    }
}

/// Agreement between human and automatic verdicts on commonly judged items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub n_both_judged: usize,
    pub agreement: f64,
    /// `confusion[auto_biased][human_biased]`, index 1 meaning biased.
    pub confusion: [[usize; 2]; 2],
}

/// Builds the 2×2 confusion over items present in both maps.
pub fn reconcile(human: &BTreeMap<String, bool>, automatic: &BTreeMap<String, bool>) -> Result<AgreementStats> {
    let mut confusion = [[0usize; 2]; 2];
    let mut n = 0;
    for (id, &h) in human {
        if let Some(&a) = automatic.get(id) {
            confusion[a as usize][h as usize] += 1;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Mismatch(
            "human and automatic verdicts share no items".into(),
        ));
    }
    Ok(AgreementStats {
        n_both_judged: n,
        agreement: (confusion[0][0] + confusion[1][1]) as f64 / n as f64,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Instance;
    use crate::gradcam::SaliencyMap;

    fn record(i: usize) -> ExplanationRecord {
        let class_label = (i / 2 % 2) as u8;
        let truth = Subgroup {
            class_label,
            instances: vec![Instance::BOTH[i % 2]],
        };
        let map = SaliencyMap {
            width: 1,
            height: 1,
            values: vec![1.0],
            target_class: 0,
            layer: "l".into(),
            all_zero: false,
        };
        ExplanationRecord::new(&format!("s{i:03}"), truth, (i % 3 == 0) as u8, map)
    }

    fn session(n: usize, budget: usize) -> AnnotationSession {
        let candidates = (0..n)
            .map(|i| Candidate {
                record: record(i),
                overlay: PathBuf::from(format!("s{i:03}.png")),
            })
            .collect();
        AnnotationSession::create(
            SessionConfig {
                id: "t".into(),
                ratio: "1:1".into(),
                budget_per_subgroup: budget,
                seed: 7,
                max_verdicts_per_item: 1,
            },
            vec![AttributeSpec::new("color", "red", "blue", &["disc"])],
            &[("color".into(), 0)],
            candidates,
        )
        .unwrap()
    }

    fn biased() -> VerdictSubmission {
        VerdictSubmission {
            biased: true,
            attribute: Some("color".into()),
            feature: Some("disc".into()),
            annotator: None,
        }
    }

    fn unbiased() -> VerdictSubmission {
        VerdictSubmission {
            biased: false,
            attribute: None,
            feature: None,
            annotator: None,
        }
    }

    #[test]
    fn queue_is_stratified_and_deterministic() {
        let s = session(40, 5);
        assert_eq!(s.items().len(), 20);
        let order: Vec<_> = s.items().iter().map(|i| i.sample_id.clone()).collect();
        assert_eq!(order, session(40, 5).items().iter().map(|i| i.sample_id.clone()).collect::<Vec<_>>());
        assert_eq!(s.items()[0].item_id, "item-0001");
    }

    #[test]
    fn empty_budget_exports_zero_counts() {
        let s = session(8, 0);
        let t = s.export_counts(false).unwrap();
        assert_eq!(t.totals(), (0, 0, 0));
        assert_eq!(t.cells.len(), 4);
    }

    #[test]
    fn insufficient_subgroup_is_named() {
        let candidates = (0..3).map(|i| Candidate { record: record(i), overlay: PathBuf::new() }).collect();
        let err = AnnotationSession::create(
            SessionConfig {
                id: "t".into(),
                ratio: "1:1".into(),
                budget_per_subgroup: 1,
                seed: 0,
                max_verdicts_per_item: 1,
            },
            vec![AttributeSpec::new("color", "red", "blue", &["disc"])],
            &[("color".into(), 0)],
            candidates,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InsufficientSamples { needed: 1, available: 0, .. }));
    }

    #[test]
    fn verdict_rules() {
        let mut s = session(8, 2);
        let first = s.next_item().unwrap().item_id;
        s.submit_verdict(&first, biased()).unwrap();
        let again = s.submit_verdict(&first, unbiased()).unwrap_err();
        match again {
            Error::AlreadyJudged { existing, .. } => assert!(existing.biased),
            e => panic!("unexpected {e}"),
        }
        let second = s.next_item().unwrap().item_id;
        assert_ne!(first, second);
        let bad = VerdictSubmission {
            feature: Some("hat".into()),
            ..biased()
        };
        assert!(matches!(s.submit_verdict(&second, bad), Err(Error::UnknownFeature { .. })));
        assert!(matches!(s.submit_verdict("item-9999", unbiased()), Err(Error::UnknownItem(_))));
        assert_eq!(s.item_verdict(&first).unwrap().feature.as_deref(), Some("disc"));
        assert!(matches!(s.export_counts(false), Err(Error::Unjudged(ids)) if ids.len() == 7));
        assert_eq!(s.export_counts(true).unwrap().unjudgeable, 7);
    }

    #[test]
    fn log_replay_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = session(12, 3);
        s.persist(dir.path()).unwrap();
        for (k, item) in s.items().to_vec().iter().enumerate().take(9) {
            let v = if k % 2 == 0 { biased() } else { unbiased() };
            s.submit_verdict(&item.item_id, v).unwrap();
        }
        let before = s.export_counts(true).unwrap();
        let reopened = AnnotationSession::open(dir.path()).unwrap();
        assert_eq!(reopened.export_counts(true).unwrap(), before);
        assert_eq!(reopened.log(), s.log());
        assert_eq!(reopened.meta(), s.meta());
        let mut again = session(12, 3);
        assert!(again.persist(dir.path()).is_err(), "descriptor is never overwritten");
    }

    #[test]
    fn majority_vote_with_several_annotators() {
        let mut s = session(4, 1);
        s.config.max_verdicts_per_item = 3;
        let id = s.items()[0].item_id.clone();
        let by = |who: &str, v: VerdictSubmission| VerdictSubmission {
            annotator: Some(who.into()),
            ..v
        };
        s.submit_verdict(&id, by("a", biased())).unwrap();
        assert!(s.item_verdict(&id).is_none());
        assert!(matches!(s.submit_verdict(&id, by("a", unbiased())), Err(Error::AlreadyJudged { .. })));
        s.submit_verdict(&id, by("b", unbiased())).unwrap();
        s.submit_verdict(&id, by("c", biased())).unwrap();
        assert!(s.item_verdict(&id).unwrap().biased);
        assert!(s.submit_verdict(&id, by("d", biased())).is_err());
    }

    #[test]
    fn agreement_counts() {
        let ids: Vec<String> = (0..10).map(|i| format!("x{i}")).collect();
        let human: BTreeMap<_, _> = ids.iter().map(|i| (i.clone(), true)).collect();
        assert_eq!(reconcile(&human, &human).unwrap().agreement, 1.0);
        let flipped: BTreeMap<_, _> = human.iter().map(|(k, v)| (k.clone(), !v)).collect();
        assert_eq!(reconcile(&human, &flipped).unwrap().agreement, 0.0);
        let mixed: BTreeMap<_, _> = ids.iter().enumerate().map(|(k, i)| (i.clone(), k < 7)).collect();
        let stats = reconcile(&human, &mixed).unwrap();
        assert!((stats.agreement - 0.7).abs() < 1e-12);
        assert_eq!(stats.confusion, [[0, 3], [0, 7]]);
        let other: BTreeMap<_, _> = [("y".to_string(), true)].into();
        assert!(reconcile(&human, &other).is_err());
    }
}
