use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DatasetSource, ExperimentConfig, JudgingMode};
use super::store::{ResultsStore, Scope};
use super::tables::render_tables;
use crate::annotation::{AgreementStats, AnnotationSession, Candidate, SessionConfig, SESSION_FILE};
use crate::dataset::{
    compose_joint_split, compose_split, concept_images, generate_synthetic_dataset, import_dataset,
    AttributeSpec, ComposedSplit, CompositionSpec, DatasetManifest, Instance, Ratio,
};
use crate::error::{Error, Result};
use crate::gradcam::{
    auto_verdict, collect_counts, examination_sample, grad_cam, save_explanation, ExplanationRecord,
    VerdictSource,
};
use crate::metrics::{build_report, BiasCountTable, ConceptScoreCell, ConceptScoreTable, ReportParams};
use crate::nn::checkpoint::{load_extractor, load_model, save_extractor, save_model};
use crate::nn::{image_tensor, Extractor, Model};
use crate::seed::{derive_seed, sha256_hex};
use crate::tcav::{
    activations, class_gradients, fit_cav_runs, random_concept_runs, run_scores, significance_test, Cav,
    ConceptSet,
};
use crate::training::{
    evaluate_subgroups, pretrain_extractor, train_model, FeatureBank, PretrainReport, SubgroupAccuracyTable,
};

pub const DATASET_FILE: &str = "dataset.json";
pub const EXTRACTOR_FILE: &str = "extractor.ckpt";
pub const PRETRAIN_FILE: &str = "pretrain.json";
pub const CONCEPTS_FILE: &str = "cavs.json";
pub const SPLIT_FILE: &str = "split.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TRAINING_FILE: &str = "training.json";
pub const ACCURACY_FILE: &str = "accuracy.json";
pub const EXPLANATIONS_DIR: &str = "explanations";
pub const RECORDS_FILE: &str = "records.json";
pub const SESSION_DIR: &str = "session";
pub const COUNTS_FILE: &str = "counts.json";
pub const AGREEMENT_FILE: &str = "agreement.json";
pub const TCAV_FILE: &str = "tcav.json";
pub const METRICS_FILE: &str = "metrics.json";

/// Per-ratio stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Split,
    Train,
    Evaluate,
    Explain,
    Judge,
    Tcav,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Split,
        Stage::Train,
        Stage::Evaluate,
        Stage::Explain,
        Stage::Judge,
        Stage::Tcav,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Explain => "explain",
            Stage::Judge => "judge",
            Stage::Tcav => "tcav",
            Stage::Report => "report",
        }
    }

    /// Artifact whose presence marks the stage complete.
    fn marker(self) -> &'static str {
        match self {
            Stage::Split => SPLIT_FILE,
            Stage::Train => TRAINING_FILE,
            Stage::Evaluate => ACCURACY_FILE,
            Stage::Explain => RECORDS_FILE,
            Stage::Judge => COUNTS_FILE,
            Stage::Tcav => TCAV_FILE,
            Stage::Report => METRICS_FILE,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Dataset facts every rendered table needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub source: DatasetSource,
    pub class_names: [String; 2],
    pub attributes: Vec<AttributeSpec>,
    pub audited: Vec<String>,
    pub samples: usize,
    /// Subgroup label → sample count.
    pub subgroups: BTreeMap<String, usize>,
    /// Hash over ids, labels and pixels; a resumed run must see the same data.
    pub content_hash: String,
}

impl DatasetSummary {
    pub fn cell_label(&self, class_label: u8, instances: &[Instance]) -> String {
        let mut parts = vec![self.class_names[class_label as usize].clone()];
        for (name, inst) in self.audited.iter().zip(instances) {
            let spec = self.attributes.iter().find(|a| &a.name == name);
            parts.push(spec.map_or_else(|| inst.to_string(), |s| s.instance_label(*inst).to_string()));
        }
        parts.join("/")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeCavs {
    pub attribute: String,
    /// One CAV per run for each instance's concept.
    pub a: Vec<Cav>,
    pub b: Vec<Cav>,
}

/// CAVs learned once on the frozen extractor and shared by every model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptBank {
    pub layer: String,
    pub attributes: Vec<AttributeCavs>,
    pub random: Vec<Cav>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub extractor_checksum: String,
    pub head_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub ratio: String,
    pub stage: Stage,
    pub error: String,
}

/// What a run or resume achieved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub root: PathBuf,
    /// Ratios with a metrics report.
    pub completed: Vec<String>,
    /// Ratios waiting for human verdicts (or stopped early on request).
    pub pending: Vec<String>,
    pub failures: Vec<StageFailure>,
}

impl RunSummary {
    pub fn success(&self) -> bool {
        self.failures.is_empty()
    }
}

enum RatioOutcome {
    Complete,
    Pending,
    Failed(StageFailure),
}

/// Shared, read-only state for the ratio pipelines.
struct Context<'a> {
    store: &'a ResultsStore,
    config: &'a ExperimentConfig,
    manifest: DatasetManifest,
    audited: Vec<usize>,
    audited_names: Vec<String>,
    extractor: Extractor,
    gradcam_layer: String,
    bank: Option<FeatureBank>,
    concepts: Option<ConceptBank>,
}

fn global_seed(config: &ExperimentConfig, stage: &str) -> u64 {
    derive_seed(config.experiment.seed, "global", stage)
}

fn ratio_seed(config: &ExperimentConfig, ratio: &Ratio, stage: &str) -> u64 {
    derive_seed(config.experiment.seed, ratio.label(), stage)
}

/// Creates a store and runs every stage for every ratio.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(ResultsStore, RunSummary)> {
    config.validate()?;
    let store = ResultsStore::create(config)?;
    let summary = execute(&store, None)?;
    Ok((store, summary))
}

/// Reopens a store and runs whatever is missing, up to and including
/// `until` when given. A supplied config must match the stored one.
pub fn resume_experiment(
    root: &Path,
    config: Option<&ExperimentConfig>,
    until: Option<Stage>,
) -> Result<(ResultsStore, RunSummary)> {
    let store = ResultsStore::open(root)?;
    if let Some(c) = config {
        store.check_config(c)?;
    }
    let summary = execute(&store, until)?;
    Ok((store, summary))
}

fn wanted(until: Option<Stage>) -> Vec<Stage> {
    Stage::ALL
        .into_iter()
        .filter(|s| until.is_none_or(|u| *s <= u))
        .collect()
}

fn missing(store: &ResultsStore, config: &ExperimentConfig, ratio: &Ratio, until: Option<Stage>) -> Vec<Stage> {
    wanted(until)
        .into_iter()
        .filter(|s| !(*s == Stage::Tcav && !config.tcav.enabled))
        .filter(|s| !store.exists(Scope::Ratio(ratio.label()), s.marker()))
        .collect()
}

fn execute(store: &ResultsStore, until: Option<Stage>) -> Result<RunSummary> {
    let config = store.config();
    let todo: Vec<(Ratio, Vec<Stage>)> = config
        .experiment
        .ratios
        .iter()
        .map(|r| (r.clone(), missing(store, config, r, until)))
        .collect();
    let mut summary = RunSummary {
        root: store.root().to_path_buf(),
        completed: Vec::new(),
        pending: Vec::new(),
        failures: Vec::new(),
    };
    if todo.iter().all(|(_, m)| m.is_empty()) {
        for (ratio, _) in &todo {
            classify(store, ratio, &mut summary);
        }
        render_tables(store)?;
        return Ok(summary);
    }

    let ctx = prepare(store, &todo)?;
    let run_one = |(ratio, stages): &(Ratio, Vec<Stage>)| -> RatioOutcome {
        if stages.is_empty() {
            return if store.exists(Scope::Ratio(ratio.label()), METRICS_FILE) {
                RatioOutcome::Complete
            } else {
                RatioOutcome::Pending
            };
        }
        run_ratio(&ctx, ratio, stages)
    };
    let outcomes: Vec<RatioOutcome> = if config.experiment.parallel {
        todo.par_iter().map(run_one).collect()
    } else {
        todo.iter().map(run_one).collect()
    };
    for ((ratio, _), outcome) in todo.iter().zip(outcomes) {
        match outcome {
            RatioOutcome::Complete => summary.completed.push(ratio.label().to_string()),
            RatioOutcome::Pending => summary.pending.push(ratio.label().to_string()),
            RatioOutcome::Failed(f) => summary.failures.push(f),
        }
    }
    render_tables(store)?;
    Ok(summary)
}

fn classify(store: &ResultsStore, ratio: &Ratio, summary: &mut RunSummary) {
    if store.exists(Scope::Ratio(ratio.label()), METRICS_FILE) {
        summary.completed.push(ratio.label().to_string());
    } else {
        summary.pending.push(ratio.label().to_string());
    }
}

fn load_dataset(config: &ExperimentConfig) -> Result<DatasetManifest> {
    match config.dataset.source {
        DatasetSource::Synthetic => {
            let mut synthetic = config.dataset.synthetic.clone();
            synthetic.seed = global_seed(config, "dataset");
            generate_synthetic_dataset(&synthetic)
        }
        DatasetSource::Import => {
            let root = config.dataset.root.as_ref().expect("validated");
            let manifest = config.dataset.manifest.as_ref().expect("validated");
            import_dataset(root, &root.join(manifest))
        }
    }
}

fn content_hash(manifest: &DatasetManifest) -> String {
    let mut bytes = Vec::new();
    for s in &manifest.samples {
        bytes.extend(s.id.as_bytes());
        bytes.push(s.class_label);
        bytes.extend(s.attributes.iter().map(|i| i.index() as u8));
        bytes.extend(s.image.as_raw());
        for (feature, mask) in &s.masks {
            bytes.extend(feature.as_bytes());
            bytes.extend(mask.bits().iter().map(|b| *b as u8));
        }
    }
    sha256_hex(&bytes)
}

fn audited_attributes(config: &ExperimentConfig, manifest: &DatasetManifest) -> Result<Vec<usize>> {
    if manifest.attributes.is_empty() {
        return Err(Error::Config("the dataset declares no attributes".into()));
    }
    if config.dataset.audited.is_empty() {
        return Ok(vec![0]);
    }
    let mut idx = Vec::new();
    for name in &config.dataset.audited {
        let i = manifest.attribute_index(name)?;
        if idx.contains(&i) {
            return Err(Error::Config(format!("attribute {name} audited twice")));
        }
        idx.push(i);
    }
    Ok(idx)
}

/// Loads or builds the shared artifacts the pending ratio stages need.
fn prepare<'a>(store: &'a ResultsStore, todo: &[(Ratio, Vec<Stage>)]) -> Result<Context<'a>> {
    let config = store.config();
    let needs = |s: Stage| todo.iter().any(|(_, m)| m.contains(&s));

    let manifest = load_dataset(config)?;
    let audited = audited_attributes(config, &manifest)?;
    let audited_names: Vec<String> = audited.iter().map(|&i| manifest.attributes[i].name.clone()).collect();
    let summary = DatasetSummary {
        source: config.dataset.source,
        class_names: manifest.class_names.clone(),
        attributes: manifest.attributes.clone(),
        audited: audited_names.clone(),
        samples: manifest.samples.len(),
        subgroups: manifest
            .subgroup_counts()
            .iter()
            .map(|(s, n)| (manifest.subgroup_label(s), *n))
            .collect(),
        content_hash: content_hash(&manifest),
    };
    if store.exists(Scope::Global, DATASET_FILE) {
        let stored: DatasetSummary = store.read_json(Scope::Global, DATASET_FILE)?;
        if stored != summary {
            return Err(Error::Mismatch(format!(
                "dataset differs from the one recorded in {}",
                store.path(Scope::Global, DATASET_FILE).display()
            )));
        }
    } else {
        let p = store.write_json(Scope::Global, DATASET_FILE, &summary)?;
        store.record(Scope::Global, "dataset", Some(global_seed(config, "dataset")), Ok(&[p]))?;
    }

    let extractor = if store.exists(Scope::Global, EXTRACTOR_FILE) {
        let extractor = load_extractor(&store.path(Scope::Global, EXTRACTOR_FILE))?;
        let report: PretrainReport = store.read_json(Scope::Global, PRETRAIN_FILE)?;
        if report.checksum != extractor.checksum() {
            return Err(Error::Checkpoint("stored extractor does not match its pretraining report".into()));
        }
        extractor
    } else {
        let seed = global_seed(config, "pretrain");
        let sample = &manifest.samples[0].image;
        let (extractor, report) =
            pretrain_extractor(&config.extractor, &config.pretrain, sample.width(), sample.height(), seed)?;
        let p1 = store.path(Scope::Global, EXTRACTOR_FILE);
        std::fs::create_dir_all(store.scope_dir(Scope::Global))
            .map_err(|e| Error::io(store.scope_dir(Scope::Global), e))?;
        let staging = store.path(Scope::Global, ".extractor.ckpt.partial");
        save_extractor(&extractor, &staging)?;
        std::fs::hard_link(&staging, &p1).map_err(|e| Error::io(&p1, e))?;
        std::fs::remove_file(&staging).map_err(|e| Error::io(&staging, e))?;
        let p2 = store.write_json(Scope::Global, PRETRAIN_FILE, &report)?;
        store.record(Scope::Global, "pretrain", Some(seed), Ok(&[p1, p2]))?;
        extractor
    };
    let gradcam_layer = config
        .gradcam
        .layer
        .clone()
        .unwrap_or_else(|| extractor.last_layer().to_string());

    let bank = if needs(Stage::Train) || needs(Stage::Evaluate) {
        Some(FeatureBank::build(&extractor, &manifest, manifest.samples.iter().map(|s| &s.id))?)
    } else {
        None
    };

    let concepts = if config.tcav.enabled && needs(Stage::Tcav) {
        Some(if store.exists(Scope::Global, CONCEPTS_FILE) {
            store.read_json(Scope::Global, CONCEPTS_FILE)?
        } else {
            let bank = learn_concepts(config, &manifest, &audited, &extractor)?;
            let p = store.write_json(Scope::Global, CONCEPTS_FILE, &bank)?;
            store.record(Scope::Global, "concepts", Some(global_seed(config, "concepts")), Ok(&[p]))?;
            bank
        })
    } else {
        None
    };

    Ok(Context {
        store,
        config,
        manifest,
        audited,
        audited_names,
        extractor,
        gradcam_layer,
        bank,
        concepts,
    })
}

/// Concept examples per audited attribute. Synthetic datasets render them:
/// each instance's concept takes the other instance plus marker-less images
/// as negatives. Imported datasets read them from the configured folders.
fn concept_sets(
    config: &ExperimentConfig,
    manifest: &DatasetManifest,
    audited: &[usize],
) -> Result<Vec<(String, ConceptSet, ConceptSet)>> {
    let mut out = Vec::new();
    for &a in audited {
        let spec = &manifest.attributes[a];
        let (ca, cb) = match config.dataset.source {
            DatasetSource::Synthetic => {
                let n = config.tcav.examples_per_concept;
                let mut synthetic = config.dataset.synthetic.clone();
                synthetic.seed = global_seed(config, "dataset");
                let seed = |what: &str| derive_seed(config.experiment.seed, &spec.name, what);
                let render = |inst: Option<Instance>, what: &str| -> Result<Vec<Array3<f64>>> {
                    Ok(concept_images(&synthetic, a, inst, n, seed(what))?
                        .iter()
                        .map(image_tensor)
                        .collect())
                };
                let pa = render(Some(Instance::A), "concept-a")?;
                let pb = render(Some(Instance::B), "concept-b")?;
                let none = render(None, "concept-none")?;
                let half = n / 2;
                let na: Vec<_> = pb[..half].iter().chain(&none[..n - half]).cloned().collect();
                let nb: Vec<_> = pa[..half].iter().chain(&none[half..]).cloned().collect();
                let note = "rendered: negatives are the other instance plus images without this attribute";
                (
                    ConceptSet::new(&format!("{}={}", spec.name, spec.instances[0]), pa, na)?.with_notes(note),
                    ConceptSet::new(&format!("{}={}", spec.name, spec.instances[1]), pb, nb)?.with_notes(note),
                )
            }
            DatasetSource::Import => {
                let dirs = config.tcav.concepts.get(&spec.name).ok_or_else(|| {
                    Error::Config(format!("tcav.concepts.{} is required for imported datasets", spec.name))
                })?;
                let base = config.dataset.root.as_deref().unwrap_or(Path::new("."));
                (ConceptSet::load(&base.join(&dirs.a))?, ConceptSet::load(&base.join(&dirs.b))?)
            }
        };
        out.push((spec.name.clone(), ca, cb));
    }
    Ok(out)
}

fn learn_concepts(
    config: &ExperimentConfig,
    manifest: &DatasetManifest,
    audited: &[usize],
    extractor: &Extractor,
) -> Result<ConceptBank> {
    let layer = config
        .tcav
        .layer
        .clone()
        .unwrap_or_else(|| extractor.last_layer().to_string());
    let seed = global_seed(config, "concepts");
    let mut attributes = Vec::new();
    let mut universe = Vec::new();
    let mut sizes = Vec::new();
    for (name, ca, cb) in concept_sets(config, manifest, audited)? {
        let mut side = |set: &ConceptSet| -> Result<Vec<Cav>> {
            let pos = activations(extractor, &layer, &set.positives)?;
            let neg = activations(extractor, &layer, &set.negatives)?;
            let cavs = fit_cav_runs(&set.name, &layer, &pos, &neg, config.tcav.runs, seed)?;
            sizes.push((pos.len(), neg.len()));
            universe.extend(pos);
            universe.extend(neg);
            Ok(cavs)
        };
        let a = side(&ca)?;
        let b = side(&cb)?;
        attributes.push(AttributeCavs { attribute: name, a, b });
    }
    // Random concepts match the smallest real concept's cardinalities.
    let (n_pos, n_neg) = sizes.iter().copied().min().unwrap_or((2, 2));
    let random = random_concept_runs(
        &universe,
        n_pos,
        n_neg,
        &layer,
        config.tcav.random_runs,
        global_seed(config, "random-concepts"),
    )?;
    Ok(ConceptBank {
        layer,
        attributes,
        random,
    })
}

/// Artifacts of one ratio as they become available.
#[derive(Default)]
struct RatioState {
    split: Option<ComposedSplit>,
    model: Option<Model>,
    accuracy: Option<SubgroupAccuracyTable>,
    records: Option<Vec<ExplanationRecord>>,
    counts: Option<BiasCountTable>,
    tcav: Option<Vec<ConceptScoreTable>>,
}

fn run_ratio(ctx: &Context, ratio: &Ratio, stages: &[Stage]) -> RatioOutcome {
    let mut state = RatioState::default();
    let mut pending = false;
    for &stage in stages {
        if stage == Stage::Report && pending {
            break;
        }
        let seed = ratio_seed(ctx.config, ratio, stage.name());
        match run_stage(ctx, ratio, stage, &mut state) {
            Ok(StageResult::Done(paths)) => {
                if let Err(e) = ctx.store.record(Scope::Ratio(ratio.label()), stage.name(), Some(seed), Ok(&paths)) {
                    return failed(ratio, stage, e);
                }
            }
            Ok(StageResult::Waiting) => pending = true,
            Err(e) => {
                let _ = ctx.store.record(Scope::Ratio(ratio.label()), stage.name(), Some(seed), Err(&e));
                return failed(ratio, stage, e);
            }
        }
    }
    if ctx.store.exists(Scope::Ratio(ratio.label()), METRICS_FILE) {
        RatioOutcome::Complete
    } else {
        RatioOutcome::Pending
    }
}

fn failed(ratio: &Ratio, stage: Stage, e: Error) -> RatioOutcome {
    log::error!("ratio {ratio}: stage {stage} failed: {e}");
    RatioOutcome::Failed(StageFailure {
        ratio: ratio.label().to_string(),
        stage,
        error: e.to_string(),
    })
}

enum StageResult {
    Done(Vec<PathBuf>),
    /// Waiting on outside input (human verdicts).
    Waiting,
}

impl RatioState {
    fn split(&mut self, ctx: &Context, ratio: &Ratio) -> Result<&ComposedSplit> {
        if self.split.is_none() {
            self.split = Some(ctx.store.read_json(Scope::Ratio(ratio.label()), SPLIT_FILE)?);
        }
        Ok(self.split.as_ref().expect("just loaded"))
    }

    fn model(&mut self, ctx: &Context, ratio: &Ratio) -> Result<&Model> {
        if self.model.is_none() {
            let model = load_model(&ctx.store.path(Scope::Ratio(ratio.label()), MODEL_FILE))?;
            if model.extractor_checksum() != ctx.extractor.checksum() {
                return Err(Error::Checkpoint(format!(
                    "model for {ratio} was trained on a different extractor"
                )));
            }
            self.model = Some(model);
        }
        Ok(self.model.as_ref().expect("just loaded"))
    }

    fn accuracy(&mut self, ctx: &Context, ratio: &Ratio) -> Result<&SubgroupAccuracyTable> {
        if self.accuracy.is_none() {
            self.accuracy = Some(ctx.store.read_json(Scope::Ratio(ratio.label()), ACCURACY_FILE)?);
        }
        Ok(self.accuracy.as_ref().expect("just loaded"))
    }

    fn records(&mut self, ctx: &Context, ratio: &Ratio) -> Result<&[ExplanationRecord]> {
        if self.records.is_none() {
            self.records = Some(ctx.store.read_json(Scope::Ratio(ratio.label()), RECORDS_FILE)?);
        }
        Ok(self.records.as_deref().expect("just loaded"))
    }
}

fn run_stage(ctx: &Context, ratio: &Ratio, stage: Stage, state: &mut RatioState) -> Result<StageResult> {
    let config = ctx.config;
    let scope = Scope::Ratio(ratio.label());
    let store = ctx.store;
    let seed = ratio_seed(config, ratio, stage.name());
    log::info!("ratio {ratio}: {stage}");
    match stage {
        Stage::Split => {
            // One split seed for every ratio keeps the test set shared.
            let split_seed = global_seed(config, "split");
            let compositions: Vec<CompositionSpec> = ctx
                .audited_names
                .iter()
                .map(|a| CompositionSpec::new(a, ratio.clone()))
                .collect();
            let split = if compositions.len() == 1 {
                compose_split(
                    &ctx.manifest,
                    &compositions[0],
                    config.dataset.class_train_size,
                    config.dataset.test_fraction,
                    split_seed,
                )?
            } else {
                compose_joint_split(
                    &ctx.manifest,
                    &compositions,
                    config.dataset.class_train_size,
                    config.dataset.test_fraction,
                    split_seed,
                )?
            };
            let p = store.write_json(scope, SPLIT_FILE, &split)?;
            state.split = Some(split);
            Ok(StageResult::Done(vec![p]))
        }
        Stage::Train => {
            let bank = ctx.bank.as_ref().expect("feature bank built for training");
            let train_ids = state.split(ctx, ratio)?.train.clone();
            let trained = train_model(&ctx.extractor, bank, &ctx.manifest, &train_ids, &config.training, seed)?;
            let model_path = store.path(scope, MODEL_FILE);
            let staging = store.path(scope, ".model.ckpt.partial");
            save_model(&trained.model, &staging)?;
            std::fs::hard_link(&staging, &model_path).map_err(|e| Error::io(&model_path, e))?;
            std::fs::remove_file(&staging).map_err(|e| Error::io(&staging, e))?;
            let summary = TrainingSummary {
                final_loss: trained.final_loss,
                train_accuracy: trained.train_accuracy,
                extractor_checksum: trained.model.extractor_checksum(),
                head_checksum: trained.model.head_checksum(),
            };
            let p = store.write_json(scope, TRAINING_FILE, &summary)?;
            state.model = Some(trained.model);
            Ok(StageResult::Done(vec![model_path, p]))
        }
        Stage::Evaluate => {
            let bank = ctx.bank.as_ref().expect("feature bank built for evaluation");
            let test = state.split(ctx, ratio)?.test.clone();
            let names: Vec<&str> = ctx.audited_names.iter().map(String::as_str).collect();
            let ratios = vec![ratio.clone(); names.len()];
            let model = state.model(ctx, ratio)?;
            let table = evaluate_subgroups(model, bank, &ctx.manifest, &test, &names, &ratios, ratio.label())?;
            let p = store.write_json(scope, ACCURACY_FILE, &table)?;
            state.accuracy = Some(table);
            Ok(StageResult::Done(vec![p]))
        }
        Stage::Explain => {
            let test = state.split(ctx, ratio)?.test.clone();
            let ids = examination_sample(
                &ctx.manifest,
                &test,
                &ctx.audited,
                config.gradcam.budget_per_subgroup,
                seed,
            )?;
            let specs: Vec<AttributeSpec> =
                ctx.audited.iter().map(|&i| ctx.manifest.attributes[i].clone()).collect();
            let params = serde_json::json!({
                "tau": config.gradcam.tau,
                "mass_quantile": config.gradcam.mass_quantile,
                "layer": ctx.gradcam_layer,
            });
            let staging = store.path(scope, ".explanations.partial");
            if staging.exists() {
                std::fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
            }
            let leftover = store.path(scope, EXPLANATIONS_DIR);
            if leftover.exists() {
                // Published by an interrupted attempt before its records were.
                std::fs::remove_dir_all(&leftover).map_err(|e| Error::io(&leftover, e))?;
            }
            std::fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
            let model = state.model(ctx, ratio)?;
            let mut records = Vec::with_capacity(ids.len());
            for id in &ids {
                let sample = ctx.manifest.sample(id).expect("examined ids come from the manifest");
                let x = image_tensor(&sample.image);
                let predicted = model.predict(&x);
                let saliency = grad_cam(model, &x, predicted, &ctx.gradcam_layer)?;
                let judgement = auto_verdict(
                    &saliency,
                    &sample.masks,
                    &specs,
                    config.gradcam.tau,
                    config.gradcam.mass_quantile,
                )?;
                let mut record = ExplanationRecord::new(id, sample.subgroup(), predicted, saliency);
                record.set_automatic(judgement)?;
                save_explanation(&staging, &record, &sample.image, &params)?;
                record.saliency = None;
                records.push(record);
            }
            let dir = store.publish_dir(scope, &staging, EXPLANATIONS_DIR)?;
            let p = store.write_json(scope, RECORDS_FILE, &records)?;
            state.records = Some(records);
            Ok(StageResult::Done(vec![dir, p]))
        }
        Stage::Judge => match config.experiment.judging {
            JudgingMode::Auto => {
                let records = state.records(ctx, ratio)?;
                let counts = collect_counts(
                    records,
                    VerdictSource::Automatic,
                    ratio.label(),
                    &ctx.audited_names,
                    &ctx.audited,
                )?;
                let p = store.write_json(scope, COUNTS_FILE, &counts)?;
                state.counts = Some(counts);
                Ok(StageResult::Done(vec![p]))
            }
            JudgingMode::Human => judge_by_humans(ctx, ratio, state),
        },
        Stage::Tcav => {
            let concepts = ctx.concepts.as_ref().expect("concepts learned for TCAV");
            let test = state.split(ctx, ratio)?.test.clone();
            let model = state.model(ctx, ratio)?;
            let mut tables: Vec<ConceptScoreTable> = concepts
                .attributes
                .iter()
                .map(|a| ConceptScoreTable {
                    ratio: ratio.label().to_string(),
                    attribute: a.attribute.clone(),
                    cells: Vec::new(),
                })
                .collect();
            for class_label in 0..2u8 {
                let images: Vec<Array3<f64>> = test
                    .iter()
                    .filter_map(|id| ctx.manifest.sample(id))
                    .filter(|s| s.class_label == class_label)
                    .map(|s| image_tensor(&s.image))
                    .collect();
                let grads = class_gradients(model, &concepts.layer, &images, class_label)?;
                let random = run_scores(&grads, &concepts.random)?;
                for (table, cavs) in tables.iter_mut().zip(&concepts.attributes) {
                    for (instance, runs) in [(Instance::A, &cavs.a), (Instance::B, &cavs.b)] {
                        let scores = run_scores(&grads, runs)?;
                        let sig = significance_test(&scores, &random, config.tcav.alpha)?;
                        table.cells.push(ConceptScoreCell {
                            class_label,
                            instance,
                            score: scores.iter().sum::<f64>() / scores.len() as f64,
                            run_scores: scores,
                            p_value: Some(sig.p_value),
                            significant: Some(sig.significant),
                        });
                    }
                }
            }
            let p = store.write_json(scope, TCAV_FILE, &tables)?;
            state.tcav = Some(tables);
            Ok(StageResult::Done(vec![p]))
        }
        Stage::Report => {
            let counts: BiasCountTable = match state.counts.take() {
                Some(c) => c,
                None => store.read_json(scope, COUNTS_FILE)?,
            };
            let tcav: Vec<ConceptScoreTable> = match state.tcav.take() {
                Some(t) => t,
                None if config.tcav.enabled => store.read_json(scope, TCAV_FILE)?,
                None => Vec::new(),
            };
            let params = ReportParams {
                tau: config.gradcam.tau,
                mass_quantile: config.gradcam.mass_quantile,
                budget_per_subgroup: config.gradcam.budget_per_subgroup,
                judging: config.experiment.judging.as_str().to_string(),
                alpha: config.tcav.alpha,
                tcav_runs: if config.tcav.enabled { config.tcav.runs } else { 0 },
                tolerances: config.tolerances.clone(),
            };
            let acc = state.accuracy(ctx, ratio)?;
            let report = build_report(acc, Some(&counts), &tcav, &params)?;
            let p = store.write_json(scope, METRICS_FILE, &report)?;
            Ok(StageResult::Done(vec![p]))
        }
    }
}

/// Opens (creating on first use) the ratio's annotation session; exports
/// counts once every item is judged.
fn judge_by_humans(ctx: &Context, ratio: &Ratio, state: &mut RatioState) -> Result<StageResult> {
    let config = ctx.config;
    let scope = Scope::Ratio(ratio.label());
    let dir = ctx.store.path(scope, SESSION_DIR);
    let session = if dir.join(SESSION_FILE).exists() {
        AnnotationSession::open(&dir)?
    } else {
        let records = state.records(ctx, ratio)?.to_vec();
        let candidates = records
            .into_iter()
            .map(|record| Candidate {
                overlay: Path::new("..")
                    .join(EXPLANATIONS_DIR)
                    .join(format!("{}_overlay.png", record.sample_id)),
                record,
            })
            .collect();
        let session_config = SessionConfig {
            id: session_id(ratio),
            ratio: ratio.label().to_string(),
            budget_per_subgroup: config.gradcam.budget_per_subgroup,
            seed: ratio_seed(config, ratio, "annotation"),
            max_verdicts_per_item: config.annotation.max_verdicts_per_item,
        };
        let checklist = ctx.audited.iter().map(|&i| ctx.manifest.attributes[i].clone()).collect();
        // Records carry the full truth; tabulate the audited attributes.
        let attributes: Vec<(String, usize)> = ctx
            .audited_names
            .iter()
            .cloned()
            .zip(ctx.audited.iter().copied())
            .collect();
        let mut session = AnnotationSession::create(session_config, checklist, &attributes, candidates)?;
        session.persist(&dir)?;
        ctx.store
            .record(scope, "session", Some(ratio_seed(config, ratio, "annotation")), Ok(&[dir.clone()]))?;
        session
    };
    if !session.unjudged().is_empty() {
        log::info!(
            "ratio {ratio}: annotation session {} awaits {} verdict(s)",
            session.id(),
            session.unjudged().len()
        );
        return Ok(StageResult::Waiting);
    }
    let counts = session.export_counts(false)?;
    let records = state.records(ctx, ratio)?;
    let mut paths = Vec::new();
    // Agreement needs items the oracle could judge too; without any, skip it.
    match session.reconcile(records) {
        Ok(agreement) => paths.push(ctx.store.write_json::<AgreementStats>(scope, AGREEMENT_FILE, &agreement)?),
        Err(e) => log::warn!("ratio {ratio}: no human/automatic agreement computed: {e}"),
    }
    paths.push(ctx.store.write_json(scope, COUNTS_FILE, &counts)?);
    state.counts = Some(counts);
    Ok(StageResult::Done(paths))
}

/// Annotation session id of a ratio (`ratio-3-1`).
pub fn session_id(ratio: &Ratio) -> String {
    format!("ratio-{}", ratio.slug())
}

/// Session directories present in a store, in config ratio order.
pub fn session_dirs(store: &ResultsStore) -> Vec<PathBuf> {
    store
        .config()
        .experiment
        .ratios
        .iter()
        .map(|r| store.path(Scope::Ratio(r.label()), SESSION_DIR))
        .filter(|d| d.join(SESSION_FILE).exists())
        .collect()
}
