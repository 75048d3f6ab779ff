//! Orchestration of the whole audit from one configuration file: dataset,
//! one model per composition ratio, explanations, verdicts, metrics and
//! the summary tables.

mod config;
mod run;
mod store;
mod tables;

pub use config::{
    AnnotationSection, ConceptDirs, DatasetSection, DatasetSource, ExperimentConfig, ExperimentSection,
    GradcamSection, JudgingMode, TcavSection,
};
pub use run::{
    resume_experiment, run_experiment, session_dirs, session_id, AttributeCavs, ConceptBank, DatasetSummary,
    RunSummary, Stage, StageFailure, TrainingSummary, ACCURACY_FILE, AGREEMENT_FILE, CONCEPTS_FILE,
    COUNTS_FILE, DATASET_FILE, EXPLANATIONS_DIR, EXTRACTOR_FILE, METRICS_FILE, MODEL_FILE, PRETRAIN_FILE,
    RECORDS_FILE, SESSION_DIR, SPLIT_FILE, TCAV_FILE, TRAINING_FILE,
};
pub use store::{
    ProvenanceEntry, ResultsStore, Scope, StageStatus, CONFIG_FILE, PROVENANCE_FILE, REPORTS_DIR, STORE_FILE,
};
pub use tables::{build_tables, load_artifacts, render_tables, RatioArtifacts, RenderedTables};
