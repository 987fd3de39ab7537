//! Synthetic-corpus generation, hyperparameter sweeps, scenario execution,
//! and report emission.

pub mod report;
pub mod scenario;
pub mod synth;

pub use report::{emit_report, render_csv, render_markdown, ReportFormat};
pub use scenario::{
    build_shared_vocab, mean_model_perplexity, run_dir_name, sweep, AttackSpec, DatastoreSel,
    EncoderSel, ExperimentPlan, Lab, LabSpec, SanitizeKind, ScenarioConfig, ScenarioError,
    ScenarioReport, SweepOutcome, SweepPoint,
};
pub use synth::{synth_corpus, synth_pii_pool, GroundTruth, SynthError, SynthSpec, TemplateSet};
