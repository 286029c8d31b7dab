// SPDX-License-Identifier: MIT OR Apache-2.0

//! Staged runs with hashed, manifest-tracked artifacts.

mod config;
mod eval;
mod manifest;
mod stages;

pub use config::{EditStage, EvalStage, HeadStage, Mechanism, ModelSource, NeuronStage, RunConfig};
pub use eval::{
    bench_overhead, build_eval_set, evaluate_plan, evaluate_setting, run_generations,
    score_generations, transfer_eval, vector_plan, BenchReport, EvalReport, EvalSet,
    RelativeChanges, ReportProvenance, RunMetrics, SettingEval, Shot, Timing, TransferPair,
    TransferReport,
};
pub use manifest::{sha256_file, ArtifactManifest, ArtifactRef, StageRecord};
pub use stages::{run_pipeline, RpnArtifact, Stage, SummaryRow};
