//! Panel statistics relating weekly predictors to survey outcomes.

pub mod analysis;
pub mod fdr;
pub mod gee;
pub mod louo;
pub mod mundlak;
pub mod survey;
pub mod verdict;
pub mod weekly;

pub use analysis::{
    analyze_panel, build_panel, weekly_means, write_grid_csv, write_results_csv, AnalysisOptions, AnalysisResults,
    ExcludedSurvey, PairResult, Panel, PersonWeek,
};
pub use fdr::bh_fdr;
pub use gee::{fit_gee, fit_gee_design, GeeFit, GeeOptions, WorkingCorrelation};
pub use louo::{louo_resample, LouoSummary};
pub use mundlak::{mundlak_decompose, MundlakPredictor};
pub use survey::{backfill_items, read_surveys_csv, score_surveys, write_surveys_csv, Outcome, Outcomes, RawSurvey};
pub use verdict::{ablation_metrics, classify, verdict_threshold_sweep, SignConsistency, Verdict, VerdictThresholds};
