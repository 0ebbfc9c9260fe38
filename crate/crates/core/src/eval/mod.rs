//! Policy rollouts, return metrics, and report files.

mod report;
mod rollout;

pub use report::{
    bar_plot, curve_path, emit_report, line_plot, write_summary, Curve, LabelledResult, CURVE_DIR,
    SUMMARY_FILE, TABLE_FILE, TABLE_PLOT,
};
pub use rollout::{
    evaluate_policy, evaluate_policy_with, mean_std, normalized_reward, relative_improvement,
    EvalConfig, EvalResult, StepTrace,
};
