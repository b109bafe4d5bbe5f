//! Diagnostics: activation order statistics, attention sinks, the
//! component ablation, and search/tuning cost.

pub mod ablation;
pub mod cost;
pub mod outliers;
pub mod plot;
pub mod sinks;

pub use ablation::{ablation_run, AblationReport, AblationRow, ARMS};
pub use cost::{cost_report, CostReport};
pub use outliers::{order_stats, outlier_stats, LayerOutliers, LayerSelection, OrderStats, OutlierReport};
pub use sinks::{attention_map, max_row_sum_error, sink_report, sink_stats, HeadSink, SinkReport};
