//! Classification diagnostics, the warm-up timing protocol and
//! cross-device speed-up reports.

pub mod confusion;
pub mod report;
pub mod timing;

pub use confusion::ConfusionMatrix;
pub use report::{emit_report, format_sig2, radar_normalize, speedup, Basis, BenchReport, ReportFormat, SpeedupEntry};
pub use timing::{host_device_name, timed_run, DeviceRunRecord, Workload};
