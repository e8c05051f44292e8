//! Benchmarking, ground truth and tuning for `mvann` indexes, plus the
//! `mvann` command-line tool.

pub mod bench;
pub mod cli;
pub mod report;
pub mod truth;
pub mod tune;

pub use bench::{cmd_bench, BenchOptions};
pub use report::{BenchReport, BenchRow, Mode};
pub use truth::{cmd_oracle, GroundTruth};
pub use tune::{cmd_tune, TuneOutcome, TuneRow, TuneSpec};
