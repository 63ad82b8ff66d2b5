//! Configuration, datasets, experiment drivers and report emission.

pub mod bench;
pub mod config;
pub mod datasets;
pub mod latency;
pub mod output;
pub mod sweep;
pub mod verbs;

pub use bench::{run_defense_bench, BenchRow, RunReport, SweepCell, BENCH_ROWS};
pub use datasets::{load_dataset, load_partitions, partition, DatasetSpec, Partitions, DATASETS};
pub use config::{ArchConfig, AttackSection, DefenseSection, ExperimentConfig, LatencySection, OutputSection, Scale, SweepSection, SCHEMA_VERSION};
pub use latency::{measure_latency, median_server_time, run_latency_bench, LatencyReport, LatencyRow};
pub use sweep::run_split_sweep;
pub use verbs::{build_report, run_attack_verb, run_train, TrainSummary};
