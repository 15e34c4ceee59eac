#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use futures::StreamExt;
use thor_core::backend::MockGenerator;
use thor_core::trace_io::{TraceHeader, TraceWriter};
use thor_core::{
    run_batch, Backend, ChainConfig, ChainTrace, Dataset, DecodingParams, Mode, VotingConfig,
};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn golden(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(format!("{name}.txt"));
    std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("missing golden {}: {e}", path.display()))
}

pub fn synthetic_dataset() -> Dataset {
    thor_core::load_dataset(&fixture("synthetic20.jsonl")).expect("synthetic dataset loads")
}

pub fn synthetic_script() -> String {
    std::fs::read_to_string(fixture("synthetic20_mock.jsonl")).expect("mock script readable")
}

/// k = 3 with a two-vote majority, as the synthetic script is written for.
pub fn k3_config() -> ChainConfig {
    ChainConfig {
        voting: VotingConfig::with_k(3).unwrap(),
        decoding: DecodingParams::default(),
    }
}

pub fn mock_backend(script: &str, max_in_flight: usize) -> Backend {
    Backend::new(
        Arc::new(MockGenerator::parse(script).unwrap()),
        max_in_flight,
    )
}

pub async fn run_mock(
    script: &str,
    dataset: &Dataset,
    mode: Mode,
    config: &ChainConfig,
    parallelism: usize,
) -> Vec<ChainTrace> {
    let backend = mock_backend(script, 8);
    run_batch(dataset, &backend, mode, config, parallelism)
        .expect("valid batch settings")
        .collect()
        .await
}

/// Serializes a run exactly as a trace file on disk would hold it.
pub fn trace_bytes(mode: Mode, config: &ChainConfig, traces: &[ChainTrace]) -> Vec<u8> {
    let header = TraceHeader::new(mode, "mock", config.clone());
    let mut writer = TraceWriter::new(Vec::new(), &header).unwrap();
    for t in traces {
        writer.write(t).unwrap();
    }
    writer.finish().unwrap()
}
