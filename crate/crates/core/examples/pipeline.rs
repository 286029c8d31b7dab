// SPDX-License-Identifier: MIT OR Apache-2.0

//! A complete staged run on a planted model in a temporary directory.

use mtlab::corpus::CorpusConfig;
use mtlab::pipeline::{run_pipeline, RunConfig, Stage};

fn main() -> mtlab::error::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.corpus = CorpusConfig::default().scaled(40);
    cfg.eval.n_cases = 10;
    cfg.eval.max_new_tokens = 40;
    let dir =
        tempfile::tempdir().map_err(|e| mtlab::error::Error::InvalidArgument(e.to_string()))?;
    let stages = Stage::default_sequence(&cfg);
    let m = run_pipeline(&cfg, &stages, dir.path(), false)?;
    for (stage, rec) in &m.stages {
        println!(
            "{stage}: {:?}",
            rec.outputs
                .iter()
                .map(|a| a.path.as_str())
                .collect::<Vec<_>>()
        );
    }
    print!(
        "{}",
        std::fs::read_to_string(dir.path().join("report/summary.csv")).unwrap()
    );
    Ok(())
}
