#![allow(dead_code)]

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use lobbench::config::ExperimentConfig;
use lobbench::synth::{generate, SynthConfig};

pub fn write_synth(dir: &Path, name: &str, cfg: &SynthConfig) -> PathBuf {
    let path = dir.join(name);
    generate(cfg, BufWriter::new(File::create(&path).unwrap())).unwrap();
    path
}

/// Config from `input`, `output` and `key=value` overrides.
pub fn config(input: &Path, output: &Path, overrides: &[(&str, &str)]) -> ExperimentConfig {
    let mut pairs = vec![
        ("input".to_string(), input.display().to_string()),
        ("output".to_string(), output.display().to_string()),
    ];
    pairs.extend(overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    ExperimentConfig::from_pairs(pairs).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}
