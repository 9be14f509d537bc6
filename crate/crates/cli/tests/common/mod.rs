#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use clap::Parser;
use mitosis_cli::{run, Cli};
use mitosis_core::synthetic::{write_dataset, SyntheticConfig};

/// Run a command in-process.
pub fn cli(args: &[&str]) -> anyhow::Result<()> {
    let mut argv = vec!["mitosis"];
    argv.extend_from_slice(args);
    run(Cli::try_parse_from(argv)?)
}

/// Run the built binary and return its exit code.
pub fn binary(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_mitosis"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
        .status
        .code()
        .expect("exit code")
}

/// Small synthetic dataset under `dir`; returns the annotation file path.
pub fn synth(dir: &Path, n_images: usize, side: u32, seed: u64) -> PathBuf {
    let cfg = SyntheticConfig { n_images, width: side, height: side, seed, ..Default::default() };
    write_dataset(dir, &cfg).expect("synthetic dataset");
    dir.join("annotations.json")
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}
