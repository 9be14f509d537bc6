use anyhow::Result;
use clap::Args;
use mitosis_core::synthetic::{write_dataset, SyntheticConfig};

use crate::config::{resolve, RunManifest};
use crate::CommonArgs;

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub n_images: Option<usize>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
}

pub fn run(args: &SynthArgs) -> Result<()> {
    let mut cfg = resolve(&SyntheticConfig::default(), args.common.config.as_deref())?;
    if let Some(s) = args.common.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.n_images {
        cfg.n_images = n;
    }
    if let Some(w) = args.width {
        cfg.width = w;
    }
    if let Some(h) = args.height {
        cfg.height = h;
    }
    let set = write_dataset(&args.common.out, &cfg)?;
    log::info!("wrote {} images with {} annotations to {}", set.images.len(), set.annotations.len(), args.common.out.display());
    RunManifest::new("synth", cfg.seed, &cfg)?.write(&args.common.out)
}
