pub mod crossval;
pub mod evaluate;
pub mod infer;
pub mod prepare;
pub mod synth;
pub mod train;

use std::path::Path;

use anyhow::{Context, Result};
use mitosis_core::dataset::{parse_annotations, read_patch_index, AnnotationSet, PatchSample};

use crate::config::RunManifest;

/// Parse an annotation file, naming it in any error.
pub(crate) fn read_annotations(path: &Path, manifest: &mut RunManifest) -> Result<AnnotationSet> {
    let set = parse_annotations(path).with_context(|| format!("annotation file {}", path.display()))?;
    manifest.add_input(path)?;
    Ok(set)
}

/// Patches listed in a prepared index file; files resolve against `root`.
pub(crate) fn read_patches(root: &Path, index: &Path, manifest: &mut RunManifest) -> Result<Vec<PatchSample>> {
    let idx = read_patch_index(index).with_context(|| format!("patch index {}", index.display()))?;
    manifest.add_input(index)?;
    for e in &idx.patches {
        manifest.add_input(&root.join(&e.file))?;
    }
    idx.load(root).with_context(|| format!("loading patches listed in {}", index.display()))
}
