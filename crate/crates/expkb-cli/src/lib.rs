//! Operational surface for the experience knowledge base: HTTP service,
//! command-line interface, configuration, and HTTP model adapters.

pub mod adapters;
pub mod config;
pub mod query;
pub mod service;

use std::path::Path;

use anyhow::Context;
use expkb::store::KnowledgeBase;

/// Loads a knowledge base, refusing files with any bad record.
pub fn load_kb_strict(path: &Path) -> anyhow::Result<KnowledgeBase> {
    let file = std::fs::File::open(path)
        .with_context(|| format!("opening knowledge base {}", path.display()))?;
    let (kb, report) = KnowledgeBase::load_from(file)
        .with_context(|| format!("reading knowledge base {}", path.display()))?;
    if let Some(first) = report.line_errors.first() {
        anyhow::bail!(
            "knowledge base {} is corrupt; first bad record at line {}: {}",
            path.display(),
            first.line,
            first.message
        );
    }
    Ok(kb)
}

/// Loads the knowledge base at `path`, or starts an empty one if the file
/// does not exist yet.
pub fn open_or_new_kb(path: &Path) -> anyhow::Result<KnowledgeBase> {
    if path.exists() {
        load_kb_strict(path)
    } else {
        Ok(KnowledgeBase::new())
    }
}

/// Persists the base atomically: full write to a sibling temp file, then
/// rename over the target.
pub fn persist_kb_atomic(path: &Path, kb: &KnowledgeBase) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    let tmp = path.with_extension("jsonl.tmp");
    let mut file = std::fs::File::create(&tmp)
        .with_context(|| format!("creating {}", tmp.display()))?;
    kb.persist_to(&mut file)
        .with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("replacing {}", path.display()))?;
    Ok(())
}
