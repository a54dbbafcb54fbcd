pub mod ablate;
pub mod federate;
pub mod ingest;
pub mod report;
pub mod train;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use fedstack::dataset::{discover_subjects, load_subjects, SubjectRecording};

use crate::config::RunConfig;

/// A run whose transcript failed the privacy audit.
#[derive(Debug, thiserror::Error)]
#[error("privacy audit failed: {0}")]
pub struct AuditFailed(pub String);

/// Measured results fell outside tolerance under `report --strict`.
#[derive(Debug, thiserror::Error)]
#[error("acceptance failed: {0}")]
pub struct AcceptanceFailed(pub String);

pub fn data_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.data_dir.clone().context("no data directory: pass --data-dir or set FEDSTACK_DATA_DIR")?;
    if !dir.is_dir() {
        bail!("data directory {} does not exist", dir.display());
    }
    Ok(dir)
}

/// Clients plus the held-out subject, ascending.
pub fn run_subjects(cfg: &RunConfig) -> Vec<u32> {
    let mut ids = cfg.clients.clone();
    ids.push(cfg.held_out);
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Loads the labeled rows of `ids` from the data directory.
pub fn load(cfg: &RunConfig, ids: &[u32]) -> Result<Vec<SubjectRecording>> {
    let dir = data_dir(cfg)?;
    let found = discover_subjects(&dir)?;
    let missing: Vec<u32> = ids.iter().copied().filter(|id| !found.contains(id)).collect();
    if !missing.is_empty() {
        bail!("{} has no logs for subjects {missing:?}", dir.display());
    }
    Ok(load_subjects(&dir, ids)?)
}

/// Runs `work` over `items` on up to `jobs` threads; results come back in
/// item order whatever order they finish in.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, work: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = work(item);
                slots.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("threads joined").into_iter().map(|r| r.expect("every slot filled")).collect()
}
