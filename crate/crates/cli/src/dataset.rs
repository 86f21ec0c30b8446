use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use umyops::datapipe::{read_slice, SliceRecord};
use umyops::{Error, Result};

use crate::manifest::MANIFEST_FILE;

pub const SAMPLES_DIR: &str = "samples";
pub const PREDICTIONS_DIR: &str = "predictions";

/// Sorted `(id, stem)` pairs of the slice containers under `dir`, looking in
/// `dir/samples`, then `dir/predictions`, then `dir` itself.
pub fn list(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let root = [SAMPLES_DIR, PREDICTIONS_DIR]
        .iter()
        .map(|s| dir.join(s))
        .find(|p| p.is_dir())
        .unwrap_or_else(|| dir.to_path_buf());
    let mut out = Vec::new();
    for entry in fs::read_dir(&root)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") && path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            out.push((id, path.with_extension("")));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Config(format!("no samples found in {}", root.display())));
    }
    Ok(out)
}

pub fn load(dir: &Path, jobs: usize) -> Result<Vec<(String, SliceRecord)>> {
    let stems = list(dir)?;
    let records = par_map(&stems, jobs, |(_, stem)| read_slice(stem))?;
    Ok(stems.into_iter().map(|(id, _)| id).zip(records).collect())
}

/// Order-preserving map over at most `jobs` worker threads.
pub fn par_map<T: Sync, U: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<U>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("worker panicked") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("worker panicked").expect("every slot filled")).collect()
}
