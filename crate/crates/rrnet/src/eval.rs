//! Directory-level evaluation of saliency maps against ground-truth masks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rrnet_core::metrics::{aggregate, evaluate, MetricConfig, MetricReport};

use crate::pnm::{self, PnmError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("unpaired files: {}", .0.join(", "))]
    Unpaired(Vec<String>),
    #[error("no .pgm files to evaluate in {0}")]
    Empty(String),
    #[error(transparent)]
    Image(#[from] PnmError),
    #[error("{name}: {source}")]
    Metric { name: String, source: rrnet_core::Error },
    #[error("thread pool: {0}")]
    Pool(String),
}

fn pgm_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>, EvalError> {
    let io = |source| EvalError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
            if let Some(name) = path.file_name() {
                out.insert(name.to_string_lossy().into_owned(), path);
            }
        }
    }
    Ok(out)
}

/// Pair files by name across the two directories.
pub fn pair_files(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>, EvalError> {
    let preds = pgm_files(pred_dir)?;
    let gts = pgm_files(gt_dir)?;
    let mut unpaired: Vec<String> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .map(|k| pred_dir.join(k).display().to_string())
        .collect();
    unpaired.extend(
        gts.keys()
            .filter(|k| !preds.contains_key(*k))
            .map(|k| gt_dir.join(k).display().to_string()),
    );
    if !unpaired.is_empty() {
        return Err(EvalError::Unpaired(unpaired));
    }
    if preds.is_empty() {
        return Err(EvalError::Empty(pred_dir.display().to_string()));
    }
    Ok(preds
        .into_iter()
        .map(|(name, p)| {
            let g = gts[&name].clone();
            (name, p, g)
        })
        .collect())
}

/// Evaluate every pair, at most `threads` at a time (0 = rayon default).
/// Rows are ordered by file name whatever the scheduling.
pub fn evaluate_dirs(
    pred_dir: &Path,
    gt_dir: &Path,
    cfg: &MetricConfig,
    threads: usize,
) -> Result<(Vec<String>, MetricReport), EvalError> {
    let pairs = pair_files(pred_dir, gt_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let rows = pool.install(|| {
        pairs
            .par_iter()
            .map(|(name, p, g)| {
                let pred = pnm::read_map(p)?;
                let gt = pnm::read_mask(g)?;
                evaluate(&pred, &gt, cfg).map_err(|source| EvalError::Metric {
                    name: name.clone(),
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let names = pairs.into_iter().map(|(n, _, _)| n).collect();
    Ok((names, aggregate(rows, cfg.beta2)))
}
