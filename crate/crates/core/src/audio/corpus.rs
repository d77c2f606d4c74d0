//! Corpus manifests and epoch planning.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seed_rng;

/// One (clip, target) pair per training position, in presentation order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    /// (clip index, target sample index) pairs, unique within the epoch.
    pub pairs: Vec<(usize, usize)>,
    pub seed: u64,
}

/// Sample `n_positions` training positions uniformly, without replacement,
/// over every sample that admits a full context window. Deterministic for a
/// given seed.
pub fn plan_epoch(
    clip_lens: &[usize],
    n_positions: usize,
    context_len: usize,
    seed: u64,
) -> Result<EpochPlan> {
    // Eligible targets per clip: indices in [context_len, len).
    let counts: Vec<usize> =
        clip_lens.iter().map(|&len| len.saturating_sub(context_len)).collect();
    let total: usize = counts.iter().sum();
    if n_positions > total {
        return Err(Error::Data(format!(
            "requested {n_positions} positions but only {total} admit a full {context_len}-sample context"
        )));
    }
    // Partial Fisher-Yates over the virtual range [0, total) with sparse swaps.
    let mut rng = seed_rng(seed);
    let mut swapped: HashMap<usize, usize> = HashMap::new();
    let mut flat = Vec::with_capacity(n_positions);
    for i in 0..n_positions {
        let j = rng.random_range(i..total);
        let vi = swapped.get(&i).copied().unwrap_or(i);
        let vj = swapped.get(&j).copied().unwrap_or(j);
        flat.push(vj);
        swapped.insert(j, vi);
    }
    // Map flat indices back to (clip, target).
    let mut starts = Vec::with_capacity(counts.len());
    let mut acc = 0usize;
    for &c in &counts {
        starts.push(acc);
        acc += c;
    }
    let pairs = flat
        .into_iter()
        .map(|f| {
            let clip = match starts.binary_search(&f) {
                Ok(i) => {
                    // land exactly on a start: find the first non-empty clip at or after i
                    let mut i = i;
                    while counts[i] == 0 {
                        i += 1;
                    }
                    i
                }
                Err(i) => i - 1,
            };
            (clip, context_len + (f - starts[clip]))
        })
        .collect();
    Ok(EpochPlan { pairs, seed })
}

/// Read a corpus manifest: one audio-file path per line, blank lines
/// skipped. Relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect())
}
