use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded subset of `round(fraction * n)` indices out of `0..n`, returned in
/// ascending order. With `labels`, quotas are allocated per class
/// (largest-remainder rounding) so class proportions are kept.
pub fn subset_labels(n: usize, labels: Option<&[usize]>, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction must be in (0, 1], got {fraction}")));
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::InvalidArgument(format!("{} labels for {n} records", l.len())));
        }
    }
    let target = (fraction * n as f64).round() as usize;
    if target == 0 {
        return Err(Error::InvalidArgument(format!("fraction {fraction} of {n} records selects nothing")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        groups.entry(labels.map_or(0, |l| l[i])).or_default().push(i);
    }
    let mut quotas: Vec<(usize, usize, f64)> = groups
        .iter()
        .map(|(&c, members)| {
            let exact = fraction * members.len() as f64;
            (c, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut assigned: usize = quotas.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if assigned >= target {
            break;
        }
        if quotas[k].1 < groups[&quotas[k].0].len() {
            quotas[k].1 += 1;
            assigned += 1;
        }
    }

    let mut out = Vec::with_capacity(target);
    for (class, quota, _) in quotas {
        let mut members = groups[&class].clone();
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..quota]);
    }
    out.sort_unstable();
    Ok(out)
}
