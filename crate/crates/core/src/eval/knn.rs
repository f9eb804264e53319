use rayon::prelude::*;

use crate::data::FeatureVector;
use crate::error::{Error, Result};

fn dist2(a: &FeatureVector, b: &FeatureVector) -> f64 {
    a.0.iter().zip(&b.0).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Icing score per test point: the fraction of icing labels among its `k`
/// nearest training points (Euclidean). Equal distances favour the earlier
/// training record.
pub fn knn_baseline(
    train: &[FeatureVector],
    train_icing: &[bool],
    test: &[FeatureVector],
    k: usize,
) -> Result<Vec<f64>> {
    if train.len() != train_icing.len() {
        return Err(Error::Usage(format!(
            "{} training points for {} labels",
            train.len(),
            train_icing.len()
        )));
    }
    if k == 0 || k > train.len() {
        return Err(Error::Usage(format!(
            "k = {k} with {} training points",
            train.len()
        )));
    }
    Ok(test
        .par_iter()
        .map(|q| {
            // (distance, index) pairs, kept sorted; k is small
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
            for (i, t) in train.iter().enumerate() {
                let d = dist2(q, t);
                if best.len() == k && d >= best[k - 1].0 {
                    continue;
                }
                let pos = best.partition_point(|&(bd, _)| bd <= d);
                best.insert(pos, (d, i));
                best.truncate(k);
            }
            best.iter().filter(|&&(_, i)| train_icing[i]).count() as f64 / k as f64
        })
        .collect())
}
