use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::FeatureVector;
use crate::diffnet::Tensor;
use crate::error::{Error, Result};
use crate::models::batch_tensor;

/// Shuffled index batches of at most `size`; a trailing batch of one is merged
/// into its predecessor so batchnorm always sees two or more items.
pub(crate) fn shuffled_batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(size.max(2)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

/// Batches of about `size` items in which both classes appear, each class
/// spread evenly across batches.
pub(crate) fn stratified_batches(
    classes: &[usize],
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &c) in classes.iter().enumerate() {
        by_class
            .get_mut(c)
            .ok_or_else(|| Error::Usage(format!("class index {c} out of range")))?
            .push(i);
    }
    let fewest = by_class[0].len().min(by_class[1].len());
    if fewest == 0 {
        return Err(Error::Usage("both classes must be present".into()));
    }
    let n_batches = classes.len().div_ceil(size.max(2)).min(fewest);
    let mut batches = vec![Vec::new(); n_batches];
    for members in &mut by_class {
        members.shuffle(rng);
        for (k, &i) in members.iter().enumerate() {
            batches[k % n_batches].push(i);
        }
    }
    batches.shuffle(rng);
    Ok(batches)
}

pub(crate) fn gather(xs: &[FeatureVector], idx: &[usize]) -> Result<Tensor> {
    let picked: Vec<FeatureVector> = idx.iter().map(|&i| xs[i]).collect();
    batch_tensor(&picked)
}
