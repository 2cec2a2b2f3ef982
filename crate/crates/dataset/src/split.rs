use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coco::DatasetIndex;
use crate::error::DatasetError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub train: DatasetIndex,
    pub test: DatasetIndex,
    pub seed: u64,
}

/// Number of training images: `round(n * fraction)` with halves rounded up,
/// kept within `[1, n - 1]` so neither side is empty.
pub fn train_size(n: usize, fraction: f64) -> usize {
    let raw = (n as f64 * fraction + 0.5).floor() as usize;
    raw.clamp(1, n.saturating_sub(1).max(1))
}

/// Per-image split: a seeded shuffle of the sorted image ids, the first
/// `train_size` of which form the training set.
pub fn split_dataset(idx: &DatasetIndex, train_fraction: f64, seed: u64) -> Result<SplitResult, DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::BadFraction(train_fraction));
    }
    let n = idx.images.len();
    if n < 2 {
        return Err(DatasetError::TooFewImages(n));
    }
    idx.validate()?;
    let mut ids: Vec<u64> = idx.images.iter().map(|i| i.id).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let train_ids: HashSet<u64> = ids[..train_size(n, train_fraction)].iter().copied().collect();

    let part = |keep: bool| DatasetIndex {
        chip_id: idx.chip_id.clone(),
        images: idx
            .images
            .iter()
            .filter(|i| train_ids.contains(&i.id) == keep)
            .cloned()
            .collect(),
        annotations: idx
            .annotations
            .iter()
            .filter(|a| train_ids.contains(&a.image_id) == keep)
            .cloned()
            .collect(),
    };
    Ok(SplitResult {
        train: part(true),
        test: part(false),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coco::ImageEntry;

    fn index(n: u64) -> DatasetIndex {
        DatasetIndex {
            chip_id: None,
            images: (1..=n).map(|i| ImageEntry::new(i, format!("{i}.png"), 8, 8)).collect(),
            annotations: vec![],
        }
    }

    #[test]
    fn sizes() {
        assert_eq!(train_size(862, 0.8), 690);
        assert_eq!(train_size(10, 0.8), 8);
        assert_eq!(train_size(2, 0.99), 1);
        assert_eq!(train_size(2, 0.01), 1);
        let s = split_dataset(&index(10), 0.8, 3).unwrap();
        assert_eq!((s.train.images.len(), s.test.images.len()), (8, 2));
    }

    #[test]
    fn deterministic() {
        let a = split_dataset(&index(50), 0.8, 11).unwrap();
        let b = split_dataset(&index(50), 0.8, 11).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&index(50), 0.8, 12).unwrap();
        assert_ne!(a.train.images, c.train.images);
    }

    #[test]
    fn errors() {
        assert!(matches!(split_dataset(&index(1), 0.8, 0), Err(DatasetError::TooFewImages(1))));
        assert!(matches!(split_dataset(&index(5), 1.0, 0), Err(DatasetError::BadFraction(_))));
        assert!(matches!(split_dataset(&index(5), 0.0, 0), Err(DatasetError::BadFraction(_))));
    }
}
