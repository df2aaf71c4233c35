use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset, Result, Vocabulary};

/// Splits whole conversations into a training and a development part.
///
/// The development part holds `round(dev_fraction · n)` conversations chosen
/// uniformly by `seed`; both parts keep the original conversation order. The
/// training vocabulary is rebuilt from the training conversations and shared
/// with the development part.
pub fn split_dataset(data: &Dataset, dev_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(DataError::Dataset(format!(
            "dev fraction {dev_fraction} must lie strictly between 0 and 1"
        )));
    }
    let n = data.conversations.len();
    let n_dev = (dev_fraction * n as f64).round() as usize;
    if n_dev == 0 || n_dev == n {
        return Err(DataError::Dataset(format!(
            "dev fraction {dev_fraction} of {n} conversations leaves an empty split"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_dev = vec![false; n];
    for &i in &order[..n_dev] {
        is_dev[i] = true;
    }
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for (c, dev_flag) in data.conversations.iter().zip(is_dev) {
        if dev_flag {
            dev.push(c.clone());
        } else {
            train.push(c.clone());
        }
    }
    let vocabulary = Vocabulary::from_conversations(&train);
    Ok((
        Dataset {
            conversations: train,
            emotions: data.emotions.clone(),
            vocabulary: vocabulary.clone(),
        },
        Dataset {
            conversations: dev,
            emotions: data.emotions.clone(),
            vocabulary,
        },
    ))
}
