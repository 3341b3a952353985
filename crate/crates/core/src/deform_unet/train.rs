//! Segmenter training: minibatch soft-Dice descent with a held-out split
//! and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{build, SegModel, UNetConfig, UNetError};
use crate::scalar::{real, Scalar};
use crate::tensor_nn::{dice_loss, Optimizer, OptimizerConfig, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SegTrainError {
    #[error("crop dataset is empty")]
    EmptyDataset,
    #[error("crop {index} is {got:?}, expected [1, {side}, {side}]")]
    BadCropShape { index: usize, side: usize, got: Vec<usize> },
    #[error(transparent)]
    UNet(#[from] UNetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One training example: a [1, side, side] image in [0,1] and its aligned
/// binary mask of the same shape.
#[derive(Clone, Debug)]
pub struct CropSample<S> {
    pub image: Tensor<S>,
    pub mask: Tensor<S>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Every k-th crop is held out for validation (k = round(1/fraction)).
    pub val_fraction: f64,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    pub optimizer: OptimizerConfig,
    /// Smoothing constant of the soft Dice loss.
    pub dice_smooth: f64,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            val_fraction: 0.2,
            patience: 5,
            optimizer: OptimizerConfig::default(),
            dice_smooth: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegEpochLog {
    pub epoch: usize,
    /// Mean soft Dice (negated loss) over the training crops this epoch.
    pub train_dice: f64,
    /// Mean soft Dice over the held-out crops.
    pub val_dice: f64,
    pub learning_rate: f64,
}

fn check_dataset<S: Scalar>(dataset: &[CropSample<S>], side: usize) -> Result<(), SegTrainError> {
    if dataset.is_empty() {
        return Err(SegTrainError::EmptyDataset);
    }
    for (i, c) in dataset.iter().enumerate() {
        if c.image.shape() != [1, side, side] || c.mask.shape() != [1, side, side] {
            return Err(SegTrainError::BadCropShape {
                index: i,
                side,
                got: c.image.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Deterministic split: every k-th crop goes to validation. With fewer than
/// two crops, or a fraction of zero, everything trains and validation
/// reuses the training crops.
fn split_indices(n: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let k = if val_fraction > 0.0 { (1.0 / val_fraction).round().max(2.0) as usize } else { 0 };
    if k == 0 || n < 2 * k {
        return ((0..n).collect(), (0..n).collect());
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for i in 0..n {
        if i % k == k - 1 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

/// Mean soft-Dice loss over a set of crops, plus (optionally) one gradient
/// accumulation pass. Per-sample dice, averaged.
fn epoch_pass<S: Scalar>(
    model: &mut SegModel<S>,
    dataset: &[CropSample<S>],
    indices: &[usize],
    batch_size: usize,
    smooth: S,
    opt: Option<&mut Optimizer<S>>,
) -> Result<f64, SegTrainError> {
    let side = model.config.input_side;
    let mut loss_sum = 0.0;
    let mut opt = opt;
    for chunk in indices.chunks(batch_size.max(1)) {
        let b = chunk.len();
        let mut x = Tensor::zeros(&[b, 1, side, side]);
        let mut t = Tensor::zeros(&[b, 1, side, side]);
        let plane = side * side;
        for (bi, &i) in chunk.iter().enumerate() {
            x.data_mut()[bi * plane..(bi + 1) * plane].copy_from_slice(dataset[i].image.data());
            t.data_mut()[bi * plane..(bi + 1) * plane].copy_from_slice(dataset[i].mask.data());
        }
        if let Some(opt) = opt.as_deref_mut() {
            let (out, cache) = model.forward_cached(&x)?;
            let mut grad = Tensor::zeros(out.shape());
            let inv_b = S::one() / S::from_usize(b).unwrap();
            for bi in 0..b {
                let pred = Tensor::from_vec(
                    &[plane],
                    out.data()[bi * plane..(bi + 1) * plane].to_vec(),
                )?;
                let target =
                    Tensor::from_vec(&[plane], t.data()[bi * plane..(bi + 1) * plane].to_vec())?;
                let (loss, g) = dice_loss(&pred, &target, smooth)?;
                loss_sum += loss.to_f64().unwrap();
                for (dst, &src) in
                    grad.data_mut()[bi * plane..(bi + 1) * plane].iter_mut().zip(g.data())
                {
                    *dst = src * inv_b;
                }
            }
            model.zero_grad();
            model.backward(&cache, &grad)?;
            opt.step(&mut model.params_mut());
        } else {
            let out = model.forward(&x)?;
            for bi in 0..b {
                let pred = Tensor::from_vec(
                    &[plane],
                    out.data()[bi * plane..(bi + 1) * plane].to_vec(),
                )?;
                let target =
                    Tensor::from_vec(&[plane], t.data()[bi * plane..(bi + 1) * plane].to_vec())?;
                let (loss, _) = dice_loss(&pred, &target, smooth)?;
                loss_sum += loss.to_f64().unwrap();
            }
        }
    }
    Ok(loss_sum / indices.len() as f64)
}

/// Train a segmenter on pre-resized crops. Keeps the weights of the best
/// validation epoch and stops early once validation Dice has not improved
/// for `patience` epochs.
pub fn train_segmenter<S: Scalar>(
    dataset: &[CropSample<S>],
    cfg: &UNetConfig,
    train_cfg: &SegTrainConfig,
) -> Result<(SegModel<S>, Vec<SegEpochLog>), SegTrainError> {
    check_dataset(dataset, cfg.input_side)?;
    let mut model = build::<S>(cfg)?;
    let mut opt = train_cfg.optimizer.build::<S>();
    let smooth = real::<S>(train_cfg.dice_smooth);
    let (train_idx, val_idx) = split_indices(dataset.len(), train_cfg.val_fraction);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed.wrapping_add(17));

    let mut logs = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_params: Option<Vec<Tensor<S>>> = None;
    let mut since_best = 0usize;

    for epoch in 0..train_cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut shuffle_rng);
        let train_loss =
            epoch_pass(&mut model, dataset, &order, train_cfg.batch_size, smooth, Some(&mut opt))?;
        let val_loss =
            epoch_pass(&mut model, dataset, &val_idx, train_cfg.batch_size, smooth, None)?;
        let val_dice = -val_loss;
        logs.push(SegEpochLog {
            epoch,
            train_dice: -train_loss,
            val_dice,
            learning_rate: opt.learning_rate().to_f64().unwrap(),
        });
        opt.end_epoch();

        if val_dice > best_val {
            best_val = val_dice;
            best_params = Some(model.params_mut().iter().map(|p| p.value.clone()).collect());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= train_cfg.patience {
                break;
            }
        }
    }

    if let Some(best) = best_params {
        for (p, v) in model.params_mut().into_iter().zip(best) {
            p.value = v;
        }
    }
    Ok((model, logs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_dataset(n: usize, side: usize) -> Vec<CropSample<f32>> {
        // Bright off-center square on a dark background.
        (0..n)
            .map(|i| {
                let mut img = Tensor::zeros(&[1, side, side]);
                let mut mask = Tensor::zeros(&[1, side, side]);
                let half = (side / 3) as i64;
                let cx = (side as i64 / 2 + (i as i64 % 5) - 2) as usize;
                let cy = (side as i64 / 2 + (i as i64 / 5 % 5) - 2) as usize;
                for y in 0..side {
                    for x in 0..side {
                        let inside = (x as i64 - cx as i64).abs() < half / 2
                            && (y as i64 - cy as i64).abs() < half / 2;
                        img.data_mut()[y * side + x] = if inside { 0.8 } else { 0.15 };
                        mask.data_mut()[y * side + x] = inside as u8 as f32;
                    }
                }
                CropSample { image: img, mask }
            })
            .collect()
    }

    fn tiny_cfg(deformable: bool, seed: u64) -> UNetConfig {
        UNetConfig { depth: 2, base_channels: 4, deformable_encoder: deformable, input_side: 16, seed }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (train, val) = split_indices(10, 0.2);
        assert_eq!(val, vec![4, 9]);
        assert_eq!(train.len(), 8);
        assert!(train.iter().all(|i| !val.contains(i)));
        // Tiny datasets fall back to validating on the training crops.
        let (train, val) = split_indices(3, 0.2);
        assert_eq!(train, val);
    }

    #[test]
    fn training_improves_soft_dice() {
        let dataset = blob_dataset(12, 16);
        let cfg = tiny_cfg(false, 3);
        let train_cfg = SegTrainConfig { epochs: 12, batch_size: 4, ..Default::default() };
        let (_, logs) = train_segmenter(&dataset, &cfg, &train_cfg).unwrap();
        assert!(logs.last().unwrap().train_dice > logs[0].train_dice);
    }

    #[test]
    fn identical_seeds_give_identical_checkpoints() {
        let dataset = blob_dataset(8, 16);
        let cfg = tiny_cfg(true, 5);
        let tc = SegTrainConfig { epochs: 3, ..Default::default() };
        let (m1, l1) = train_segmenter(&dataset, &cfg, &tc).unwrap();
        let (m2, l2) = train_segmenter(&dataset, &cfg, &tc).unwrap();
        assert_eq!(l1, l2);
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a"), dir.path().join("b"));
        m1.to_checkpoint().write_to(&p1).unwrap();
        m2.to_checkpoint().write_to(&p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn early_stopping_respects_epoch_budget() {
        let dataset = blob_dataset(10, 16);
        let cfg = tiny_cfg(false, 7);
        let tc = SegTrainConfig { epochs: 40, patience: 2, ..Default::default() };
        let (_, logs) = train_segmenter(&dataset, &cfg, &tc).unwrap();
        assert!(logs.len() <= 40);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let cfg = tiny_cfg(false, 0);
        match train_segmenter::<f32>(&[], &cfg, &SegTrainConfig::default()) {
            Err(SegTrainError::EmptyDataset) => {}
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("empty dataset should fail"),
        }
    }
}
