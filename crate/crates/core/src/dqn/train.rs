//! Localization training and evaluation loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{select_action, train_step, DqnConfig, QNetwork, ReplayMemory, Transition};
use crate::env::{self, EnvConfig, EnvError};
use crate::geometry::{modified_iou, recall, ActionKind, MaskSlice, Window};
use crate::scalar::Scalar;
use crate::synthdata::SliceImage;
use crate::tensor_nn::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One row of the training convergence log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocEpochLog {
    pub epoch: usize,
    pub epsilon: f64,
    pub mean_reward: f64,
    pub mean_iou: f64,
    pub mean_recall: f64,
    pub trigger_rate: f64,
}

/// Per-slice record of one greedy evaluation rollout.
#[derive(Clone, Debug)]
pub struct LocRecord {
    pub slice_index: usize,
    pub final_window: Window,
    pub steps: usize,
    pub actions: Vec<ActionKind>,
    pub iou: f64,
    /// `None` when the slice has no foreground (recall undefined).
    pub recall: Option<f64>,
}

/// Recall/IoU statistics over slices with nonempty ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocSummary {
    pub slices: usize,
    pub mean_recall: f64,
    pub std_recall: f64,
    pub min_recall: f64,
    pub max_recall: f64,
    pub mean_iou: f64,
    pub trigger_rate: f64,
    pub mean_steps: f64,
}

#[derive(Clone, Debug)]
pub struct LocEvaluation {
    pub records: Vec<LocRecord>,
    pub summary: LocSummary,
}

/// Deterministic rotating subsample: epoch `e` takes `cap` slices starting
/// at `e*cap mod n`, so every slice is revisited across epochs.
fn epoch_slice_indices(n: usize, cap: Option<usize>, epoch: usize) -> Vec<usize> {
    match cap {
        None => (0..n).collect(),
        Some(cap) if cap >= n => (0..n).collect(),
        Some(cap) => {
            let start = (epoch * cap) % n;
            (0..cap).map(|i| (start + i) % n).collect()
        }
    }
}

/// Train one view-specific agent.
///
/// Every epoch runs one epsilon-greedy episode per (sub)sampled slice,
/// pushing each transition into replay and taking one minibatch update per
/// action once the replay holds a full batch.
pub fn train_localizer<S: Scalar>(
    dataset: &[(SliceImage, MaskSlice)],
    env_cfg: &EnvConfig,
    cfg: &DqnConfig,
) -> Result<(QNetwork<S>, Vec<LocEpochLog>), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut net = QNetwork::<S>::new(env_cfg.state_len(), &cfg.hidden, cfg.seed);
    let mut replay = ReplayMemory::<S>::new(cfg.replay_capacity, cfg.seed.wrapping_add(2));
    let mut action_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = cfg.optimizer.build::<S>();
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let epsilon = cfg.epsilon.value(epoch);
        let indices = epoch_slice_indices(dataset.len(), cfg.slices_per_epoch, epoch);
        let mut reward_sum = 0.0;
        let mut iou_sum = 0.0;
        let mut recall_sum = 0.0;
        let mut triggers = 0usize;

        for &si in &indices {
            let (slice, mask) = &dataset[si];
            let mut state = env::reset::<S>(slice, mask, env_cfg)?;
            let mut state_vec = state.state_vec();
            let mut episode_reward = 0.0;
            loop {
                let q = net.q_values(&state_vec);
                let action = select_action(&q, epsilon, &mut action_rng);
                let out = env::step(&state, action, slice, mask, env_cfg)?;
                let next_vec = out.next_state.state_vec();
                episode_reward += out.reward.to_f64().unwrap();
                replay.push(Transition {
                    state: std::mem::take(&mut state_vec),
                    action,
                    reward: out.reward,
                    next_state: next_vec.clone(),
                    terminal: out.done,
                });
                if replay.len() >= cfg.batch_size {
                    let idx = replay.sample_indices(cfg.batch_size);
                    let batch: Vec<&Transition<S>> = idx.iter().map(|&i| replay.get(i)).collect();
                    train_step(&mut net, &batch, cfg.gamma, &mut opt)?;
                }
                if out.done {
                    if action == ActionKind::Trigger {
                        triggers += 1;
                    }
                    iou_sum += out.info.0;
                    recall_sum += out.info.1;
                    break;
                }
                state = out.next_state;
                state_vec = next_vec;
            }
            reward_sum += episode_reward;
        }

        opt.end_epoch();
        let n = indices.len() as f64;
        logs.push(LocEpochLog {
            epoch,
            epsilon,
            mean_reward: reward_sum / n,
            mean_iou: iou_sum / n,
            mean_recall: recall_sum / n,
            trigger_rate: triggers as f64 / n,
        });
    }
    Ok((net, logs))
}

fn summarize(records: &[LocRecord]) -> LocSummary {
    let recalls: Vec<f64> = records.iter().filter_map(|r| r.recall).collect();
    let iou_scored: Vec<f64> =
        records.iter().filter(|r| r.recall.is_some()).map(|r| r.iou).collect();
    let n = recalls.len();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let mean_recall = mean(&recalls);
    let var = if n == 0 {
        0.0
    } else {
        recalls.iter().map(|r| (r - mean_recall).powi(2)).sum::<f64>() / n as f64
    };
    let triggers = records.iter().filter(|r| r.actions.last() == Some(&ActionKind::Trigger)).count();
    LocSummary {
        slices: n,
        mean_recall,
        std_recall: var.sqrt(),
        min_recall: recalls.iter().copied().fold(f64::INFINITY, f64::min).min(f64::INFINITY),
        max_recall: recalls.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(f64::NEG_INFINITY),
        mean_iou: mean(&iou_scored),
        trigger_rate: if records.is_empty() { 0.0 } else { triggers as f64 / records.len() as f64 },
        mean_steps: mean(&records.iter().map(|r| r.steps as f64).collect::<Vec<_>>()),
    }
}

fn record_rollout(
    slice_index: usize,
    window: Window,
    actions: Vec<ActionKind>,
    mask: &MaskSlice,
) -> LocRecord {
    let iou = modified_iou(&window, mask);
    let rec = recall(&window, mask).ok();
    LocRecord { slice_index, final_window: window, steps: actions.len(), actions, iou, recall: rec }
}

/// Greedy (epsilon = 0) rollouts over a dataset.
pub fn evaluate_localizer<S: Scalar>(
    net: &QNetwork<S>,
    dataset: &[(SliceImage, MaskSlice)],
    env_cfg: &EnvConfig,
) -> LocEvaluation {
    let records: Vec<LocRecord> = dataset
        .iter()
        .enumerate()
        .map(|(i, (slice, mask))| {
            let (window, actions) = env::rollout_greedy::<S, _>(slice, env_cfg, |sv| net.q_values(sv));
            record_rollout(i, window, actions, mask)
        })
        .collect();
    let summary = summarize(&records);
    LocEvaluation { records, summary }
}

/// Uniform-random policy baseline on the same slices: every step picks one
/// of the ten actions uniformly; trigger ends the episode.
pub fn evaluate_random_policy(
    dataset: &[(SliceImage, MaskSlice)],
    env_cfg: &EnvConfig,
    seed: u64,
) -> LocEvaluation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records: Vec<LocRecord> = dataset
        .iter()
        .enumerate()
        .map(|(i, (slice, mask))| {
            let mut window = Window::full(slice.width(), slice.height());
            let mut actions = Vec::new();
            for _ in 0..env_cfg.max_steps {
                let action = ActionKind::from_index(rng.gen_range(0..ActionKind::COUNT)).unwrap();
                actions.push(action);
                if action == ActionKind::Trigger {
                    break;
                }
                window = crate::geometry::apply_action_min_side(
                    window,
                    action,
                    slice.width(),
                    slice.height(),
                    env_cfg.min_window_side,
                )
                .expect("moving action on valid window");
            }
            record_rollout(i, window, actions, mask)
        })
        .collect();
    let summary = summarize(&records);
    LocEvaluation { records, summary }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotating_subsample_covers_everything() {
        let mut seen = vec![false; 10];
        for epoch in 0..5 {
            for i in epoch_slice_indices(10, Some(2), epoch) {
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(epoch_slice_indices(3, None, 7), vec![0, 1, 2]);
        assert_eq!(epoch_slice_indices(3, Some(5), 7), vec![0, 1, 2]);
    }

    #[test]
    fn epsilon_schedule_matches_closed_form() {
        let s = super::super::EpsilonSchedule::default();
        for e in 0..30 {
            let expect = (1.0 - 0.1 * e as f64).max(0.1);
            assert!((s.value(e) - expect).abs() < 1e-12, "epoch {e}");
        }
    }
}
