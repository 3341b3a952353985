//! The localization MDP.
//!
//! A state is the agent's current attention window rendered as a fixed-size
//! region descriptor (normalized crop pixels plus normalized window
//! coordinates) concatenated with a memory of the last ten actions as
//! stacked one-hot blocks, most recent first.
//!
//! Rewards: moving actions earn the sign of the modified-IoU change, with
//! sign(0) defined as -1 so a clamped no-op move is penalized. The trigger
//! action earns +sigma when both IoU and recall clear their thresholds,
//! -sigma otherwise. An episode forced to end at the step cap additionally
//! receives the trigger criterion's reward so truncation still carries a
//! terminal signal.

use thiserror::Error;

use crate::geometry::{
    apply_action_min_side, modified_iou, recall, ActionKind, GeometryError, MaskSlice, Window,
};
use crate::scalar::{real, Scalar};
use crate::synthdata::{resize_bilinear, SliceImage};

/// Length of the action-history memory, in actions.
pub const HISTORY_LEN: usize = 10;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("slice is {sw}x{sh} but mask is {mw}x{mh}")]
    DimMismatch { sw: u32, sh: u32, mw: u32, mh: u32 },
    #[error("training episodes need a nonempty mask")]
    EmptyMask,
    #[error("episode already finished (step {0})")]
    EpisodeFinished(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvConfig {
    /// Hard cap on actions per episode.
    pub max_steps: usize,
    /// IoU threshold of the trigger criterion.
    pub tau_iou: f64,
    /// Recall threshold of the trigger criterion.
    pub tau_recall: f64,
    /// Magnitude of the trigger reward.
    pub sigma: f64,
    /// Side of the square descriptor crop, in pixels.
    pub descriptor_side: u32,
    /// Smallest window side a zoom may produce.
    pub min_window_side: u32,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            max_steps: 10,
            tau_iou: 0.2,
            tau_recall: 0.9,
            sigma: 3.0,
            descriptor_side: 24,
            min_window_side: 8,
        }
    }
}

impl EnvConfig {
    pub fn descriptor_len(&self) -> usize {
        (self.descriptor_side * self.descriptor_side) as usize + 4
    }

    /// Q-network input width: descriptor plus the action-history memory.
    pub fn state_len(&self) -> usize {
        self.descriptor_len() + HISTORY_LEN * ActionKind::COUNT
    }
}

/// Full agent state at one step of an episode.
#[derive(Clone, Debug)]
pub struct EnvState<S> {
    pub window: Window,
    /// descriptor_side^2 crop pixels in [0,1] plus (x0/W, y0/H, w/W, h/H).
    pub descriptor: Vec<S>,
    /// HISTORY_LEN blocks of 10-way one-hots, most recent action first.
    pub history: Vec<S>,
    pub step_index: usize,
}

impl<S: Scalar> EnvState<S> {
    /// Concatenated Q-network input vector.
    pub fn state_vec(&self) -> Vec<S> {
        let mut v = Vec::with_capacity(self.descriptor.len() + self.history.len());
        v.extend_from_slice(&self.descriptor);
        v.extend_from_slice(&self.history);
        v
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome<S> {
    pub next_state: EnvState<S>,
    pub reward: S,
    pub done: bool,
    /// (modified IoU, recall) of the window after the action.
    pub info: (f64, f64),
}

/// Crop the window, resize to the descriptor square, scale to [0,1], and
/// append the window coordinates normalized by the image dims.
pub fn compute_descriptor<S: Scalar>(slice: &SliceImage, window: &Window, cfg: &EnvConfig) -> Vec<S> {
    let crop = slice.crop(window);
    let side = cfg.descriptor_side;
    let unit: Vec<S> = crop.to_unit();
    let mut descriptor = resize_bilinear(&unit, crop.width(), crop.height(), side, side);
    descriptor.reserve_exact(4);
    descriptor.push(real(window.x0 as f64 / slice.width() as f64));
    descriptor.push(real(window.y0 as f64 / slice.height() as f64));
    descriptor.push(real(window.w as f64 / slice.width() as f64));
    descriptor.push(real(window.h as f64 / slice.height() as f64));
    descriptor
}

fn check_dims(slice: &SliceImage, mask: &MaskSlice) -> Result<(), EnvError> {
    if slice.width() != mask.width() || slice.height() != mask.height() {
        return Err(EnvError::DimMismatch {
            sw: slice.width(),
            sh: slice.height(),
            mw: mask.width(),
            mh: mask.height(),
        });
    }
    Ok(())
}

/// Start an episode: full-image window, empty history.
pub fn reset<S: Scalar>(
    slice: &SliceImage,
    mask: &MaskSlice,
    cfg: &EnvConfig,
) -> Result<EnvState<S>, EnvError> {
    check_dims(slice, mask)?;
    if mask.is_empty() {
        return Err(EnvError::EmptyMask);
    }
    let window = Window::full(slice.width(), slice.height());
    Ok(EnvState {
        descriptor: compute_descriptor(slice, &window, cfg),
        window,
        history: vec![S::zero(); HISTORY_LEN * ActionKind::COUNT],
        step_index: 0,
    })
}

/// Shift the history right by one block and put `action`'s one-hot in front.
fn push_history<S: Scalar>(history: &[S], action: ActionKind) -> Vec<S> {
    let block = ActionKind::COUNT;
    let mut next = vec![S::zero(); history.len()];
    next[action.index()] = S::one();
    next[block..].copy_from_slice(&history[..history.len() - block]);
    next
}

/// The trigger criterion's reward: +sigma when IoU and recall both clear
/// their thresholds, -sigma otherwise.
fn trigger_reward(iou: f64, rec: f64, cfg: &EnvConfig) -> f64 {
    if rec > cfg.tau_recall && iou > cfg.tau_iou {
        cfg.sigma
    } else {
        -cfg.sigma
    }
}

/// Advance one step. Training-time API: requires the ground-truth mask.
pub fn step<S: Scalar>(
    state: &EnvState<S>,
    action: ActionKind,
    slice: &SliceImage,
    mask: &MaskSlice,
    cfg: &EnvConfig,
) -> Result<StepOutcome<S>, EnvError> {
    check_dims(slice, mask)?;
    if state.step_index >= cfg.max_steps {
        return Err(EnvError::EpisodeFinished(state.step_index));
    }

    let step_index = state.step_index + 1;
    if action == ActionKind::Trigger {
        let iou = modified_iou(&state.window, mask);
        let rec = recall(&state.window, mask)?;
        let next_state = EnvState {
            window: state.window,
            descriptor: state.descriptor.clone(),
            history: push_history(&state.history, action),
            step_index,
        };
        return Ok(StepOutcome {
            next_state,
            reward: real(trigger_reward(iou, rec, cfg)),
            done: true,
            info: (iou, rec),
        });
    }

    let old_iou = modified_iou(&state.window, mask);
    let window = apply_action_min_side(
        state.window,
        action,
        slice.width(),
        slice.height(),
        cfg.min_window_side,
    )?;
    let iou = modified_iou(&window, mask);
    let rec = recall(&window, mask)?;
    // sign of the IoU change, with sign(0) := -1.
    let mut reward = if iou > old_iou { 1.0 } else { -1.0 };
    let done = step_index >= cfg.max_steps;
    if done {
        // Forced termination also evaluates the trigger criterion.
        reward += trigger_reward(iou, rec, cfg);
    }
    let next_state = EnvState {
        descriptor: compute_descriptor(slice, &window, cfg),
        window,
        history: push_history(&state.history, action),
        step_index,
    };
    Ok(StepOutcome { next_state, reward: real(reward), done, info: (iou, rec) })
}

/// Greedy rollout driven by a Q-value callback; needs no ground truth.
/// Returns the final window and the action sequence. Used at inference.
pub fn rollout_greedy<S, Q>(slice: &SliceImage, cfg: &EnvConfig, mut qvals: Q) -> (Window, Vec<ActionKind>)
where
    S: Scalar,
    Q: FnMut(&[S]) -> Vec<S>,
{
    let mut window = Window::full(slice.width(), slice.height());
    let mut history = vec![S::zero(); HISTORY_LEN * ActionKind::COUNT];
    let mut actions = Vec::new();
    for _ in 0..cfg.max_steps {
        let mut state_vec = compute_descriptor(slice, &window, cfg);
        state_vec.extend_from_slice(&history);
        let q = qvals(&state_vec);
        debug_assert_eq!(q.len(), ActionKind::COUNT);
        let mut best = 0;
        for (i, &v) in q.iter().enumerate() {
            if v > q[best] {
                best = i;
            }
        }
        let action = ActionKind::from_index(best).expect("argmax over 10 actions");
        actions.push(action);
        if action == ActionKind::Trigger {
            break;
        }
        window = apply_action_min_side(window, action, slice.width(), slice.height(), cfg.min_window_side)
            .expect("moving action on a valid window");
        history = push_history(&history, action);
    }
    (window, actions)
}
