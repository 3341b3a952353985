//! Q-learning: the Q-network MLP, epsilon-greedy action selection, FIFO
//! replay memory, Bellman targets, and the minibatch squared-TD update.

mod analysis;
mod train;

pub use analysis::{action_correlation, move_action_frequencies, CorrelationMatrix};
pub use train::{
    evaluate_localizer, evaluate_random_policy, train_localizer, LocEpochLog, LocEvaluation,
    LocRecord, LocSummary, TrainError,
};

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::geometry::ActionKind;
use crate::scalar::{real, Scalar};
use crate::tensor_nn::{
    dense_backward, dense_forward, glorot_uniform, relu_backward, relu_forward, Optimizer,
    OptimizerConfig, OptimizerKind, Parameter, Tensor, TensorError,
};

/// One (state, action, reward, next state, terminal) experience.
#[derive(Clone, Debug)]
pub struct Transition<S> {
    pub state: Vec<S>,
    pub action: ActionKind,
    pub reward: S,
    pub next_state: Vec<S>,
    pub terminal: bool,
}

/// Epsilon decays linearly from `start` by `decrement` per epoch down to
/// `floor`: with the defaults, `eps(e) = max(1 - 0.1*e, 0.1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub floor: f64,
    pub decrement: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self { start: 1.0, floor: 0.1, decrement: 0.1 }
    }
}

impl EpsilonSchedule {
    pub fn value(&self, epoch: usize) -> f64 {
        (self.start - self.decrement * epoch as f64).max(self.floor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DqnConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub replay_capacity: usize,
    /// Hidden layer widths of the Q-network MLP.
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerConfig,
    pub epsilon: EpsilonSchedule,
    /// Cap on episodes per epoch; slices rotate deterministically so the
    /// whole dataset is still swept across epochs. `None` = every slice,
    /// every epoch.
    pub slices_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            batch_size: 32,
            epochs: 25,
            replay_capacity: 50_000,
            hidden: vec![128, 128],
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                learning_rate: 1e-3,
                momentum: 0.9,
                lr_decay: 1.0,
            },
            epsilon: EpsilonSchedule::default(),
            slices_per_epoch: None,
            seed: 0,
        }
    }
}

struct DenseLayer<S> {
    weight: Parameter<S>,
    bias: Parameter<S>,
}

/// MLP over the environment state vector, emitting one Q-value per action.
/// Hidden layers are rectified; the output layer is linear.
pub struct QNetwork<S> {
    layers: Vec<DenseLayer<S>>,
    input_len: usize,
    hidden: Vec<usize>,
}

/// Activations saved by the batched forward pass for backprop.
pub struct QForwardCache<S> {
    /// Input to each dense layer.
    inputs: Vec<Tensor<S>>,
    /// Pre-activation output of each dense layer.
    preacts: Vec<Tensor<S>>,
}

impl<S: Scalar> QNetwork<S> {
    pub fn new(input_len: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut fan_in = input_len;
        for &width in hidden.iter().chain(std::iter::once(&ActionKind::COUNT)) {
            layers.push(DenseLayer {
                weight: Parameter::new(glorot_uniform(&[width, fan_in], fan_in, width, &mut rng)),
                bias: Parameter::new(Tensor::zeros(&[width])),
            });
            fan_in = width;
        }
        Self { layers, input_len, hidden: hidden.to_vec() }
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    /// Q-values for a single state vector.
    pub fn q_values(&self, state: &[S]) -> Vec<S> {
        assert_eq!(state.len(), self.input_len, "state vector width mismatch");
        let x = Tensor::from_vec(&[1, state.len()], state.to_vec()).expect("state vec");
        let (out, _) = self.forward_batch(&x);
        out.data().to_vec()
    }

    /// Batched forward pass with cached activations.
    pub fn forward_batch(&self, x: &Tensor<S>) -> (Tensor<S>, QForwardCache<S>) {
        let mut cache = QForwardCache { inputs: Vec::new(), preacts: Vec::new() };
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cache.inputs.push(a.clone());
            let z = dense_forward(&a, &layer.weight.value, &layer.bias.value).expect("layer shapes");
            cache.preacts.push(z.clone());
            a = if i + 1 < self.layers.len() { relu_forward(&z) } else { z };
        }
        (a, cache)
    }

    /// Accumulate parameter gradients from the upstream gradient on the
    /// output layer's pre-activations.
    pub fn backward(&mut self, cache: &QForwardCache<S>, grad_out: &Tensor<S>) {
        let mut up = grad_out.clone();
        for l in (0..self.layers.len()).rev() {
            let (gi, gw, gb) = dense_backward(&cache.inputs[l], &self.layers[l].weight.value, &up)
                .expect("backward shapes");
            self.layers[l].weight.grad.add_assign(&gw);
            self.layers[l].bias.grad.add_assign(&gb);
            if l > 0 {
                up = relu_backward(&cache.preacts[l - 1], &gi);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.weight.zero_grad();
            l.bias.zero_grad();
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_field("model", "qnetwork");
        ck.set_field("input_len", self.input_len);
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        ck.set_field("hidden", hidden.join(","));
        ck.set_field("outputs", ActionKind::COUNT);
        for (i, l) in self.layers.iter().enumerate() {
            ck.push_tensor(&format!("fc{i}.weight"), l.weight.value.cast());
            ck.push_tensor(&format!("fc{i}.bias"), l.bias.value.cast());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let input_len: usize = ck.parse_field("input_len")?;
        let hidden_str = ck.field("hidden")?;
        let hidden: Vec<usize> = if hidden_str.is_empty() {
            Vec::new()
        } else {
            hidden_str
                .split(',')
                .map(|s| s.parse().map_err(|_| CheckpointError::HeaderParse("hidden".into())))
                .collect::<Result<_, _>>()?
        };
        let mut layers = Vec::new();
        let mut fan_in = input_len;
        for (i, &width) in hidden.iter().chain(std::iter::once(&ActionKind::COUNT)).enumerate() {
            let w = ck.tensor_with_shape(&format!("fc{i}.weight"), &[width, fan_in])?;
            let b = ck.tensor_with_shape(&format!("fc{i}.bias"), &[width])?;
            layers.push(DenseLayer {
                weight: Parameter::new(w.cast()),
                bias: Parameter::new(b.cast()),
            });
            fan_in = width;
        }
        Ok(Self { layers, input_len, hidden })
    }
}

/// Epsilon-greedy selection: a uniformly random action with probability
/// `epsilon`, otherwise the argmax Q-value (lowest index wins ties).
pub fn select_action<S: Scalar, R: Rng>(qvals: &[S], epsilon: f64, rng: &mut R) -> ActionKind {
    debug_assert_eq!(qvals.len(), ActionKind::COUNT);
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return ActionKind::from_index(rng.gen_range(0..ActionKind::COUNT)).expect("index in range");
    }
    let mut best = 0;
    for (i, &v) in qvals.iter().enumerate() {
        if v > qvals[best] {
            best = i;
        }
    }
    ActionKind::from_index(best).expect("index in range")
}

/// Fixed-capacity FIFO experience store with a seeded uniform sampler.
pub struct ReplayMemory<S> {
    capacity: usize,
    buf: VecDeque<Transition<S>>,
    rng: ChaCha8Rng,
}

impl<S: Scalar> ReplayMemory<S> {
    pub fn new(capacity: usize, sampler_seed: u64) -> Self {
        assert!(capacity >= 1);
        Self { capacity, buf: VecDeque::with_capacity(capacity.min(1 << 20)), rng: ChaCha8Rng::seed_from_u64(sampler_seed) }
    }

    pub fn push(&mut self, t: Transition<S>) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Transition<S> {
        &self.buf[i]
    }

    /// Oldest-first view of the current contents.
    pub fn iter(&self) -> impl Iterator<Item = &Transition<S>> {
        self.buf.iter()
    }

    /// Uniform sampling with replacement across the current contents.
    pub fn sample_indices(&mut self, n: usize) -> Vec<usize> {
        assert!(!self.buf.is_empty(), "cannot sample from an empty replay memory");
        (0..n).map(|_| self.rng.gen_range(0..self.buf.len())).collect()
    }
}

/// Bellman target: `r` when terminal, else `r + gamma * max_a' Q(s', a')`.
pub fn td_target<S: Scalar>(t: &Transition<S>, net: &QNetwork<S>, gamma: f64) -> S {
    if t.terminal {
        return t.reward;
    }
    let q = net.q_values(&t.next_state);
    let best = q.iter().copied().fold(S::neg_infinity(), S::max);
    t.reward + real::<S>(gamma) * best
}

/// One minibatch update on the squared TD error
/// `L = 1/(2B) * sum_i (y_i - Q(s_i, a_i))^2`, with the targets `y` treated
/// as constants. Returns the loss before the update.
pub fn train_step<S: Scalar>(
    net: &mut QNetwork<S>,
    batch: &[&Transition<S>],
    gamma: f64,
    opt: &mut Optimizer<S>,
) -> Result<S, TensorError> {
    assert!(!batch.is_empty(), "train_step needs a nonempty batch");
    let b = batch.len();
    let width = net.input_len();

    // Bellman targets from the live network, no gradient flow.
    let mut next_x = Vec::with_capacity(b * width);
    for t in batch {
        next_x.extend_from_slice(&t.next_state);
    }
    let next_x = Tensor::from_vec(&[b, width], next_x)?;
    let (next_q, _) = net.forward_batch(&next_x);
    let gamma_s = real::<S>(gamma);
    let targets: Vec<S> = batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.terminal {
                t.reward
            } else {
                let row = &next_q.data()[i * ActionKind::COUNT..(i + 1) * ActionKind::COUNT];
                t.reward + gamma_s * row.iter().copied().fold(S::neg_infinity(), S::max)
            }
        })
        .collect();

    let mut x = Vec::with_capacity(b * width);
    for t in batch {
        x.extend_from_slice(&t.state);
    }
    let x = Tensor::from_vec(&[b, width], x)?;
    let (q, cache) = net.forward_batch(&x);

    let inv_b = S::one() / S::from_usize(b).unwrap();
    let half = real::<S>(0.5);
    let mut loss = S::zero();
    let mut grad_out = Tensor::zeros(&[b, ActionKind::COUNT]);
    for (i, t) in batch.iter().enumerate() {
        let ai = t.action.index();
        let qa = q.data()[i * ActionKind::COUNT + ai];
        let diff = qa - targets[i];
        loss += half * diff * diff * inv_b;
        grad_out.data_mut()[i * ActionKind::COUNT + ai] = diff * inv_b;
    }

    net.zero_grad();
    net.backward(&cache, &grad_out);
    opt.step(&mut net.params_mut());
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_nn::OptimizerConfig;

    fn tiny_net(seed: u64) -> QNetwork<f64> {
        QNetwork::new(6, &[8], seed)
    }

    fn transition(reward: f64, terminal: bool) -> Transition<f64> {
        Transition {
            state: vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.1],
            action: ActionKind::ZoomCenter,
            reward,
            next_state: vec![0.0, 0.1, -0.3, 0.2, 0.0, 0.4],
            terminal,
        }
    }

    #[test]
    fn q_values_have_ten_outputs_and_are_deterministic() {
        let net = QNetwork::<f32>::new(6, &[8, 8], 3);
        let s = vec![0.5f32; 6];
        let a = net.q_values(&s);
        let b = net.q_values(&s);
        assert_eq!(a.len(), ActionKind::COUNT);
        assert_eq!(a, b);
    }

    #[test]
    fn zeroed_final_layer_gives_zero_q_values() {
        let mut net = tiny_net(0);
        let last = net.layers.len() - 1;
        net.layers[last].weight.value.fill(0.0);
        net.layers[last].bias.value.fill(0.0);
        let q = net.q_values(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(q.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn select_action_exploits_unique_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut q = vec![0.0f64; 10];
        q[7] = 5.0;
        assert_eq!(select_action(&q, 0.0, &mut rng), ActionKind::ShiftLeft);
        assert_eq!(ActionKind::ShiftLeft.index(), 7);
    }

    #[test]
    fn select_action_breaks_ties_low_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut q = vec![0.0f64; 10];
        q[2] = 3.0;
        q[5] = 3.0;
        assert_eq!(select_action(&q, 0.0, &mut rng).index(), 2);
    }

    #[test]
    fn select_action_is_invariant_to_positive_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q: Vec<f64> = (0..10).map(|i| ((i * 7 % 10) as f64) - 4.5).collect();
        let a = select_action(&q, 0.0, &mut rng);
        let scaled: Vec<f64> = q.iter().map(|v| v * 13.5).collect();
        assert_eq!(select_action(&scaled, 0.0, &mut rng), a);
    }

    #[test]
    fn full_exploration_is_roughly_uniform() {
        // Binomial bound: 10_000 draws, p = 0.1, sd ~= 30; 3 sigma ~= 90.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let q = vec![0.0f64; 10];
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            counts[select_action(&q, 1.0, &mut rng).index()] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            assert!((c as i64 - 1000).abs() < 3 * 30, "action {i} drawn {c} times");
        }
    }

    #[test]
    fn td_target_arithmetic() {
        let mut net = tiny_net(1);
        // Force known Q-values on the next state: zero weights, bias = Q.
        let last = net.layers.len() - 1;
        net.layers[last].weight.value.fill(0.0);
        for l in 0..net.layers.len() - 1 {
            net.layers[l].weight.value.fill(0.0);
            net.layers[l].bias.value.fill(0.0);
        }
        let biases: Vec<f64> = (0..10).map(|i| if i == 3 { 2.0 } else { -1.0 }).collect();
        net.layers[last].bias.value.data_mut().copy_from_slice(&biases);

        let t = transition(1.0, false);
        assert!((td_target(&t, &net, 0.9) - 2.8).abs() < 1e-12);
        assert_eq!(td_target(&t, &net, 0.0), 1.0);
        let term = transition(-3.0, true);
        assert_eq!(td_target(&term, &net, 0.9), -3.0);
    }

    #[test]
    fn train_step_with_zero_error_changes_nothing() {
        // Zero network output and terminal reward 0 means target == Q == 0:
        // zero loss and zero gradient, so momentum SGD leaves weights alone.
        let mut net = tiny_net(2);
        for l in 0..net.layers.len() {
            net.layers[l].weight.value.fill(0.0);
            net.layers[l].bias.value.fill(0.0);
        }
        let before: Vec<Vec<f64>> =
            net.layers.iter().map(|l| l.weight.value.data().to_vec()).collect();
        let mut opt = OptimizerConfig::default().build::<f64>();
        let t = transition(0.0, true);
        let loss = train_step(&mut net, &[&t], 0.9, &mut opt).unwrap();
        assert_eq!(loss, 0.0);
        for (l, b) in net.layers.iter().zip(before) {
            assert_eq!(l.weight.value.data(), b.as_slice());
        }
    }

    #[test]
    fn repeated_steps_on_one_transition_reduce_loss() {
        let mut net = tiny_net(3);
        let mut opt = OptimizerConfig { learning_rate: 1e-2, ..Default::default() }.build::<f64>();
        let t = transition(1.5, true);
        let mut losses = Vec::new();
        for _ in 0..10 {
            losses.push(train_step(&mut net, &[&t], 0.9, &mut opt).unwrap());
        }
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {:?}", losses);
        }
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn identical_seeds_give_identical_training() {
        let run = || {
            let mut net = tiny_net(7);
            let mut opt = OptimizerConfig::default().build::<f64>();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut losses = Vec::new();
            for i in 0..20 {
                let mut t = transition((i % 3) as f64 - 1.0, i % 4 == 0);
                t.action = ActionKind::from_index(rng.gen_range(0..10)).unwrap();
                losses.push(train_step(&mut net, &[&t], 0.9, &mut opt).unwrap());
            }
            (losses, net.q_values(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]))
        };
        let (la, qa) = run();
        let (lb, qb) = run();
        assert_eq!(la, lb);
        assert_eq!(qa, qb);
    }

    #[test]
    fn replay_is_fifo_and_capacity_bounded() {
        let mut mem = ReplayMemory::<f64>::new(5, 0);
        for i in 0..12 {
            mem.push(transition(i as f64, false));
        }
        assert_eq!(mem.len(), 5);
        let rewards: Vec<f64> = mem.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![7.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn replay_sampling_is_uniform_with_replacement() {
        let mut mem = ReplayMemory::<f64>::new(8, 123);
        for i in 0..8 {
            mem.push(transition(i as f64, false));
        }
        let idx = mem.sample_indices(8000);
        let mut counts = [0usize; 8];
        for i in idx {
            counts[i] += 1;
        }
        // 8000 draws over 8 slots: expect 1000 each, sd ~= 30.
        for &c in &counts {
            assert!((c as i64 - 1000).abs() < 120, "counts {counts:?}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_q_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.psck");
        let net = QNetwork::<f32>::new(6, &[8, 8], 5);
        let mut ck = net.to_checkpoint();
        ck.set_field("view_axis", "coronal");
        ck.write_to(&p).unwrap();
        let back = QNetwork::<f32>::from_checkpoint(&Checkpoint::read_from(&p).unwrap()).unwrap();
        let s = vec![0.25f32; 6];
        assert_eq!(net.q_values(&s), back.q_values(&s));
    }
}
