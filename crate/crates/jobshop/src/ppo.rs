//! PPO: rollout collection, generalized advantage estimation, the clipped
//! surrogate update, and the training loop.
//!
//! Rollouts always hold complete episodes (episode length is fixed at
//! `n_jobs * n_machines`), so the buffer size is `episodes_per_update` times
//! that. Updates replay each transition's stored dropout masks, which makes
//! the first pass of the first epoch recompute exactly the collection-time
//! log-probabilities (probability ratio 1).

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::env::ScheduleState;
use crate::eval;
use crate::graph::{build_graph, update_features, HeteroGraph};
use crate::instance::JsspInstance;
use crate::nn::checkpoint::TrainMeta;
use crate::nn::{Arch, DropoutMask, GraphBatch, ModelConfig, PolicyModel, PreparedGraph, Tensor};
use crate::rng::SeedStreams;

/// Training hyperparameters. `Default` pins the paper protocol: 50k steps,
/// gamma 0.99, lambda 0.95, clip 0.2, value coefficient 0.5, entropy
/// coefficient 0.01, 4 epochs of minibatch 32, Adam at 3e-4 with gradient
/// norm clipped to 0.5, 4 episodes per update, evaluation every 2,000 steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub episodes_per_update: usize,
    pub seed: u64,
    pub normalize_advantages: bool,
    pub eval_interval: u64,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 50_000,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            epochs: 4,
            minibatch: 32,
            lr: 3e-4,
            max_grad_norm: 0.5,
            episodes_per_update: 4,
            seed: 0,
            normalize_advantages: true,
            eval_interval: 2_000,
            eval_episodes: 10,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_total_steps(mut self, steps: u64) -> Self {
        self.total_steps = steps;
        self
    }
}

/// One step of experience: enough to replay the forward pass on the static
/// graph topology.
#[derive(Debug, Clone)]
pub struct Transition {
    pub features: Vec<f64>,
    pub mask: Vec<bool>,
    pub action: usize,
    pub log_prob_old: f64,
    pub reward: f64,
    pub value_old: f64,
    pub done: bool,
    /// Dropout masks used when the action was sampled; replayed at update
    /// time so the update starts from the exact collection policy.
    pub dropout_masks: Vec<DropoutMask>,
}

/// Transitions from `episodes_per_update` complete episodes plus computed
/// advantages and returns.
#[derive(Debug, Default)]
pub struct RolloutBuffer {
    pub transitions: Vec<Transition>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// GAE with terminal bootstrap 0:
    /// `delta_t = r_t + gamma*V(s_{t+1})*(1-done_t) - V(s_t)`,
    /// `A_t = delta_t + gamma*lambda*(1-done_t)*A_{t+1}`, returns `A + V`.
    pub fn compute_gae(&mut self, gamma: f64, lambda: f64) {
        let n = self.len();
        self.advantages = vec![0.0; n];
        self.returns = vec![0.0; n];
        let mut next_adv = 0.0;
        let mut next_value = 0.0;
        for t in (0..n).rev() {
            let tr = &self.transitions[t];
            let cont = if tr.done { 0.0 } else { 1.0 };
            let delta = tr.reward + gamma * next_value * cont - tr.value_old;
            next_adv = delta + gamma * lambda * cont * next_adv;
            self.advantages[t] = next_adv;
            self.returns[t] = next_adv + tr.value_old;
            next_value = tr.value_old;
        }
    }

    /// Rescales advantages to zero mean / unit standard deviation.
    pub fn normalize_advantages(&mut self) {
        let n = self.advantages.len() as f64;
        let mean = self.advantages.iter().sum::<f64>() / n;
        let var = self
            .advantages
            .iter()
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        for a in &mut self.advantages {
            *a = (*a - mean) / (std + 1e-8);
        }
    }
}

/// Samples an action index from masked log-probabilities.
pub fn sample_action(log_probs: &[f64], mask: &[bool], rng: &mut ChaCha8Rng) -> usize {
    use rand::Rng;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_valid = None;
    for (i, (&lp, &m)) in log_probs.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        last_valid = Some(i);
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    last_valid.expect("at least one valid action")
}

/// Runs `episodes` complete episodes under the stochastic policy (dropout
/// active), recording one [`Transition`] per step.
pub fn collect_rollout(
    inst: &JsspInstance,
    graph: &mut HeteroGraph,
    prep: &PreparedGraph,
    model: &PolicyModel,
    episodes: usize,
    actions_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> RolloutBuffer {
    let mut buffer = RolloutBuffer::default();
    for _ in 0..episodes {
        let mut state = ScheduleState::reset(inst);
        update_features(graph, &state, inst);
        while !state.is_terminal() {
            let mask = state.action_mask(inst);
            let dropout_masks = model.sample_dropout_masks(graph.node_count, dropout_rng);
            let fwd = model.forward_taped(prep, &graph.features, &mask, Some(&dropout_masks));
            let log_probs = fwd.log_prob_vec();
            let value_old = fwd.value_estimate();
            let action = sample_action(&log_probs, &mask, actions_rng);
            let features = graph.features.clone();
            let (reward, done) = state.step(action, inst);
            update_features(graph, &state, inst);
            buffer.transitions.push(Transition {
                features,
                mask,
                action,
                log_prob_old: log_probs[action],
                reward,
                value_old,
                done,
                dropout_masks,
            });
        }
    }
    buffer
}

/// Mean loss components of one minibatch, for diagnostics and tests.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossStats {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Transitions stacked per forward pass, sized so the per-layer edge
/// tensors stay at a few megabytes.
fn forward_group_size(prep: &PreparedGraph, hidden: usize) -> usize {
    let arcs = prep.pre_src.len() + prep.comp_src.len();
    (2_000_000 / (arcs.max(1) * hidden.max(1))).clamp(1, 32)
}

/// Accumulates gradients of the PPO loss over `chunk` into the model
/// (without taking the optimizer step). Gradients are averaged over the
/// minibatch; transitions are stacked into batched forwards.
fn minibatch_backward(
    model: &mut PolicyModel,
    prep: &PreparedGraph,
    buffer: &RolloutBuffer,
    chunk: &[usize],
    config: &TrainConfig,
) -> LossStats {
    model.zero_grads();
    let mut stats = LossStats::default();
    let inv_chunk = 1.0 / chunk.len() as f64;
    let group = forward_group_size(prep, model.config.hidden);
    let n = prep.node_count;

    for sub in chunk.chunks(group) {
        let parts: Vec<(&[f64], &[bool])> = sub
            .iter()
            .map(|&i| {
                let t = &buffer.transitions[i];
                (t.features.as_slice(), t.mask.as_slice())
            })
            .collect();
        let batch = GraphBatch::stacked(prep, &parts);

        let dropout: Option<Vec<Rc<Vec<DropoutMask>>>> = match model.config.arch {
            Arch::Gin => None,
            _ => Some(
                (0..model.config.layers)
                    .map(|l| {
                        Rc::new(
                            sub.iter()
                                .map(|&i| buffer.transitions[i].dropout_masks[l].clone())
                                .collect::<Vec<_>>(),
                        )
                    })
                    .collect(),
            ),
        };
        let mut fwd = model.forward_batch(&batch, dropout.as_deref());
        let tape = &mut fwd.tape;

        let actions: Vec<usize> = sub
            .iter()
            .enumerate()
            .map(|(g, &i)| g * n + buffer.transitions[i].action)
            .collect();
        let col = |f: &dyn Fn(usize) -> f64| -> Tensor {
            Tensor::column(&sub.iter().map(|&i| f(i)).collect::<Vec<f64>>())
        };

        let lp_new = tape.gather_elems(fwd.log_probs, Rc::new(actions));
        let lp_old = tape.leaf(col(&|i| buffer.transitions[i].log_prob_old));
        let log_ratio = tape.sub(lp_new, lp_old);
        let ratio = tape.exp(log_ratio);
        let adv = tape.leaf(col(&|i| buffer.advantages[i]));
        let surr_raw = tape.mul(ratio, adv);
        let ratio_clipped = tape.clamp(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps);
        let surr_clipped = tape.mul(ratio_clipped, adv);
        let surrogate = tape.min(surr_raw, surr_clipped);
        let policy_vec = tape.scale(surrogate, -1.0);

        let ret = tape.leaf(col(&|i| buffer.returns[i]));
        let v_old = tape.leaf(col(&|i| buffer.transitions[i].value_old));
        let err = tape.sub(fwd.values, ret);
        let v_delta = tape.sub(fwd.values, v_old);
        let v_delta_clipped = tape.clamp(v_delta, -config.clip_eps, config.clip_eps);
        let v_clipped = tape.add(v_old, v_delta_clipped);
        let err_clipped = tape.sub(v_clipped, ret);
        let sq = tape.square(err);
        let sq_clipped = tape.square(err_clipped);
        let value_vec = tape.max(sq, sq_clipped);

        let value_term = tape.scale(value_vec, config.value_coef);
        let entropy_term = tape.scale(fwd.entropies, -config.entropy_coef);
        let partial = tape.add(policy_vec, value_term);
        let per_sample = tape.add(partial, entropy_term);
        let loss = tape.mean_all(per_sample);

        let loss_value = tape.value(loss).item();
        assert!(
            loss_value.is_finite(),
            "non-finite PPO loss in minibatch {sub:?}: ratios={:?}",
            tape.value(ratio).data(),
        );

        stats.policy += inv_chunk * tape.value(policy_vec).data().iter().sum::<f64>();
        stats.value += inv_chunk * tape.value(value_vec).data().iter().sum::<f64>();
        stats.entropy += inv_chunk * tape.value(fwd.entropies).data().iter().sum::<f64>();
        stats.total += inv_chunk * sub.len() as f64 * loss_value;

        tape.backward(loss);
        model.accumulate_grads(&fwd, sub.len() as f64 * inv_chunk);
    }
    stats
}

/// One PPO update: `epochs` passes over the buffer in shuffled minibatches,
/// one Adam step per minibatch.
pub fn ppo_update(
    model: &mut PolicyModel,
    prep: &PreparedGraph,
    buffer: &RolloutBuffer,
    config: &TrainConfig,
    shuffle_rng: &mut ChaCha8Rng,
) -> LossStats {
    use rand::seq::SliceRandom;
    assert_eq!(buffer.advantages.len(), buffer.len(), "advantages not computed");
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut last = LossStats::default();
    for _ in 0..config.epochs {
        order.shuffle(shuffle_rng);
        for chunk in order.chunks(config.minibatch) {
            last = minibatch_backward(model, prep, buffer, chunk, config);
            model.adam_step(config.lr, config.max_grad_norm);
        }
    }
    last
}

/// One point of the learning curve: greedy evaluation after `env_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub env_steps: u64,
    pub eval_mean: f64,
    pub eval_std: f64,
}

/// Outcome of a full training run.
pub struct TrainResult {
    pub model: PolicyModel,
    pub curve: Vec<CurvePoint>,
    pub update_cycles: u64,
    pub env_steps: u64,
    pub meta: TrainMeta,
}

/// Trains a fresh model on `inst` until at least `config.total_steps`
/// environment steps have been taken. Fully determined by
/// `(instance, model_config, config)`.
pub fn train(inst: &JsspInstance, model_config: ModelConfig, config: &TrainConfig) -> TrainResult {
    let streams = SeedStreams::new(config.seed);
    let mut init_rng = streams.stream("init");
    let mut actions_rng = streams.stream("actions");
    let mut dropout_rng = streams.stream("dropout");
    let mut shuffle_rng = streams.stream("shuffle");

    let mut model = PolicyModel::new(model_config, &mut init_rng);
    let mut graph = build_graph(inst);
    let prep = PreparedGraph::new(&graph);

    let mut env_steps: u64 = 0;
    let mut update_cycles: u64 = 0;
    let mut next_eval = config.eval_interval;
    let mut curve = Vec::new();

    while env_steps < config.total_steps {
        let mut buffer = collect_rollout(
            inst,
            &mut graph,
            &prep,
            &model,
            config.episodes_per_update,
            &mut actions_rng,
            &mut dropout_rng,
        );
        env_steps += buffer.len() as u64;
        update_cycles += 1;
        buffer.compute_gae(config.gamma, config.gae_lambda);
        if config.normalize_advantages {
            buffer.normalize_advantages();
        }
        ppo_update(&mut model, &prep, &buffer, config, &mut shuffle_rng);

        while config.eval_interval > 0 && env_steps >= next_eval {
            let makespans = eval::evaluate(&model, inst, config.eval_episodes);
            let (mean, std) = mean_std(&makespans);
            curve.push(CurvePoint {
                env_steps,
                eval_mean: mean,
                eval_std: std,
            });
            next_eval += config.eval_interval;
        }
    }

    let meta = TrainMeta {
        steps_trained: env_steps,
        master_seed: config.seed,
        rng_word_pos: [
            actions_rng.get_word_pos(),
            dropout_rng.get_word_pos(),
            shuffle_rng.get_word_pos(),
        ],
    };
    TrainResult {
        model,
        curve,
        update_cycles,
        env_steps,
        meta,
    }
}

fn mean_std(xs: &[u64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
