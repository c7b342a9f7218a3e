//! Actor-critic baselines (A2C, PPO) and the evaluation harness shared by
//! every agent.

use std::path::Path;

use dsr_autodiff::{Adam, AdamConfig, Checkpoint, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curve::CurvePoint;
use crate::env::{Action, Env};
use crate::error::{Error, Result};
use crate::nn::{self, Linear};
use crate::oracle::{enumerate, Metric, OracleConfig};
use crate::pidt::{infer_episode, Mode, PidtModel};

/// Two-layer ReLU trunk with a policy head and a value head.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorCriticNet {
    pub hidden: usize,
    pub state_len: usize,
    pub action_count: usize,
    pub store: ParamStore,
    l1: Linear,
    l2: Linear,
    policy: Linear,
    value: Linear,
}

/// Forward outputs for a batch of states.
pub struct AcOutputs {
    /// Log-probabilities `[n, actions]`, illegal entries at about -1e30.
    pub log_probs: Var,
    pub probs: Var,
    /// `[n]`
    pub values: Var,
}

impl ActorCriticNet {
    pub fn new(state_len: usize, action_count: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let std_in = (2.0 / state_len.max(1) as f64).sqrt();
        let std_h = (2.0 / hidden as f64).sqrt();
        let l1 = Linear::new(&mut store, "trunk.0", state_len, hidden, std_in, &mut rng);
        let l2 = Linear::new(&mut store, "trunk.1", hidden, hidden, std_h, &mut rng);
        let policy = Linear::new(&mut store, "policy", hidden, action_count, 0.01, &mut rng);
        let value = Linear::new(&mut store, "value", hidden, 1, 1.0 / (hidden as f64).sqrt(), &mut rng);
        Self {
            hidden,
            state_len,
            action_count,
            store,
            l1,
            l2,
            policy,
            value,
        }
    }

    pub fn for_env(env: &Env, hidden: usize, seed: u64) -> Self {
        Self::new(env.state_len(), env.action_count(), hidden, seed)
    }

    /// `states` is `[n, state_len]` row-major, `legal` `[n, actions]`.
    pub fn forward(&self, g: &mut Graph, states: &[f64], legal: &[bool]) -> Result<AcOutputs> {
        let n = states.len() / self.state_len.max(1);
        if states.len() != n * self.state_len || legal.len() != n * self.action_count {
            return Err(Error::Model("actor-critic batch has the wrong shape".into()));
        }
        let st = &self.store;
        let x = g.constant(Tensor::new(vec![n, self.state_len], states.to_vec())?);
        let h = self.l1.forward(g, st, x)?;
        let h = g.relu(h)?;
        let h = self.l2.forward(g, st, h)?;
        let h = g.relu(h)?;
        let logits = self.policy.forward(g, st, h)?;
        let illegal: Vec<bool> = legal.iter().map(|&l| !l).collect();
        let logits = g.masked_fill(logits, &illegal, -1e30)?;
        let log_probs = g.log_softmax(logits)?;
        let probs = g.softmax(logits)?;
        let v = self.value.forward(g, st, h)?;
        let values = g.reshape(v, &[n])?;
        Ok(AcOutputs {
            log_probs,
            probs,
            values,
        })
    }

    /// Action distribution and value for one state.
    pub fn policy(&self, state: &[f64], legal: &[bool]) -> Result<(Vec<f64>, f64)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, state, legal)?;
        Ok((g.value(out.probs).data().to_vec(), g.value(out.values).data()[0]))
    }

    pub fn save(&self, path: &Path, kind: &str) -> Result<()> {
        let meta = serde_json::json!({
            "kind": kind,
            "hidden": self.hidden,
            "state_len": self.state_len,
            "action_count": self.action_count,
        });
        Ok(Checkpoint::capture(&self.store, meta).save(path)?)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let ck = Checkpoint::load(path)?;
        let get = |k: &str| ck.meta.get(k).and_then(|v| v.as_u64()).map(|v| v as usize);
        let kind = ck
            .meta
            .get("kind")
            .and_then(|k| k.as_str())
            .unwrap_or_default()
            .to_string();
        let (Some(hidden), Some(s), Some(a)) = (get("hidden"), get("state_len"), get("action_count")) else {
            return Err(Error::Model(format!(
                "{}: not an actor-critic checkpoint",
                path.display()
            )));
        };
        let mut net = Self::new(s, a, hidden, 0);
        ck.restore(&mut net.store)?;
        Ok((net, kind))
    }
}

fn legal_row(env: &Env, s: &crate::env::RestorationState) -> Vec<bool> {
    env.action_mask(s)
}

/// One rollout step kept for the update.
#[derive(Clone, Debug)]
struct Sample {
    state: Vec<f64>,
    legal: Vec<bool>,
    action: usize,
    /// Reward divided by the agent's reward scale.
    reward: f64,
    log_prob: f64,
    value: f64,
}

/// Rolls one episode with the stochastic policy.
fn rollout(env: &Env, net: &ActorCriticNet, scale: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<Sample>, f64)> {
    let mut s = env.reset()?;
    let mut out = Vec::with_capacity(env.horizon());
    let mut ret = 0.0;
    for _ in 0..env.horizon() {
        let state = env.encode_state(&s);
        let legal = legal_row(env, &s);
        let (probs, value) = net.policy(&state, &legal)?;
        let a = nn::sample_index(&probs, rng);
        debug_assert!(legal[a]);
        let tr = env.step(&s, Action::from_index(a))?;
        ret += tr.reward;
        out.push(Sample {
            state,
            legal,
            action: a,
            reward: tr.reward / scale,
            log_prob: probs[a].ln(),
            value,
        });
        s = tr.state;
    }
    Ok((out, ret))
}

fn reward_scale(scale: f64) -> Result<f64> {
    if scale > 0.0 && scale.is_finite() {
        Ok(scale)
    } else {
        Err(Error::Config(format!("reward_scale {scale} must be positive")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct A2cConfig {
    pub hidden: usize,
    pub lr: f64,
    /// Bootstrap horizon; `None` uses whole-episode returns.
    pub n_steps: Option<usize>,
    pub episodes_per_update: usize,
    pub updates: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub grad_clip: f64,
    /// Divisor applied to environment rewards inside the agent. The default
    /// of 1 trains on raw kW·Δt rewards.
    pub reward_scale: f64,
}

impl Default for A2cConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            lr: 3e-3,
            n_steps: Some(5),
            episodes_per_update: 1,
            updates: 1500,
            value_coef: 0.5,
            entropy_coef: 0.0,
            grad_clip: 0.5,
            reward_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub hidden: usize,
    pub lr: f64,
    pub episodes_per_update: usize,
    pub epochs: usize,
    /// Rollout iterations; gradient updates = iterations · epochs.
    pub iterations: usize,
    pub clip: f64,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub grad_clip: f64,
    pub reward_scale: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            lr: 1e-3,
            episodes_per_update: 4,
            epochs: 4,
            iterations: 375,
            clip: 0.2,
            gae_lambda: 0.95,
            value_coef: 0.5,
            entropy_coef: 0.01,
            grad_clip: 1.0,
            reward_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcTrainOutput {
    pub net: ActorCriticNet,
    pub curve: Vec<CurvePoint>,
    pub losses: Vec<f64>,
}

/// Stacks samples into batch arrays.
fn stack(samples: &[Sample]) -> (Vec<f64>, Vec<bool>, Vec<usize>) {
    let states = samples.iter().flat_map(|s| s.state.iter().copied()).collect();
    let legal = samples.iter().flat_map(|s| s.legal.iter().copied()).collect();
    let actions = samples.iter().map(|s| s.action).collect();
    (states, legal, actions)
}

/// Mean policy entropy over rows, computed from masked distributions.
fn entropy(g: &mut Graph, out: &AcOutputs) -> Result<Var> {
    let plogp = g.mul(out.probs, out.log_probs)?;
    let neg_h = g.sum_last(plogp)?;
    let m = g.mean(neg_h)?;
    Ok(g.scale(m, -1.0)?)
}

/// n-step discounted targets for one episode, bootstrapping from stored
/// values when the window ends before the horizon.
fn nstep_targets(ep: &[Sample], gamma: f64, n: usize) -> Vec<f64> {
    (0..ep.len())
        .map(|t| {
            let end = (t + n).min(ep.len());
            let mut g = if end < ep.len() { ep[end].value } else { 0.0 };
            for i in (t..end).rev() {
                g = ep[i].reward + gamma * g;
            }
            g
        })
        .collect()
}

fn check_env(env: &Env, net: &ActorCriticNet) -> Result<()> {
    if net.state_len != env.state_len() || net.action_count != env.action_count() {
        return Err(Error::Config("network shape does not match the scenario".into()));
    }
    Ok(())
}

pub fn a2c_train(env: &Env, cfg: &A2cConfig, seed: u64) -> Result<AcTrainOutput> {
    if cfg.episodes_per_update == 0 || cfg.hidden == 0 || cfg.n_steps == Some(0) {
        return Err(Error::Config(
            "a2c: hidden, episodes_per_update and n_steps must be positive".into(),
        ));
    }
    let mut net = ActorCriticNet::for_env(env, cfg.hidden, seed);
    check_env(env, &net)?;
    let scale = reward_scale(cfg.reward_scale)?;
    let n = cfg.n_steps.unwrap_or(env.horizon());
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &net.store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut curve = Vec::with_capacity(cfg.updates);
    let mut losses = Vec::with_capacity(cfg.updates);
    for update in 0..cfg.updates {
        let mut batch = Vec::new();
        let mut targets = Vec::new();
        let mut ret_sum = 0.0;
        for _ in 0..cfg.episodes_per_update {
            let (ep, ret) = rollout(env, &net, scale, &mut rng)?;
            targets.extend(nstep_targets(&ep, env.cfg.gamma, n));
            batch.extend(ep);
            ret_sum += ret;
        }
        let (states, legal, actions) = stack(&batch);
        let b = A2cBatch {
            states,
            legal,
            actions,
            returns: targets,
        };
        let mut g = Graph::new();
        let loss = a2c_loss(&mut g, &net, &b, cfg)?;
        losses.push(g.value(loss).data()[0]);
        let mut grads = g.backward(loss)?.for_store(&net.store);
        nn::clip_global_norm(&mut grads, cfg.grad_clip);
        opt.update(&mut net.store, &grads)?;
        curve.push(CurvePoint {
            update: update + 1,
            avg_return: ret_sum / cfg.episodes_per_update as f64,
        });
    }
    Ok(AcTrainOutput { net, curve, losses })
}

/// On-policy batch for one A2C update.
pub struct A2cBatch {
    pub states: Vec<f64>,
    pub legal: Vec<bool>,
    pub actions: Vec<usize>,
    /// Bootstrapped value targets.
    pub returns: Vec<f64>,
}

/// Policy-gradient loss with advantages `returns - V(s)` held constant,
/// plus the value regression and entropy terms.
pub fn a2c_loss(g: &mut Graph, net: &ActorCriticNet, b: &A2cBatch, cfg: &A2cConfig) -> Result<Var> {
    let n = b.actions.len();
    let out = net.forward(g, &b.states, &b.legal)?;
    let values = g.value(out.values).data().to_vec();
    let adv: Vec<f64> = b.returns.iter().zip(&values).map(|(r, v)| r - v).collect();
    let logp = g.gather(out.log_probs, &b.actions)?;
    let adv_c = g.constant(Tensor::new(vec![n], adv)?);
    let pg = g.mul(logp, adv_c)?;
    let pg = g.mean(pg)?;
    let pg = g.scale(pg, -1.0)?;
    let tgt = g.constant(Tensor::new(vec![n], b.returns.clone())?);
    let diff = g.sub(out.values, tgt)?;
    let sq = g.mul(diff, diff)?;
    let vl = g.mean(sq)?;
    let vl = g.scale(vl, cfg.value_coef)?;
    let h = entropy(g, &out)?;
    let h = g.scale(h, -cfg.entropy_coef)?;
    let loss = g.add(pg, vl)?;
    Ok(g.add(loss, h)?)
}

/// Generalized advantage estimates for one episode ending at the horizon.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let mut adv = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        let next = if t + 1 < values.len() { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    adv
}

/// Clipped-surrogate loss pieces on a fixed batch; exposed for checks.
pub struct PpoBatch {
    pub states: Vec<f64>,
    pub legal: Vec<bool>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

pub fn ppo_loss(g: &mut Graph, net: &ActorCriticNet, b: &PpoBatch, cfg: &PpoConfig) -> Result<Var> {
    let n = b.actions.len();
    let out = net.forward(g, &b.states, &b.legal)?;
    let logp = g.gather(out.log_probs, &b.actions)?;
    let old = g.constant(Tensor::new(vec![n], b.old_log_probs.clone())?);
    let delta = g.sub(logp, old)?;
    let ratio = g.exp(delta)?;
    let adv = g.constant(Tensor::new(vec![n], b.advantages.clone())?);
    let unclipped = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
    let clipped = g.mul(clipped, adv)?;
    let surr = g.minimum(unclipped, clipped)?;
    let surr = g.mean(surr)?;
    let pl = g.scale(surr, -1.0)?;
    let tgt = g.constant(Tensor::new(vec![n], b.returns.clone())?);
    let diff = g.sub(out.values, tgt)?;
    let sq = g.mul(diff, diff)?;
    let vl = g.mean(sq)?;
    let vl = g.scale(vl, cfg.value_coef)?;
    let h = entropy(g, &out)?;
    let h = g.scale(h, -cfg.entropy_coef)?;
    let loss = g.add(pl, vl)?;
    Ok(g.add(loss, h)?)
}

pub fn ppo_train(env: &Env, cfg: &PpoConfig, seed: u64) -> Result<AcTrainOutput> {
    if cfg.episodes_per_update == 0 || cfg.epochs == 0 || cfg.hidden == 0 || cfg.clip < 0.0 {
        return Err(Error::Config(
            "ppo: hidden, episodes_per_update and epochs must be positive, clip non-negative".into(),
        ));
    }
    let mut net = ActorCriticNet::for_env(env, cfg.hidden, seed);
    check_env(env, &net)?;
    let scale = reward_scale(cfg.reward_scale)?;
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &net.store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut curve = Vec::new();
    let mut losses = Vec::new();
    let mut updates = 0;
    for _ in 0..cfg.iterations {
        let mut samples = Vec::new();
        let mut advantages = Vec::new();
        let mut returns = Vec::new();
        let mut ret_sum = 0.0;
        for _ in 0..cfg.episodes_per_update {
            let (ep, ret) = rollout(env, &net, scale, &mut rng)?;
            let rewards: Vec<f64> = ep.iter().map(|s| s.reward).collect();
            let values: Vec<f64> = ep.iter().map(|s| s.value).collect();
            let adv = gae(&rewards, &values, env.cfg.gamma, cfg.gae_lambda);
            returns.extend(adv.iter().zip(&values).map(|(a, v)| a + v));
            advantages.extend(adv);
            samples.extend(ep);
            ret_sum += ret;
        }
        if advantages.len() > 1 {
            let n = advantages.len() as f64;
            let mean = advantages.iter().sum::<f64>() / n;
            let std = (advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
            for a in &mut advantages {
                *a = (*a - mean) / (std + 1e-8);
            }
        }
        let (states, legal, actions) = stack(&samples);
        let batch = PpoBatch {
            states,
            legal,
            actions,
            old_log_probs: samples.iter().map(|s| s.log_prob).collect(),
            advantages,
            returns,
        };
        for _ in 0..cfg.epochs {
            let mut g = Graph::new();
            let loss = ppo_loss(&mut g, &net, &batch, cfg)?;
            losses.push(g.value(loss).data()[0]);
            let mut grads = g.backward(loss)?.for_store(&net.store);
            nn::clip_global_norm(&mut grads, cfg.grad_clip);
            opt.update(&mut net.store, &grads)?;
            updates += 1;
        }
        curve.push(CurvePoint {
            update: updates,
            avg_return: ret_sum / cfg.episodes_per_update as f64,
        });
    }
    Ok(AcTrainOutput { net, curve, losses })
}

/// Anything that can play one restoration episode.
pub trait Policy {
    fn kind(&self) -> &str;
    /// Plays an episode; `seed` drives any stochastic choices.
    fn play(&self, env: &Env, seed: u64) -> Result<Vec<Action>>;
}

/// Actor-critic agent, acting greedily or by sampling its distribution.
pub struct AcPolicy<'a> {
    pub net: &'a ActorCriticNet,
    pub kind: String,
    pub greedy: bool,
}

impl Policy for AcPolicy<'_> {
    fn kind(&self) -> &str {
        &self.kind
    }

    fn play(&self, env: &Env, seed: u64) -> Result<Vec<Action>> {
        check_env(env, self.net)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = env.reset()?;
        let mut actions = Vec::with_capacity(env.horizon());
        for _ in 0..env.horizon() {
            let legal = legal_row(env, &s);
            let (probs, _) = self.net.policy(&env.encode_state(&s), &legal)?;
            let a = if self.greedy {
                nn::masked_argmax(&probs, &legal).ok_or_else(|| Error::Model("no legal action".into()))?
            } else {
                nn::sample_index(&probs, &mut rng)
            };
            assert!(legal[a], "selected action {a} is not legal");
            let act = Action::from_index(a);
            s = env.step(&s, act)?.state;
            actions.push(act);
        }
        Ok(actions)
    }
}

pub struct PidtPolicy<'a> {
    pub model: &'a PidtModel,
    pub target: f64,
    pub greedy: bool,
}

impl Policy for PidtPolicy<'_> {
    fn kind(&self) -> &str {
        "pidt"
    }

    fn play(&self, env: &Env, seed: u64) -> Result<Vec<Action>> {
        let mode = if self.greedy { Mode::Greedy } else { Mode::Sample(seed) };
        Ok(infer_episode(self.model, env, self.target, mode)?.actions())
    }
}

/// Replays a fixed action sequence regardless of seed.
pub struct FixedPolicy(pub Vec<Action>);

impl Policy for FixedPolicy {
    fn kind(&self) -> &str {
        "fixed"
    }

    fn play(&self, _env: &Env, _seed: u64) -> Result<Vec<Action>> {
        Ok(self.0.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub actions: Vec<usize>,
    pub total_return: f64,
    pub final_power: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo_kw: f64,
    /// Exclusive upper edge; `None` for the open top bucket.
    pub hi_kw: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub trials: usize,
    pub base_seed: u64,
    pub near_optimal_kw: f64,
    /// Histogram band edges in kW; the last band is open-ended.
    pub bucket_edges_kw: Vec<f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            trials: 50,
            base_seed: 0,
            near_optimal_kw: 3000.0,
            bucket_edges_kw: vec![0.0, 1000.0, 2000.0, 3000.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub agent: String,
    pub scenario: String,
    pub env_checksum: String,
    pub trials: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_final_power: f64,
    pub std_final_power: f64,
    pub oracle_best_final_power: f64,
    pub optimal_count: usize,
    pub near_optimal_kw: f64,
    pub near_optimal_count: usize,
    pub histogram: Vec<Bucket>,
    /// Per-trial records; persisted separately as line records.
    #[serde(skip)]
    pub records: Vec<TrialRecord>,
}

impl EvalReport {
    /// Statistics recomputed from `records`, keeping this report's agent,
    /// scenario, reference optimum, threshold and histogram edges.
    pub fn recompute(&self, records: Vec<TrialRecord>) -> EvalReport {
        let settings = EvalSettings {
            trials: records.len(),
            base_seed: records.first().map_or(0, |r| r.seed),
            near_optimal_kw: self.near_optimal_kw,
            bucket_edges_kw: self.histogram.iter().map(|b| b.lo_kw).collect(),
        };
        stats(
            &self.agent,
            &self.scenario,
            &self.env_checksum,
            self.oracle_best_final_power,
            &settings,
            records,
        )
    }
}

/// Population mean and standard deviation. Sums run on values shifted by
/// the first sample, so identical samples give their value and zero spread.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let Some(&shift) = xs.first() else {
        return (0.0, 0.0);
    };
    let n = xs.len() as f64;
    let mean = shift + xs.iter().fold(0.0, |acc, x| acc + (x - shift)) / n;
    let var = xs.iter().fold(0.0, |acc, x| acc + (x - mean).powi(2)) / n;
    (mean, var.sqrt())
}

pub fn histogram(powers: &[f64], edges: &[f64]) -> Vec<Bucket> {
    let mut buckets: Vec<Bucket> = edges
        .iter()
        .enumerate()
        .map(|(i, &lo)| Bucket {
            lo_kw: lo,
            hi_kw: edges.get(i + 1).copied(),
            count: 0,
        })
        .collect();
    for &p in powers {
        if let Some(b) = buckets.iter_mut().rev().find(|b| p >= b.lo_kw) {
            b.count += 1;
        }
    }
    buckets
}

/// Whether a final power attains the optimum.
pub fn is_optimal(final_power: f64, best: f64) -> bool {
    (final_power - best).abs() <= 1e-6
}

/// Summary statistics recomputed from trial records.
pub fn summarize(
    agent: &str,
    env: &Env,
    oracle_best: f64,
    settings: &EvalSettings,
    records: Vec<TrialRecord>,
) -> EvalReport {
    stats(agent, &env.name, &env.checksum(), oracle_best, settings, records)
}

fn stats(
    agent: &str,
    scenario: &str,
    env_checksum: &str,
    oracle_best: f64,
    settings: &EvalSettings,
    records: Vec<TrialRecord>,
) -> EvalReport {
    let returns: Vec<f64> = records.iter().map(|r| r.total_return).collect();
    let powers: Vec<f64> = records.iter().map(|r| r.final_power).collect();
    let (mean_return, std_return) = mean_std(&returns);
    let (mean_final_power, std_final_power) = mean_std(&powers);
    EvalReport {
        agent: agent.to_string(),
        scenario: scenario.to_string(),
        env_checksum: env_checksum.to_string(),
        trials: records.len(),
        mean_return,
        std_return,
        mean_final_power,
        std_final_power,
        oracle_best_final_power: oracle_best,
        optimal_count: powers.iter().filter(|&&p| is_optimal(p, oracle_best)).count(),
        near_optimal_kw: settings.near_optimal_kw,
        near_optimal_count: powers.iter().filter(|&&p| p >= settings.near_optimal_kw).count(),
        histogram: histogram(&powers, &settings.bucket_edges_kw),
        records,
    }
}

/// Best final power from the oracle, or the total load when the scenario is
/// too large to enumerate.
pub fn reference_best(env: &Env) -> Result<f64> {
    match enumerate(
        env,
        Metric::FinalPower,
        &OracleConfig {
            max_sequences: 1,
            ..OracleConfig::default()
        },
    ) {
        Ok(r) => Ok(r.best_final_power),
        Err(Error::OracleBound(_)) => Ok(env.total_load_kw()),
        Err(e) => Err(e),
    }
}

pub fn evaluate(policy: &dyn Policy, env: &Env, settings: &EvalSettings, oracle_best: f64) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(settings.trials);
    for trial in 0..settings.trials {
        let seed = settings.base_seed + trial as u64;
        let actions = policy.play(env, seed)?;
        let transitions = env.rollout(&actions)?;
        let total_return = transitions.iter().fold(0.0, |acc, t| acc + t.reward);
        let final_power = transitions
            .last()
            .map_or(env.reset()?.restored_kw, |t| t.state.restored_kw);
        records.push(TrialRecord {
            trial,
            seed,
            actions: actions.iter().map(|a| a.index()).collect(),
            total_return,
            final_power,
        });
    }
    Ok(summarize(policy.kind(), env, oracle_best, settings, records))
}
