//! Return-conditioned causal transformer policy.
//!
//! Each step contributes three tokens in the order (return-to-go, state,
//! action). A pre-norm GPT stack with a causal mask runs over the
//! interleaved sequence, and the action for step `t` is decoded from the
//! output at the state token of step `t`, which cannot see `a_t` itself.

use std::path::Path;

use dsr_autodiff::{Adam, AdamConfig, Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curve::CurvePoint;
use crate::dataset::{sample_minibatch, Dataset, Minibatch};
use crate::env::{Action, Env};
use crate::error::{Error, Result};
use crate::nn::{self, LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PidtConfig {
    /// Context length K in steps.
    pub context: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    /// Largest timestep index + 1; `None` uses the scenario horizon.
    pub max_timestep: Option<usize>,
    pub init_std: f64,
    pub lr: f64,
    pub grad_clip: f64,
    /// Training updates M, one minibatch each.
    pub episodes: usize,
    pub batch_size: usize,
    /// Updates between points of the average-return curve; 0 disables it.
    pub curve_every: usize,
    /// Sampled inference episodes (seeds 0, 1, ...) averaged per curve point.
    pub curve_episodes: usize,
}

impl Default for PidtConfig {
    fn default() -> Self {
        Self {
            context: 8,
            embed_dim: 32,
            layers: 3,
            heads: 4,
            ff_dim: 128,
            dropout: 0.0,
            max_timestep: None,
            init_std: 0.02,
            lr: 2e-3,
            grad_clip: 1.0,
            episodes: 1500,
            batch_size: 64,
            curve_every: 10,
            curve_episodes: 8,
        }
    }
}

impl PidtConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.context == 0 {
            return bad("context length must be at least 1".into());
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.ff_dim == 0 || self.batch_size == 0 {
            return bad("ff_dim and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lr > 0.0) || !(self.init_std >= 0.0) {
            return bad("lr must be positive and init_std non-negative".into());
        }
        Ok(())
    }
}

/// Sizes fixed by the scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub state_len: usize,
    pub action_count: usize,
    pub max_timestep: usize,
}

impl ModelDims {
    pub fn for_env(env: &Env, cfg: &PidtConfig) -> Self {
        Self {
            state_len: env.state_len(),
            action_count: env.action_count(),
            max_timestep: cfg.max_timestep.unwrap_or(env.horizon()),
        }
    }
}

/// R̂* = T · ΣP · Δt.
pub fn target_return(env: &Env) -> f64 {
    env.horizon() as f64 * env.total_load_kw() * env.cfg.delta_t
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc: Linear,
    out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PidtModel {
    pub cfg: PidtConfig,
    pub dims: ModelDims,
    /// Divisor applied to returns-to-go before encoding.
    pub rtg_scale: f64,
    pub store: ParamStore,
    rtg_enc: Linear,
    state_enc: Linear,
    /// `action_count + 1` rows; the last row marks padding and the not yet
    /// chosen current action.
    action_emb: ParamId,
    time_emb: ParamId,
    ln_in: LayerNorm,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

/// Windows of steps laid out `[batch, len]`, states `[batch, len, state_len]`.
/// Returns-to-go are already divided by the model's scale.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub rtg: Vec<f64>,
    pub states: Vec<f64>,
    pub actions: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenBatch {
    /// Converts a dataset minibatch; padded slots get the placeholder action.
    pub fn from_minibatch(mb: &Minibatch, model: &PidtModel) -> Self {
        let placeholder = model.dims.action_count;
        Self {
            batch: mb.batch,
            len: mb.k,
            rtg: mb.rtg.iter().map(|r| r / model.rtg_scale).collect(),
            states: mb.states.clone(),
            actions: mb
                .actions
                .iter()
                .zip(&mb.mask)
                .map(|(&a, &m)| if m { a } else { placeholder })
                .collect(),
            timesteps: mb.timesteps.clone(),
            mask: mb.mask.clone(),
        }
    }
}

impl PidtModel {
    pub fn new(cfg: &PidtConfig, dims: ModelDims, rtg_scale: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if dims.max_timestep == 0 || dims.action_count == 0 {
            return Err(Error::Config("model needs at least one timestep and one action".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = cfg.init_std;
        let d = cfg.embed_dim;
        let mut store = ParamStore::new();
        let rtg_enc = Linear::new(&mut store, "embed.rtg", 1, d, std, &mut rng);
        let state_enc = Linear::new(&mut store, "embed.state", dims.state_len, d, std, &mut rng);
        let action_emb = store.add(
            "embed.action",
            nn::normal_tensor(&mut rng, vec![dims.action_count + 1, d], std),
        );
        let time_emb = store.add(
            "embed.time",
            nn::normal_tensor(&mut rng, vec![dims.max_timestep, d], std),
        );
        let ln_in = LayerNorm::new(&mut store, "embed.ln", d);
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("block{i}");
                Block {
                    ln1: LayerNorm::new(&mut store, &format!("{p}.ln1"), d),
                    qkv: Linear::new(&mut store, &format!("{p}.qkv"), d, 3 * d, std, &mut rng),
                    proj: Linear::new(&mut store, &format!("{p}.proj"), d, d, std, &mut rng),
                    ln2: LayerNorm::new(&mut store, &format!("{p}.ln2"), d),
                    fc: Linear::new(&mut store, &format!("{p}.fc"), d, cfg.ff_dim, std, &mut rng),
                    out: Linear::new(&mut store, &format!("{p}.out"), cfg.ff_dim, d, std, &mut rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(&mut store, "final.ln", d);
        let head = Linear::new(&mut store, "head", d, dims.action_count, std, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            dims,
            rtg_scale: if rtg_scale > 0.0 { rtg_scale } else { 1.0 },
            store,
            rtg_enc,
            state_enc,
            action_emb,
            time_emb,
            ln_in,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn for_env(env: &Env, cfg: &PidtConfig, seed: u64) -> Result<Self> {
        Self::new(cfg, ModelDims::for_env(env, cfg), target_return(env), seed)
    }

    fn check_batch(&self, b: &TokenBatch) -> Result<()> {
        let n = b.batch * b.len;
        if b.len == 0
            || b.rtg.len() != n
            || b.actions.len() != n
            || b.timesteps.len() != n
            || b.mask.len() != n
            || b.states.len() != n * self.dims.state_len
        {
            return Err(Error::Model(format!(
                "token batch does not match [{}, {}] with state length {}",
                b.batch, b.len, self.dims.state_len
            )));
        }
        if let Some(&t) = b.timesteps.iter().find(|&&t| t >= self.dims.max_timestep) {
            return Err(Error::Model(format!(
                "timestep {t} exceeds max timestep {}",
                self.dims.max_timestep
            )));
        }
        if let Some(&a) = b.actions.iter().find(|&&a| a > self.dims.action_count) {
            return Err(Error::Model(format!("action {a} outside the action space")));
        }
        Ok(())
    }

    /// Token embeddings `[batch * 3 * len, embed_dim]` in (R̂, s, a) order,
    /// before the input layer norm.
    pub fn embed(&self, g: &mut Graph, b: &TokenBatch) -> Result<Var> {
        self.check_batch(b)?;
        let n = b.batch * b.len;
        let d = self.cfg.embed_dim;
        let st = &self.store;
        let rtg = g.constant(Tensor::new(vec![n, 1], b.rtg.clone())?);
        let states = g.constant(Tensor::new(vec![n, self.dims.state_len], b.states.clone())?);
        let r = self.rtg_enc.forward(g, st, rtg)?;
        let s = self.state_enc.forward(g, st, states)?;
        let table = g.param(st, self.action_emb);
        let a = g.embedding(table, &b.actions)?;
        let times = g.param(st, self.time_emb);
        let t = g.embedding(times, &b.timesteps)?;
        let r = g.add(r, t)?;
        let s = g.add(s, t)?;
        let a = g.add(a, t)?;
        let tokens = g.concat(&[r, s, a])?;
        Ok(g.reshape(tokens, &[3 * n, d])?)
    }

    /// Action logits `[batch * len, action_count]`, one row per step.
    /// `dropout_rng` enables dropout during training.
    pub fn logits(&self, g: &mut Graph, b: &TokenBatch, mut dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let tokens = self.embed(g, b)?;
        let st = &self.store;
        let (bs, l3) = (b.batch, 3 * b.len);
        let (d, h) = (self.cfg.embed_dim, self.cfg.heads);
        let dh = d / h;
        let mut x = self.ln_in.forward(g, st, tokens)?;
        x = self.dropout(g, x, dropout_rng.as_deref_mut())?;

        let pad: Vec<bool> = b.mask.iter().flat_map(|&m| [!m; 3]).collect();
        let blocked = attention_mask(bs, h, l3, &pad);
        let to_heads = |g: &mut Graph, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[bs, l3, h, dh])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            Ok(g.reshape(v, &[bs * h, l3, dh])?)
        };
        for blk in &self.blocks {
            let hn = blk.ln1.forward(g, st, x)?;
            let qkv = blk.qkv.forward(g, st, hn)?;
            let q = g.slice(qkv, 0, d)?;
            let k = g.slice(qkv, d, d)?;
            let v = g.slice(qkv, 2 * d, d)?;
            let (q, k, v) = (to_heads(g, q)?, to_heads(g, k)?, to_heads(g, v)?);
            let scores = g.bmm(q, k, true)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let scores = g.masked_fill(scores, &blocked, -1e30)?;
            let att = g.softmax(scores)?;
            let ctx = g.bmm(att, v, false)?;
            let ctx = g.reshape(ctx, &[bs, h, l3, dh])?;
            let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[bs * l3, d])?;
            let y = blk.proj.forward(g, st, ctx)?;
            let y = self.dropout(g, y, dropout_rng.as_deref_mut())?;
            x = g.add(x, y)?;

            let hn = blk.ln2.forward(g, st, x)?;
            let f = blk.fc.forward(g, st, hn)?;
            let f = g.gelu(f)?;
            let f = blk.out.forward(g, st, f)?;
            let f = self.dropout(g, f, dropout_rng.as_deref_mut())?;
            x = g.add(x, f)?;
        }
        let x = self.ln_f.forward(g, st, x)?;
        let state_rows: Vec<usize> = (0..bs)
            .flat_map(|i| (0..b.len).map(move |t| i * l3 + 3 * t + 1))
            .collect();
        let x = g.select_rows(x, &state_rows)?;
        self.head.forward(g, st, x)
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let p = self.cfg.dropout;
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        use rand::Rng;
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let data = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let m = g.constant(Tensor::new(shape, data)?);
        Ok(g.mul(x, m)?)
    }

    /// Mean cross-entropy over real (unpadded) steps.
    pub fn loss(
        &self,
        g: &mut Graph,
        b: &TokenBatch,
        targets: &[usize],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let logits = self.logits(g, b, dropout_rng)?;
        let weights: Vec<f64> = b.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let targets: Vec<usize> = targets
            .iter()
            .zip(&b.mask)
            .map(|(&a, &m)| if m { a } else { 0 })
            .collect();
        Ok(g.cross_entropy(logits, &targets, &weights)?)
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "pidt",
            "config": self.cfg,
            "dims": self.dims,
            "rtg_scale": self.rtg_scale,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(Checkpoint::capture(&self.store, self.meta()).save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        Self::from_checkpoint(&ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some("pidt") {
            return Err(Error::Model("checkpoint does not hold a transformer policy".into()));
        }
        let field = |name: &str| {
            ck.meta
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Model(format!("checkpoint meta lacks {name}")))
        };
        let cfg: PidtConfig = serde_json::from_value(field("config")?).map_err(|e| Error::Model(e.to_string()))?;
        let dims: ModelDims = serde_json::from_value(field("dims")?).map_err(|e| Error::Model(e.to_string()))?;
        let scale = field("rtg_scale")?
            .as_f64()
            .ok_or_else(|| Error::Model("rtg_scale is not a number".into()))?;
        let mut model = Self::new(&cfg, dims, scale, 0)?;
        ck.restore(&mut model.store)?;
        Ok(model)
    }
}

/// Blocked attention entries for `[batch * heads, n, n]` scores: future keys,
/// and padded keys other than the query itself.
pub fn attention_mask(batch: usize, heads: usize, n: usize, pad: &[bool]) -> Vec<bool> {
    let mut out = Vec::with_capacity(batch * heads * n * n);
    for b in 0..batch {
        let pad_b = &pad[b * n..(b + 1) * n];
        for _ in 0..heads {
            for i in 0..n {
                out.extend((0..n).map(|j| j > i || (pad_b[j] && j != i)));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    /// Mean return of sampled inference episodes every `curve_every` updates.
    pub curve: Vec<CurvePoint>,
}

/// Trains a fresh model on `ds`. `on_update(update, model, loss)` runs after
/// each update, for example to record evaluation curves.
pub fn train_with<F>(
    env: &Env,
    ds: &Dataset,
    cfg: &PidtConfig,
    seed: u64,
    mut on_update: F,
) -> Result<(PidtModel, TrainReport)>
where
    F: FnMut(usize, &PidtModel, f64) -> Result<()>,
{
    let m = &ds.manifest;
    if m.state_len != env.state_len() || m.action_count != env.action_count() || m.horizon != env.horizon() {
        return Err(Error::Dataset(format!(
            "dataset shape (state {}, actions {}, horizon {}) does not match scenario (state {}, actions {}, horizon {})",
            m.state_len,
            m.action_count,
            m.horizon,
            env.state_len(),
            env.action_count(),
            env.horizon()
        )));
    }
    if m.env_checksum != env.checksum() {
        return Err(Error::Dataset(format!(
            "dataset was collected on a different environment ({}) than {}",
            m.scenario, env.name
        )));
    }
    let mut model = PidtModel::for_env(env, cfg, seed)?;
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut sampler = ChaCha8Rng::seed_from_u64(seed);
    sampler.set_stream(1);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
    drop_rng.set_stream(2);
    let k = cfg.context.min(env.horizon());
    let mut report = TrainReport {
        losses: Vec::with_capacity(cfg.episodes),
        grad_norms: Vec::with_capacity(cfg.episodes),
        curve: Vec::new(),
    };
    let target = target_return(env);
    for update in 0..cfg.episodes {
        let mb = sample_minibatch(ds, cfg.batch_size, k, &mut sampler)?;
        let batch = TokenBatch::from_minibatch(&mb, &model);
        let mut g = Graph::new();
        let loss = model.loss(&mut g, &batch, &mb.actions, Some(&mut drop_rng))?;
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?.for_store(&model.store);
        let norm = nn::clip_global_norm(&mut grads, cfg.grad_clip);
        opt.update(&mut model.store, &grads)?;
        report.losses.push(value);
        report.grad_norms.push(norm);
        if cfg.curve_every > 0 && (update + 1) % cfg.curve_every == 0 {
            report.curve.push(CurvePoint {
                update: update + 1,
                avg_return: sampled_return(&model, env, target, cfg.curve_episodes, 0)?,
            });
        }
        on_update(update, &model, value)?;
    }
    Ok((model, report))
}

pub fn train(env: &Env, ds: &Dataset, cfg: &PidtConfig, seed: u64) -> Result<(PidtModel, TrainReport)> {
    train_with(env, ds, cfg, seed, |_, _, _| Ok(()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Greedy,
    Sample(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    /// Return-to-go conditioning this step.
    pub rtg: f64,
    pub action: usize,
    pub reward: f64,
    pub restored_kw: f64,
    pub penalty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub target_return: f64,
    pub steps: Vec<EpisodeStep>,
    pub total_return: f64,
    pub final_power: f64,
}

impl Episode {
    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| Action::from_index(s.action)).collect()
    }
}

/// Rolls the environment for its full horizon, conditioning on `target`
/// and decrementing the return-to-go by each realized reward.
pub fn infer_episode(model: &PidtModel, env: &Env, target: f64, mode: Mode) -> Result<Episode> {
    if model.dims.state_len != env.state_len() || model.dims.action_count != env.action_count() {
        return Err(Error::Model("model was built for a different scenario".into()));
    }
    if env.horizon() > model.dims.max_timestep {
        return Err(Error::Model(format!(
            "horizon {} exceeds the model's max timestep {}",
            env.horizon(),
            model.dims.max_timestep
        )));
    }
    let mut rng = match mode {
        Mode::Greedy => None,
        Mode::Sample(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    let k = model.cfg.context;
    let placeholder = model.dims.action_count;
    let mut s = env.reset()?;
    let mut rtgs: Vec<f64> = Vec::new();
    let mut states: Vec<Vec<f64>> = Vec::new();
    let mut actions: Vec<usize> = Vec::new();
    let mut rtg = target;
    let mut steps = Vec::with_capacity(env.horizon());
    let mut total = 0.0;
    for t in 0..env.horizon() {
        rtgs.push(rtg);
        states.push(env.encode_state(&s));
        actions.push(placeholder);
        let start = rtgs.len().saturating_sub(k);
        let len = rtgs.len() - start;
        let batch = TokenBatch {
            batch: 1,
            len,
            rtg: rtgs[start..].iter().map(|r| r / model.rtg_scale).collect(),
            states: states[start..].concat(),
            actions: actions[start..].to_vec(),
            timesteps: (start..=t).collect(),
            mask: vec![true; len],
        };
        let mut g = Graph::new();
        let logits = model.logits(&mut g, &batch, None)?;
        let row = &g.value(logits).data()[(len - 1) * placeholder..len * placeholder];
        let allowed = env.action_mask(&s);
        let choice = match rng.as_mut() {
            None => nn::masked_argmax(row, &allowed),
            Some(r) => Some(nn::sample_index(&nn::masked_softmax(row, &allowed), r)),
        }
        .ok_or_else(|| Error::Model("no legal action".into()))?;
        assert!(allowed[choice], "selected action {choice} is not legal");
        let tr = env.step(&s, Action::from_index(choice))?;
        *actions.last_mut().expect("current step present") = choice;
        steps.push(EpisodeStep {
            rtg,
            action: choice,
            reward: tr.reward,
            restored_kw: tr.state.restored_kw,
            penalty: tr.state.penalty,
        });
        total += tr.reward;
        rtg -= tr.reward;
        s = tr.state;
    }
    Ok(Episode {
        target_return: target,
        steps,
        total_return: total,
        final_power: s.restored_kw,
    })
}

/// Mean return of `episodes` sampled inference runs, seeds `seed..`.
pub fn sampled_return(model: &PidtModel, env: &Env, target: f64, episodes: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..episodes {
        total += infer_episode(model, env, target, Mode::Sample(seed + i as u64))?.total_return;
    }
    Ok(total / episodes.max(1) as f64)
}

/// Writes `step,loss` rows.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PidtConfig {
        PidtConfig {
            context: 3,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 16,
            ..PidtConfig::default()
        }
    }

    fn dims() -> ModelDims {
        ModelDims {
            state_len: 4,
            action_count: 3,
            max_timestep: 5,
        }
    }

    fn batch(len: usize) -> TokenBatch {
        TokenBatch {
            batch: 1,
            len,
            rtg: (0..len).map(|i| 1.0 - 0.1 * i as f64).collect(),
            states: (0..len * 4).map(|i| (i as f64 * 0.37).sin()).collect(),
            actions: (0..len).map(|i| i % 3).collect(),
            timesteps: (0..len).collect(),
            mask: vec![true; len],
        }
    }

    #[test]
    fn single_step_window_has_three_tokens() {
        let m = PidtModel::new(&tiny(), dims(), 1.0, 0).unwrap();
        let mut g = Graph::new();
        let tokens = m.embed(&mut g, &batch(1)).unwrap();
        assert_eq!(g.shape(tokens), &[3, 8]);
    }

    #[test]
    fn zero_encoders_leave_timestep_embedding() {
        let mut m = PidtModel::new(&tiny(), dims(), 1.0, 0).unwrap();
        let time = m.store.get(m.time_emb).clone();
        for id in [m.rtg_enc.w, m.rtg_enc.b, m.state_enc.w, m.state_enc.b, m.action_emb] {
            m.store.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let tokens = m.embed(&mut g, &batch(2)).unwrap();
        let v = g.value(tokens).data();
        for tok in 0..6 {
            let step = tok / 3;
            assert_eq!(&v[tok * 8..(tok + 1) * 8], &time.data()[step * 8..(step + 1) * 8]);
        }
    }

    #[test]
    fn timestep_out_of_range_is_rejected() {
        let m = PidtModel::new(&tiny(), dims(), 1.0, 0).unwrap();
        let mut b = batch(1);
        b.timesteps[0] = 5;
        assert!(matches!(m.embed(&mut Graph::new(), &b), Err(Error::Model(_))));
    }

    #[test]
    fn seeded_init_is_reproducible_and_finite() {
        let a = PidtModel::new(&tiny(), dims(), 1.0, 7).unwrap();
        let b = PidtModel::new(&tiny(), dims(), 1.0, 7).unwrap();
        let (mut ga, mut gb) = (Graph::new(), Graph::new());
        let la = a.logits(&mut ga, &batch(3), None).unwrap();
        let lb = b.logits(&mut gb, &batch(3), None).unwrap();
        assert!(ga.value(la).is_finite());
        assert_eq!(ga.value(la), gb.value(lb));
    }

    #[test]
    fn heads_must_divide_embedding() {
        let cfg = PidtConfig { heads: 3, ..tiny() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mask_keeps_diagonal_for_padding() {
        let m = attention_mask(1, 1, 3, &[true, false, false]);
        assert_eq!(m, vec![false, true, true, true, false, true, true, false, false]);
    }
}
