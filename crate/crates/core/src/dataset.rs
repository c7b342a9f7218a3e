//! Offline trajectories: random-walk collection, return-to-go labels,
//! storage and minibatch sampling.
//!
//! A dataset directory holds `manifest.json` and `trajectories.jsonl`, one
//! trajectory per line. Floats are written in shortest round-trip form, so
//! a dataset collected twice with the same seed is byte-identical and reads
//! back bit-exactly.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Env};
use crate::error::{Error, Result};

pub const FORMAT: &str = "dsr-dataset";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub rtg: f64,
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub scenario: String,
    pub seed: u64,
    pub episode: u64,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| Action::from_index(s.action)).collect()
    }

    pub fn total_return(&self) -> f64 {
        self.steps.first().map_or(0.0, |s| s.rtg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub scenario: String,
    pub env_checksum: String,
    pub trajectories: usize,
    pub horizon: usize,
    pub action_count: usize,
    pub state_len: usize,
    /// Collection seed; `None` for imported data.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub trajectories: Vec<Trajectory>,
}

/// Suffix sums of `rewards`, accumulated right to left.
pub fn label_returns(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, &r) in rewards.iter().enumerate().rev() {
        acc = if i + 1 == rewards.len() { r } else { r + acc };
        out[i] = acc;
    }
    out
}

/// Generator for one episode, independent of how many episodes precede it.
pub fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

/// Runs one uniformly random legal walk to the horizon.
pub fn random_walk(env: &Env, seed: u64, episode: u64) -> Result<Trajectory> {
    let mut rng = episode_rng(seed, episode);
    let mut s = env.reset()?;
    let mut states = Vec::with_capacity(env.horizon());
    let mut actions = Vec::with_capacity(env.horizon());
    let mut rewards = Vec::with_capacity(env.horizon());
    for _ in 0..env.horizon() {
        let legal = env.legal_actions(&s);
        let a = legal[rng.gen_range(0..legal.len())];
        states.push(env.encode_state(&s));
        let tr = env.step(&s, a)?;
        actions.push(a.index());
        rewards.push(tr.reward);
        s = tr.state;
    }
    Ok(assemble(env, seed, episode, states, actions, rewards))
}

fn assemble(
    env: &Env,
    seed: u64,
    episode: u64,
    states: Vec<Vec<f64>>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
) -> Trajectory {
    let rtg = label_returns(&rewards);
    let steps = states
        .into_iter()
        .zip(actions)
        .zip(rewards)
        .zip(rtg)
        .map(|(((state, action), reward), rtg)| Step {
            rtg,
            state,
            action,
            reward,
        })
        .collect();
    Trajectory {
        scenario: env.name.clone(),
        seed,
        episode,
        steps,
    }
}

/// Builds a labelled trajectory by replaying a fixed action sequence.
pub fn trajectory_from_actions(env: &Env, actions: &[Action], seed: u64, episode: u64) -> Result<Trajectory> {
    if actions.len() != env.horizon() {
        return Err(Error::Dataset(format!(
            "sequence has {} actions, horizon is {}",
            actions.len(),
            env.horizon()
        )));
    }
    let mut s = env.reset()?;
    let mut states = Vec::new();
    let mut rewards = Vec::new();
    for &a in actions {
        states.push(env.encode_state(&s));
        let tr = env.step(&s, a)?;
        rewards.push(tr.reward);
        s = tr.state;
    }
    Ok(assemble(
        env,
        seed,
        episode,
        states,
        actions.iter().map(|a| a.index()).collect(),
        rewards,
    ))
}

pub fn collect_random_walks(env: &Env, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Dataset("trajectory count must be at least 1".into()));
    }
    let trajectories = (0..n as u64)
        .map(|ep| random_walk(env, seed, ep))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: manifest(env, trajectories.len(), Some(seed)),
        trajectories,
    })
}

fn manifest(env: &Env, count: usize, seed: Option<u64>) -> DatasetManifest {
    DatasetManifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        scenario: env.name.clone(),
        env_checksum: env.checksum(),
        trajectories: count,
        horizon: env.horizon(),
        action_count: env.action_count(),
        state_len: env.state_len(),
        seed,
    }
}

fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory =
            serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(t);
    }
    Ok(out)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::json(&manifest_path, e))?;
        fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;

        let path = dir.join(TRAJECTORIES_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for t in &self.trajectories {
            serde_json::to_writer(&mut w, t).map_err(|e| Error::json(&path, e))?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
        if manifest.format != FORMAT || manifest.version != FORMAT_VERSION {
            return Err(Error::Dataset(format!(
                "{}: unsupported format {} v{}",
                manifest_path.display(),
                manifest.format,
                manifest.version
            )));
        }
        let trajectories = read_trajectories(&dir.join(TRAJECTORIES_FILE))?;
        if trajectories.len() != manifest.trajectories {
            return Err(Error::Dataset(format!(
                "manifest lists {} trajectories, found {}",
                manifest.trajectories,
                trajectories.len()
            )));
        }
        let ds = Self { manifest, trajectories };
        ds.check_shape()?;
        Ok(ds)
    }

    /// Reads externally authored trajectories in the `trajectories.jsonl`
    /// format and checks them against `env` before accepting them.
    pub fn import(env: &Env, jsonl: &Path) -> Result<Self> {
        let trajectories = read_trajectories(jsonl)?;
        let ds = Self {
            manifest: manifest(env, trajectories.len(), None),
            trajectories,
        };
        ds.check_shape()?;
        ds.verify_returns()?;
        ds.verify_replay(env)?;
        Ok(ds)
    }

    fn check_shape(&self) -> Result<()> {
        let m = &self.manifest;
        for (i, t) in self.trajectories.iter().enumerate() {
            if t.steps.len() != m.horizon {
                return Err(Error::Dataset(format!(
                    "trajectory {i}: length {} != horizon {}",
                    t.steps.len(),
                    m.horizon
                )));
            }
            for (j, s) in t.steps.iter().enumerate() {
                if s.state.len() != m.state_len || s.action >= m.action_count {
                    return Err(Error::Dataset(format!(
                        "trajectory {i} step {j}: state or action out of shape"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks `R̂_t = r_t + R̂_{t+1}` and `R̂_T = r_T` exactly.
    pub fn verify_returns(&self) -> Result<()> {
        for (i, t) in self.trajectories.iter().enumerate() {
            let n = t.steps.len();
            for j in 0..n {
                let expect = if j + 1 == n {
                    t.steps[j].reward
                } else {
                    t.steps[j].reward + t.steps[j + 1].rtg
                };
                if t.steps[j].rtg.to_bits() != expect.to_bits() {
                    return Err(Error::Dataset(format!(
                        "trajectory {i} step {j}: return-to-go breaks telescoping"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Re-executes every trajectory and compares states and rewards bitwise.
    pub fn verify_replay(&self, env: &Env) -> Result<()> {
        for (i, t) in self.trajectories.iter().enumerate() {
            let mut s = env.reset()?;
            for (j, step) in t.steps.iter().enumerate() {
                let a = Action::from_index(step.action);
                if !env.legal_actions(&s).contains(&a) {
                    return Err(Error::Dataset(format!(
                        "trajectory {i} step {j}: action {} is not legal",
                        step.action
                    )));
                }
                let encoded = env.encode_state(&s);
                if encoded.len() != step.state.len()
                    || encoded.iter().zip(&step.state).any(|(a, b)| a.to_bits() != b.to_bits())
                {
                    return Err(Error::Dataset(format!(
                        "trajectory {i} step {j}: stored state differs from replay"
                    )));
                }
                let tr = env.step(&s, a)?;
                if tr.reward.to_bits() != step.reward.to_bits() {
                    return Err(Error::Dataset(format!(
                        "trajectory {i} step {j}: stored reward {} but replay gives {}",
                        step.reward, tr.reward
                    )));
                }
                s = tr.state;
            }
        }
        Ok(())
    }
}

/// Context windows stacked row-major: `[batch, k]` for scalars and
/// `[batch, k, state_len]` for states. Windows are left-padded; `mask`
/// marks real steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    pub batch: usize,
    pub k: usize,
    pub state_len: usize,
    pub rtg: Vec<f64>,
    pub states: Vec<f64>,
    pub actions: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub mask: Vec<bool>,
    /// (trajectory index, end step) per window.
    pub picks: Vec<(usize, usize)>,
}

/// Samples `b` windows of up to `k` steps, each ending at a uniformly chosen
/// step. The earliest eligible end step is `k - 1` (clipped to the
/// trajectory), so `k` equal to the trajectory length always yields whole
/// trajectories.
pub fn sample_minibatch<R: Rng>(ds: &Dataset, b: usize, k: usize, rng: &mut R) -> Result<Minibatch> {
    if ds.is_empty() {
        return Err(Error::Dataset("cannot sample from an empty dataset".into()));
    }
    if b == 0 || k == 0 {
        return Err(Error::Dataset("batch size and context length must be positive".into()));
    }
    let state_len = ds.manifest.state_len;
    let mut mb = Minibatch {
        batch: b,
        k,
        state_len,
        rtg: vec![0.0; b * k],
        states: vec![0.0; b * k * state_len],
        actions: vec![0; b * k],
        timesteps: vec![0; b * k],
        mask: vec![false; b * k],
        picks: Vec::with_capacity(b),
    };
    for row in 0..b {
        let ti = rng.gen_range(0..ds.len());
        let steps = &ds.trajectories[ti].steps;
        if steps.is_empty() {
            return Err(Error::Dataset(format!("trajectory {ti} is empty")));
        }
        let first_end = k.min(steps.len()) - 1;
        let end = rng.gen_range(first_end..steps.len());
        let start = (end + 1).saturating_sub(k);
        let len = end + 1 - start;
        let pad = k - len;
        for (j, step) in steps[start..=end].iter().enumerate() {
            let slot = row * k + pad + j;
            mb.rtg[slot] = step.rtg;
            mb.actions[slot] = step.action;
            mb.timesteps[slot] = start + j;
            mb.mask[slot] = true;
            mb.states[slot * state_len..(slot + 1) * state_len].copy_from_slice(&step.state);
        }
        mb.picks.push((ti, end));
    }
    Ok(mb)
}

pub fn sample_minibatch_seeded(ds: &Dataset, b: usize, k: usize, seed: u64) -> Result<Minibatch> {
    sample_minibatch(ds, b, k, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::MdpConfig;
    use crate::grid::testing::chain;

    fn env(loads: &[f64], horizon: usize) -> Env {
        Env::from_parts(
            "chain",
            chain(loads),
            MdpConfig {
                horizon,
                ..MdpConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn suffix_sums() {
        assert_eq!(label_returns(&[1.0, 2.0, 3.0]), vec![6.0, 5.0, 3.0]);
        assert_eq!(label_returns(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(label_returns(&[4.5]), vec![4.5]);
        assert!(label_returns(&[]).is_empty());
    }

    #[test]
    fn single_cell_walk_is_all_noop() {
        let e = env(&[60.0], 4);
        let ds = collect_random_walks(&e, 1, 9).unwrap();
        let t = &ds.trajectories[0];
        assert!(t.steps.iter().all(|s| s.action == 0));
        assert_eq!(t.steps[0].rtg, 4.0 * 60.0);
    }

    #[test]
    fn full_windows_when_k_is_horizon() {
        let e = env(&[1.0, 2.0, 3.0], 3);
        let ds = collect_random_walks(&e, 20, 1).unwrap();
        let mb = sample_minibatch_seeded(&ds, 16, 3, 5).unwrap();
        assert!(mb.mask.iter().all(|&m| m));
        assert!(mb.picks.iter().all(|&(_, end)| end == 2));
    }

    #[test]
    fn unit_windows() {
        let e = env(&[1.0, 2.0, 3.0], 3);
        let ds = collect_random_walks(&e, 5, 1).unwrap();
        let mb = sample_minibatch_seeded(&ds, 32, 1, 2).unwrap();
        assert!(mb.mask.iter().all(|&m| m));
        for (row, &(ti, end)) in mb.picks.iter().enumerate() {
            assert_eq!(mb.rtg[row], ds.trajectories[ti].steps[end].rtg);
            assert_eq!(mb.timesteps[row], end);
        }
    }

    #[test]
    fn short_trajectories_are_left_padded() {
        let e = env(&[1.0, 2.0], 2);
        let ds = collect_random_walks(&e, 3, 4).unwrap();
        let mb = sample_minibatch_seeded(&ds, 4, 4, 0).unwrap();
        for row in 0..4 {
            assert_eq!(&mb.mask[row * 4..row * 4 + 4], &[false, false, true, true]);
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let e = env(&[1.0], 1);
        let mut ds = collect_random_walks(&e, 1, 0).unwrap();
        ds.trajectories.clear();
        assert!(sample_minibatch_seeded(&ds, 1, 1, 0).is_err());
    }
}
