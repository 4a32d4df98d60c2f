//! Alternating value and policy optimization over an offline dataset.

use std::fmt::Write as _;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Scalar, Tape, Tensor, DEFAULT_LR};
use crate::env::{evaluate, Controller, Dataset, EvalReport, MazeSpec, Point};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::RunConfig;
use crate::harness::decoder::Decoder;
use crate::mixer::CausalMixerMode;
use crate::objectives::{total_loss, Advantages, LossTerms};
use crate::policy::{Conditioning, GenerationMode, GenerationOrder, PolicyModel};
use crate::rng::{stream, substream, Stream};
use crate::value::{ValueBatch, ValueModel, DEFAULT_TARGET_RATE, DEFAULT_TAU};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub target_rate: f64,
    /// Number of subgoals `H`.
    #[serde(rename = "H")]
    pub horizon: usize,
    /// Subgoal spacing in dataset steps.
    pub k: usize,
    pub seed: u64,
    pub teacher_forcing: bool,
    pub generation_order: GenerationOrder,
    pub causal_mixer_mode: CausalMixerMode,
    pub value_warmup_steps: usize,
    pub log_interval: usize,
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_steps: 50_000,
            batch_size: 256,
            lr: DEFAULT_LR,
            gamma: 0.99,
            tau: DEFAULT_TAU,
            target_rate: DEFAULT_TARGET_RATE,
            horizon: 1,
            k: 10,
            seed: 0,
            teacher_forcing: true,
            generation_order: GenerationOrder::Reverse,
            causal_mixer_mode: CausalMixerMode::Learnable,
            value_warmup_steps: 0,
            log_interval: 100,
            eval_interval: 5_000,
            checkpoint_interval: 10_000,
        }
    }
}

/// Mixture over value-batch goals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoalSampleSpec {
    pub p_current: f64,
    pub p_future: f64,
    pub p_random: f64,
}

impl Default for GoalSampleSpec {
    fn default() -> Self {
        GoalSampleSpec {
            p_current: 0.2,
            p_future: 0.5,
            p_random: 0.3,
        }
    }
}

impl GoalSampleSpec {
    pub fn validate(&self) -> Result<()> {
        let p = [self.p_current, self.p_future, self.p_random];
        if p.iter().any(|x| !(*x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "goal_sampling probabilities must be ≥ 0 and sum to 1, got {p:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GoalBranch {
    Current,
    Future,
    Random,
}

/// `Δ ∈ {1, 2, …}` with `P(Δ = j) = (1−γ)·γ^{j−1}`.
pub fn sample_geometric<R: Rng>(gamma: f64, rng: &mut R) -> usize {
    let u = 1.0 - rng.random::<f64>();
    1 + (u.ln() / gamma.ln()).floor() as usize
}

/// `min(t + i·k, T)` for `i = 1..=H`.
pub fn subgoal_indices(t: usize, traj_len: usize, horizon: usize, k: usize) -> Vec<usize> {
    (1..=horizon).map(|i| (t + i * k).min(traj_len)).collect()
}

/// Uniform draws over transitions and states of a dataset.
pub struct Sampler<'a> {
    ds: &'a Dataset,
    trans_cum: Vec<usize>,
    state_cum: Vec<usize>,
}

impl<'a> Sampler<'a> {
    pub fn new(ds: &'a Dataset) -> Result<Self> {
        let mut trans_cum = Vec::with_capacity(ds.trajectories.len());
        let mut state_cum = Vec::with_capacity(ds.trajectories.len());
        let (mut a, mut b) = (0, 0);
        let mut short = 0;
        for i in 0..ds.trajectories.len() {
            let t = ds.traj_len(i);
            if t == 0 {
                short += 1;
            }
            a += t;
            b += t + 1;
            trans_cum.push(a);
            state_cum.push(b);
        }
        if short > 0 {
            warn!("skipping {short} trajectories with fewer than 2 states");
        }
        if a == 0 {
            return Err(Error::Data("dataset has no transitions".into()));
        }
        Ok(Sampler {
            ds,
            trans_cum,
            state_cum,
        })
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.ds
    }

    pub fn n_transitions(&self) -> usize {
        *self.trans_cum.last().unwrap()
    }

    fn locate(cum: &[usize], u: usize) -> (usize, usize) {
        let i = cum.partition_point(|&c| c <= u);
        let before = if i == 0 { 0 } else { cum[i - 1] };
        (i, u - before)
    }

    /// `(trajectory, t)` with `t < T`.
    pub fn transition<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        Self::locate(&self.trans_cum, rng.random_range(0..self.n_transitions()))
    }

    /// `(trajectory, t)` with `t ≤ T`.
    pub fn state<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        Self::locate(&self.state_cum, rng.random_range(0..*self.state_cum.last().unwrap()))
    }
}

fn gather<S: Scalar>(ds: &Dataset, rows: &[(usize, usize)], action: bool) -> Tensor<S> {
    let w = if action { ds.act_dim } else { ds.obs_dim };
    let mut data = Vec::with_capacity(rows.len() * w);
    for &(i, t) in rows {
        let src = if action { ds.action(i, t) } else { ds.state(i, t) };
        data.extend(src.iter().map(|&x| S::of(x as f64)));
    }
    Tensor::new(vec![rows.len(), w], data).expect("row widths agree")
}

/// Value batch under the goal mixture. A transition is terminal with reward 0
/// exactly when the goal equals the current state, otherwise the reward is −1.
pub fn sample_value_batch<S: Scalar, R: Rng>(
    sampler: &Sampler<'_>,
    spec: &GoalSampleSpec,
    gamma: f64,
    n: usize,
    rng: &mut R,
) -> Result<(ValueBatch<S>, Vec<GoalBranch>)> {
    let ds = sampler.dataset();
    let mut s_rows = Vec::with_capacity(n);
    let mut g_rows = Vec::with_capacity(n);
    let mut branches = Vec::with_capacity(n);
    for _ in 0..n {
        let (i, t) = sampler.transition(rng);
        let u: f64 = rng.random();
        let (branch, g) = if u < spec.p_current {
            (GoalBranch::Current, (i, t))
        } else if u < spec.p_current + spec.p_future {
            let d = sample_geometric(gamma, rng);
            (GoalBranch::Future, (i, t.saturating_add(d).min(ds.traj_len(i))))
        } else {
            (GoalBranch::Random, sampler.state(rng))
        };
        s_rows.push((i, t));
        g_rows.push(g);
        branches.push(branch);
    }
    let next_rows: Vec<_> = s_rows.iter().map(|&(i, t)| (i, t + 1)).collect();
    let done: Vec<bool> = s_rows
        .iter()
        .zip(&g_rows)
        .map(|(&(i, t), &(j, u))| ds.state(i, t) == ds.state(j, u))
        .collect();
    let reward = done.iter().map(|&d| if d { S::zero() } else { S::of(-1.0) }).collect();
    Ok((
        ValueBatch {
            s: gather(ds, &s_rows, false),
            s_next: gather(ds, &next_rows, false),
            g: gather(ds, &g_rows, false),
            reward,
            done,
        },
        branches,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyRow {
    pub traj: usize,
    pub t: usize,
    /// Dataset index of `s_i`, at position `i−1`.
    pub subgoal_t: Vec<usize>,
    pub goal_t: usize,
}

#[derive(Clone, Debug)]
pub struct PolicyBatch<S> {
    pub s: Tensor<S>,
    pub a: Tensor<S>,
    pub s_next: Tensor<S>,
    /// Observation `s_i` at position `i−1`, each `[b, obs]`.
    pub subgoals: Vec<Tensor<S>>,
    pub g: Tensor<S>,
    pub rows: Vec<PolicyRow>,
}

pub fn sample_policy_batch<S: Scalar, R: Rng>(
    sampler: &Sampler<'_>,
    horizon: usize,
    k: usize,
    n: usize,
    rng: &mut R,
) -> Result<PolicyBatch<S>> {
    let ds = sampler.dataset();
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let (traj, t) = sampler.transition(rng);
        let len = ds.traj_len(traj);
        let goal_t = rng.random_range(t..=len);
        rows.push(PolicyRow {
            traj,
            t,
            subgoal_t: subgoal_indices(t, len, horizon, k),
            goal_t,
        });
    }
    let at = |f: &dyn Fn(&PolicyRow) -> usize| -> Vec<(usize, usize)> {
        rows.iter().map(|r| (r.traj, f(r))).collect()
    };
    let subgoals = (0..horizon)
        .map(|i| gather(ds, &at(&|r| r.subgoal_t[i]), false))
        .collect();
    Ok(PolicyBatch {
        s: gather(ds, &at(&|r| r.t), false),
        a: gather(ds, &at(&|r| r.t), true),
        s_next: gather(ds, &at(&|r| r.t + 1), false),
        subgoals,
        g: gather(ds, &at(&|r| r.goal_t), false),
        rows,
    })
}

/// Policy, value and optional decoder of one run.
#[derive(Clone, Debug)]
pub struct Agent<S> {
    pub policy: PolicyModel<S>,
    pub value: ValueModel<S>,
    pub decoder: Option<Decoder<S>>,
}

impl<S: Scalar> Agent<S> {
    pub fn new(run: &RunConfig, obs_dim: usize, act_dim: usize, action_bound: f64) -> Result<Self> {
        let seed = run.trainer.seed;
        let value = ValueModel::new(&run.value_config(obs_dim), &mut substream(seed, Stream::Init, 0));
        let policy = PolicyModel::new(
            &run.policy_config(obs_dim, act_dim, action_bound),
            &mut substream(seed, Stream::Init, 1),
        )?;
        let decoder = run.decoder.enabled.then(|| {
            Decoder::new(
                run.model.embed_dim,
                &run.decoder.hidden,
                obs_dim,
                &mut stream(seed, Stream::Decoder),
            )
        });
        Ok(Agent {
            policy,
            value,
            decoder,
        })
    }

    pub fn to_checkpoint(&self, step: usize, run: &RunConfig) -> Checkpoint {
        let mut c = Checkpoint::new(step, serde_json::to_value(run).expect("config serializes"));
        c.add_group("policy", &self.policy.params);
        c.add_group("value", &self.value.params);
        c.add_group("target", &self.value.target);
        if let Some(d) = &self.decoder {
            c.add_group("decoder", &d.params);
        }
        c
    }

    /// Rebuild from `run` and overwrite parameters from the checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, run: &RunConfig, maze: &MazeSpec) -> Result<Self> {
        let mut run = run.clone();
        run.decoder.enabled = ckpt.has_group("decoder");
        let mut a = Agent::new(&run, 2, 2, maze.action_bound)?;
        ckpt.restore_group("policy", &mut a.policy.params)?;
        ckpt.restore_group("value", &mut a.value.params)?;
        ckpt.restore_group("target", &mut a.value.target)?;
        if let Some(d) = &mut a.decoder {
            ckpt.restore_group("decoder", &mut d.params)?;
        }
        Ok(a)
    }

    /// Mean-mode goal-conditioned actions.
    pub fn act(&self, obs: &[Point], goals: &[Point]) -> Result<Vec<Point>> {
        let to_t = |ps: &[Point]| {
            Tensor::new(
                vec![ps.len(), 2],
                ps.iter().flat_map(|p| [S::of(p[0]), S::of(p[1])]).collect(),
            )
        };
        let e_g = self.value.embed(&to_t(goals)?)?;
        let g = self.policy.generate(
            &to_t(obs)?,
            &e_g,
            GenerationMode::Mean,
            &mut stream(0, Stream::Eval),
        )?;
        Ok(g.action
            .data()
            .chunks(2)
            .map(|c| [c[0].as_f64(), c[1].as_f64()])
            .collect())
    }
}

/// Evaluation wrapper around an agent.
pub struct AgentController<'a, S> {
    pub agent: &'a Agent<S>,
}

impl<S: Scalar> Controller for AgentController<'_, S> {
    fn act(&mut self, obs: &[Point], goals: &[Point]) -> Result<Vec<Point>> {
        self.agent.act(obs, goals)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub value_loss: f64,
    pub policy: Option<LossTerms>,
    pub decoder_loss: Option<f64>,
}

pub struct Trainer<'a, S> {
    pub run: RunConfig,
    pub maze: &'a MazeSpec,
    sampler: Sampler<'a>,
    pub agent: Agent<S>,
    pub adam_value: AdamState<S>,
    pub adam_policy: AdamState<S>,
    pub adam_decoder: Option<AdamState<S>>,
    rng_value: Pcg64,
    rng_policy: Pcg64,
    pub step: usize,
}

impl<'a, S: Scalar> Trainer<'a, S> {
    pub fn new(run: &RunConfig, ds: &'a Dataset, maze: &'a MazeSpec) -> Result<Self> {
        run.validate()?;
        if ds.obs_dim != 2 || ds.act_dim != 2 {
            return Err(Error::Data(format!(
                "dataset has obs_dim {} / act_dim {}, mazes need 2 / 2",
                ds.obs_dim, ds.act_dim
            )));
        }
        let sampler = Sampler::new(ds)?;
        if run.trainer.batch_size > sampler.n_transitions() {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {} dataset transitions",
                run.trainer.batch_size,
                sampler.n_transitions()
            )));
        }
        let agent = Agent::new(run, ds.obs_dim, ds.act_dim, maze.action_bound)?;
        let lr = run.trainer.lr;
        let seed = run.trainer.seed;
        Ok(Trainer {
            adam_value: AdamState::new(&agent.value.params, lr),
            adam_policy: AdamState::new(&agent.policy.params, lr),
            adam_decoder: agent.decoder.as_ref().map(|d| AdamState::new(&d.params, lr)),
            agent,
            run: run.clone(),
            maze,
            sampler,
            rng_value: stream(seed, Stream::ValueSampling),
            rng_policy: stream(seed, Stream::PolicySampling),
            step: 0,
        })
    }

    fn numerical(&self, e: Error) -> Error {
        match e {
            Error::Numerical(m) => Error::Numerical(format!("step {}: {m}", self.step + 1)),
            other => other,
        }
    }

    /// Expectile regression step on ψ, then the target update.
    pub fn value_update(&mut self) -> Result<f64> {
        let t = &self.run.trainer;
        let (batch, _) = sample_value_batch::<S, _>(
            &self.sampler,
            &self.run.goal_sampling,
            t.gamma,
            t.batch_size,
            &mut self.rng_value,
        )?;
        let v = &mut self.agent.value;
        let tape = Tape::new();
        let p = v.params.attach(&tape);
        let loss = v.loss(&p, &batch, t.gamma, t.tau)?;
        let lv = loss.item().as_f64();
        if !lv.is_finite() {
            return Err(Error::Numerical(format!("value loss is {lv}")));
        }
        let grads = v.params.collect_grads(&tape.backward(loss)?, &p);
        self.adam_value.step(&mut v.params, &grads)?;
        v.target_sync(t.target_rate)?;
        Ok(lv)
    }

    /// Advantage-weighted teacher-forced update on θ (and the decoder).
    pub fn policy_update(&mut self) -> Result<(LossTerms, Option<f64>)> {
        let t = &self.run.trainer;
        let h = t.horizon;
        let pb = sample_policy_batch::<S, _>(&self.sampler, h, t.k, t.batch_size, &mut self.rng_policy)?;
        let v = &self.agent.value;
        let e_g = v.embed(&pb.g)?;
        let targets = pb.subgoals.iter().map(|s| v.embed(s)).collect::<Result<Vec<_>>>()?;
        let diff = |a: &Tensor<S>, b: &Tensor<S>| -> Vec<f64> {
            a.data().iter().zip(b.data()).map(|(x, y)| (*x - *y).as_f64()).collect()
        };
        let v_s = v.evaluate(&pb.s, &e_g)?;
        let mut high = Vec::with_capacity(h);
        for s_i in &pb.subgoals {
            high.push(diff(&v.evaluate(s_i, &e_g)?, &v_s));
        }
        let e_low = targets.first().unwrap_or(&e_g);
        let low = diff(&v.evaluate(&pb.s_next, e_low)?, &v.evaluate(&pb.s, e_low)?);
        let adv = Advantages { high, low };

        let pol = &mut self.agent.policy;
        pol.lock_order();
        let tape = Tape::new();
        let p = pol.params.attach(&tape);
        let tv: Vec<_> = targets.iter().map(|x| tape.constant(x.clone())).collect();
        let cond = if t.teacher_forcing {
            Conditioning::TeacherForced
        } else {
            Conditioning::OwnPredictions
        };
        let out = pol.net.teacher_forced_logprobs(
            &p,
            &tape.constant(pb.s.clone()),
            &tape.constant(e_g),
            &tv,
            &tape.constant(pb.a.clone()),
            cond,
        )?;
        let (mut loss, terms) = total_loss(&out.logp_h, &out.logp_l, &adv, &self.run.weights)?;
        let mut dec = None;
        let dp = match &self.agent.decoder {
            Some(d) if h > 0 => {
                let dp = d.params.attach(&tape);
                let dl = d.loss(&dp, &out.hiddens, &pb.subgoals)?;
                let dv = dl.item().as_f64();
                if !dv.is_finite() {
                    return Err(Error::Numerical(format!("decoder loss is {dv}")));
                }
                dec = Some(dv);
                loss = loss.add(&dl.scale(S::of(self.run.decoder.weight)))?;
                dp
            }
            _ => Vec::new(),
        };
        let grads = tape.backward(loss)?;
        let gp = pol.params.collect_grads(&grads, &p);
        self.adam_policy.step(&mut pol.params, &gp)?;
        if let (Some(d), Some(adam)) = (&mut self.agent.decoder, &mut self.adam_decoder) {
            if !dp.is_empty() {
                let gd = d.params.collect_grads(&grads, &dp);
                adam.step(&mut d.params, &gd)?;
            }
        }
        Ok((terms, dec))
    }

    /// Value update, then (after warm-up) policy update.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let value_loss = self.value_update().map_err(|e| self.numerical(e))?;
        let (policy, decoder_loss) = if self.step >= self.run.trainer.value_warmup_steps {
            let (t, d) = self.policy_update().map_err(|e| self.numerical(e))?;
            (Some(t), d)
        } else {
            (None, None)
        };
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            value_loss,
            policy,
            decoder_loss,
        })
    }

    pub fn evaluate(&self, episodes_per_pair: usize) -> Result<EvalReport> {
        let seed = self.run.trainer.seed ^ (self.step as u64).rotate_left(32);
        evaluate(
            &mut AgentController { agent: &self.agent },
            self.maze,
            episodes_per_pair,
            seed,
        )
    }
}

/// Append-only metrics CSV.
pub struct MetricsLog {
    horizon: usize,
    text: String,
    file: Option<File>,
    rows: usize,
}

impl MetricsLog {
    pub fn header(horizon: usize) -> String {
        let mut h = String::from("step,value_loss");
        for i in 1..=horizon {
            write!(h, ",j_h_{i}").unwrap();
        }
        h.push_str(",j_l,mean_awr_weight_h,mean_awr_weight_l,success_rate\n");
        h
    }

    pub fn new(horizon: usize, path: Option<&Path>) -> Result<Self> {
        let text = Self::header(horizon);
        let file = match path {
            Some(p) => {
                let mut f = File::create(p).map_err(|e| Error::io(p, e))?;
                f.write_all(text.as_bytes()).map_err(|e| Error::io(p, e))?;
                Some(f)
            }
            None => None,
        };
        Ok(MetricsLog {
            horizon,
            text,
            file,
            rows: 0,
        })
    }

    fn push(&mut self, line: String) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| Error::io("metrics.csv", e))?;
        }
        self.text.push_str(&line);
        self.rows += 1;
        Ok(())
    }

    /// Interval averages; policy columns blank when no policy step ran.
    pub fn log(&mut self, step: usize, value_loss: f64, policy: Option<&[f64]>) -> Result<()> {
        let mut line = format!("{step},{value_loss}");
        match policy {
            Some(v) => {
                for x in v {
                    write!(line, ",{x}").unwrap();
                }
            }
            None => line.push_str(&",".repeat(self.horizon + 3)),
        }
        line.push_str(",\n");
        self.push(line)
    }

    pub fn log_eval(&mut self, step: usize, success_rate: f64) -> Result<()> {
        let blanks = ",".repeat(self.horizon + 4);
        self.push(format!("{step}{blanks},{success_rate}\n"))
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Running means over a log interval.
#[derive(Default)]
struct Accum {
    n: usize,
    value: f64,
    np: usize,
    policy: Vec<f64>,
}

impl Accum {
    fn add(&mut self, m: &StepMetrics) {
        self.n += 1;
        self.value += m.value_loss;
        if let Some(t) = &m.policy {
            let row: Vec<f64> = t
                .j_h
                .iter()
                .copied()
                .chain([t.j_l, t.mean_weight_h, t.mean_weight_l])
                .collect();
            if self.policy.is_empty() {
                self.policy = vec![0.0; row.len()];
            }
            for (a, b) in self.policy.iter_mut().zip(row) {
                *a += b;
            }
            self.np += 1;
        }
    }

    fn flush(&mut self, log: &mut MetricsLog, step: usize) -> Result<()> {
        let v = self.value / self.n.max(1) as f64;
        let p: Option<Vec<f64>> =
            (self.np > 0).then(|| self.policy.iter().map(|x| x / self.np as f64).collect());
        log.log(step, v, p.as_deref())?;
        *self = Accum::default();
        Ok(())
    }
}

pub struct TrainOutcome<S> {
    pub agent: Agent<S>,
    pub metrics_csv: String,
    /// `(step, report)` for every periodic evaluation.
    pub evals: Vec<(usize, EvalReport)>,
    /// Evaluation of the final parameters; `None` when no step ran.
    pub final_eval: Option<EvalReport>,
}

fn dump_state<S: Scalar>(agent: &Agent<S>, step: usize, run: &RunConfig) {
    eprintln!("in-memory state at step {step}:");
    eprintln!("{}", run.to_json());
    for (group, set) in [("policy", &agent.policy.params), ("value", &agent.value.params)] {
        eprintln!("{group}: {} tensors, {} values, hash {:016x}", set.len(), set.numel(), set.bit_hash());
    }
}

/// Full training run. With `out`, writes `resolved_config.json`,
/// `metrics.csv`, periodic checkpoints, `checkpoint.ckpt` and `eval.json`.
pub fn train<S: Scalar>(
    run: &RunConfig,
    ds: &Dataset,
    maze: &MazeSpec,
    out: Option<&Path>,
) -> Result<TrainOutcome<S>> {
    let mut tr = Trainer::<S>::new(run, ds, maze)?;
    let tc = run.trainer.clone();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("resolved_config.json");
        std::fs::write(&p, run.to_json()).map_err(|e| Error::io(&p, e))?;
    }
    let mpath: Option<PathBuf> = out.map(|d| d.join("metrics.csv"));
    let mut log = MetricsLog::new(tc.horizon, mpath.as_deref())?;
    let mut acc = Accum::default();
    let mut evals = Vec::new();
    let save = |tr: &Trainer<S>, name: &str| -> Result<()> {
        if let Some(dir) = out {
            let res = tr.agent.to_checkpoint(tr.step, &tr.run).save(&dir.join(name));
            if res.is_err() {
                dump_state(&tr.agent, tr.step, &tr.run);
            }
            res?;
        }
        Ok(())
    };

    while tr.step < tc.n_steps {
        let m = match tr.train_step() {
            Ok(m) => m,
            Err(e) => {
                if let (Error::Numerical(_), Some(dir)) = (&e, out) {
                    let p = dir.join("last_good.ckpt");
                    tr.agent.to_checkpoint(tr.step, &tr.run).save(&p)?;
                    return Err(Error::Numerical(format!("{e}; last good parameters in {}", p.display())));
                }
                return Err(e);
            }
        };
        acc.add(&m);
        let s = m.step;
        if s % tc.log_interval == 0 {
            acc.flush(&mut log, s)?;
        }
        if s % tc.eval_interval == 0 {
            let r = tr.evaluate(run.eval.episodes_per_pair)?;
            info!("step {s}: success {:.1}%", r.mean);
            log.log_eval(s, r.mean)?;
            evals.push((s, r));
        }
        if s % tc.checkpoint_interval == 0 {
            save(&tr, &format!("checkpoint_{s:07}.ckpt"))?;
        }
    }

    let final_eval = if tc.n_steps == 0 {
        None
    } else {
        match evals.last() {
            Some((s, r)) if *s == tr.step => Some(r.clone()),
            _ => Some(tr.evaluate(run.eval.episodes_per_pair)?),
        }
    };
    if let Some(dir) = out {
        save(&tr, "checkpoint.ckpt")?;
        if let Some(r) = &final_eval {
            let p = dir.join("eval.json");
            std::fs::write(&p, serde_json::to_string_pretty(r)?).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(TrainOutcome {
        agent: tr.agent,
        metrics_csv: log.text().to_string(),
        evals,
        final_eval,
    })
}
