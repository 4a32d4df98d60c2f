//! Unified hierarchical policy: a chain of latent subgoals followed by an
//! action, all produced by one mixer backbone over a fixed token layout
//!
//! ```text
//! [e_o, e_g, z_H, …, z_1, z_a]
//! ```
//!
//! where unfilled subgoal slots and the action slot hold learnable
//! placeholder tokens.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::mixer::{MixerBackbone, MixerConfig};
use crate::nn::{dims, Mlp};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationOrder {
    /// Farthest subgoal first.
    #[default]
    Reverse,
    /// Nearest subgoal first.
    Forward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenerationMode {
    Mean,
    Sample,
}

/// What conditions later prediction steps during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// Dataset subgoal embeddings.
    TeacherForced,
    /// The policy's own (detached) subgoal means.
    OwnPredictions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub action_bound: f64,
    pub mixer: MixerConfig,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub generation_order: GenerationOrder,
}

impl PolicyConfig {
    pub fn new(obs_dim: usize, act_dim: usize, embed_dim: usize, horizon: usize) -> Self {
        PolicyConfig {
            obs_dim,
            act_dim,
            action_bound: 0.25,
            mixer: MixerConfig::new(embed_dim, horizon),
            encoder_hidden: vec![64],
            head_hidden: vec![64],
            generation_order: GenerationOrder::Reverse,
        }
    }

    pub fn horizon(&self) -> usize {
        self.mixer.horizon
    }

    pub fn embed_dim(&self) -> usize {
        self.mixer.embed_dim
    }

    /// Token index of subgoal `i` (1-based, `z_1` nearest).
    pub fn subgoal_slot(&self, i: usize) -> usize {
        2 + self.horizon() - i
    }

    pub fn action_slot(&self) -> usize {
        self.horizon() + 2
    }

    /// Subgoal indices in prediction order.
    pub fn step_order(&self) -> Vec<usize> {
        let h = self.horizon();
        match self.generation_order {
            GenerationOrder::Reverse => (1..=h).rev().collect(),
            GenerationOrder::Forward => (1..=h).collect(),
        }
    }
}

/// Network layout; parameters live in a separate [`ParamSet`].
#[derive(Clone, Debug)]
pub struct PolicyNet {
    pub config: PolicyConfig,
    state_encoder: Mlp,
    /// Placeholder for `z_i` at index `i−1`.
    subgoal_tokens: Vec<ParamId>,
    action_token: ParamId,
    backbone: MixerBackbone,
    subgoal_head: Mlp,
    subgoal_log_std: ParamId,
    action_head: Mlp,
    action_log_std: ParamId,
}

/// Values recorded at one prediction step.
#[derive(Clone, Debug)]
pub struct TraceStep<S> {
    /// Subgoal index `i`, or 0 for the action step.
    pub index: usize,
    pub tokens: Tensor<S>,
    pub hidden: Tensor<S>,
    pub mean: Tensor<S>,
    pub output: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct GenerationTrace<S> {
    /// `H+1` entries in execution order, action last.
    pub steps: Vec<TraceStep<S>>,
    pub action_log_std: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct Generation<S> {
    /// `z_1 … z_H` at indices `0 … H−1`, each `[b, d]`.
    pub subgoals: Vec<Tensor<S>>,
    /// Clipped action `[b, act]`.
    pub action: Tensor<S>,
    pub trace: GenerationTrace<S>,
}

/// Teacher-forced log-likelihoods, all `[b]`.
pub struct ForcedLogProbs<'t, S> {
    /// `log N(e_{s_i}; μ_i, σ)` at index `i−1`.
    pub logp_h: Vec<Var<'t, S>>,
    pub logp_l: Var<'t, S>,
    /// Backbone output at the slot of `z_i`, index `i−1`.
    pub hiddens: Vec<Var<'t, S>>,
    /// Per-step conditioning tokens fed into each subgoal slot, index `i−1`
    /// of the outer vector is the step predicting `z_i`.
    pub conditioning: Vec<Vec<Option<Tensor<S>>>>,
}

impl<'t, S: Scalar> ForcedLogProbs<'t, S> {
    /// `Σ_i logp_h[i] + logp_l`, the log-likelihood of the whole chain.
    pub fn joint(&self) -> Result<Var<'t, S>> {
        let mut acc = self.logp_l;
        for l in &self.logp_h {
            acc = acc.add(l)?;
        }
        Ok(acc)
    }
}

impl PolicyNet {
    pub fn new<S: Scalar, R: Rng>(
        params: &mut ParamSet<S>,
        config: &PolicyConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = config;
        if c.obs_dim == 0 || c.act_dim == 0 {
            return Err(Error::Config("obs_dim and act_dim must be positive".into()));
        }
        if !(c.action_bound > 0.0) {
            return Err(Error::Config(format!("action_bound {} must be > 0", c.action_bound)));
        }
        let d = c.embed_dim();
        let state_encoder = Mlp::new(params, "state_encoder", &dims(c.obs_dim, &c.encoder_hidden, d), rng);
        let mut token = |params: &mut ParamSet<S>, name: String| {
            let a = 1.0 / (d as f64).sqrt();
            let v = (0..d).map(|_| S::of(rng.random_range(-a..a))).collect();
            params.add(name, Tensor::vector(v))
        };
        let subgoal_tokens = (1..=c.horizon())
            .map(|i| token(params, format!("token.z{i}")))
            .collect();
        let action_token = token(params, "token.a".into());
        let backbone = MixerBackbone::new(params, "backbone", &c.mixer, rng)?;
        let subgoal_head = Mlp::new(params, "subgoal_head", &dims(d, &c.head_hidden, d), rng);
        let subgoal_log_std = params.add("subgoal_head.log_std", Tensor::zeros(&[d]));
        let action_head = Mlp::new(params, "action_head", &dims(d, &c.head_hidden, c.act_dim), rng);
        let action_log_std = params.add("action_head.log_std", Tensor::zeros(&[c.act_dim]));
        Ok(PolicyNet {
            config: config.clone(),
            state_encoder,
            subgoal_tokens,
            action_token,
            backbone,
            subgoal_head,
            subgoal_log_std,
            action_head,
            action_log_std,
        })
    }

    pub fn backbone(&self) -> &MixerBackbone {
        &self.backbone
    }

    pub fn subgoal_token(&self, i: usize) -> ParamId {
        self.subgoal_tokens[i - 1]
    }

    pub fn action_token(&self) -> ParamId {
        self.action_token
    }

    pub fn subgoal_log_std(&self) -> ParamId {
        self.subgoal_log_std
    }

    pub fn action_log_std(&self) -> ParamId {
        self.action_log_std
    }

    /// `φ_o`: `[b, obs] → [b, d]`.
    pub fn encode_state<'t, S: Scalar>(&self, p: &[Var<'t, S>], s: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.state_encoder.forward(p, s)
    }

    /// Token sequence with `filled[i−1]` in the slot of `z_i` when present,
    /// the placeholder otherwise.
    pub fn assemble<'t, S: Scalar>(
        &self,
        p: &[Var<'t, S>],
        e_o: &Var<'t, S>,
        e_g: &Var<'t, S>,
        filled: &[Option<Var<'t, S>>],
    ) -> Result<Var<'t, S>> {
        let h = self.config.horizon();
        if filled.len() != h {
            return Err(Error::Shape(format!("{} subgoal slots given, H = {h}", filled.len())));
        }
        let b = e_o.shape()[0];
        let mut tokens = Vec::with_capacity(h + 3);
        tokens.push(*e_o);
        tokens.push(*e_g);
        for i in (1..=h).rev() {
            tokens.push(match filled[i - 1] {
                Some(z) => z,
                None => p[self.subgoal_token(i)].broadcast_rows(b)?,
            });
        }
        tokens.push(p[self.action_token].broadcast_rows(b)?);
        Var::stack(&tokens)
    }

    /// Input for prediction step `i` under reverse order: `generated` holds
    /// `z_{i+1} … z_H`; `i = 0` is the action step.
    pub fn assemble_input<'t, S: Scalar>(
        &self,
        p: &[Var<'t, S>],
        i: usize,
        e_o: &Var<'t, S>,
        e_g: &Var<'t, S>,
        generated: &[Var<'t, S>],
    ) -> Result<Var<'t, S>> {
        let h = self.config.horizon();
        if i > h || generated.len() != h - i {
            return Err(Error::Integrity(format!(
                "step {i} with {} generated subgoals, H = {h}",
                generated.len()
            )));
        }
        let mut filled = vec![None; h];
        for (j, z) in generated.iter().enumerate() {
            filled[i + j] = Some(*z);
        }
        self.assemble(p, e_o, e_g, &filled)
    }

    /// Backbone output at subgoal slot `i` and the head mean.
    fn subgoal_step<'t, S: Scalar>(
        &self,
        p: &[Var<'t, S>],
        seq: &Var<'t, S>,
        i: usize,
    ) -> Result<(Var<'t, S>, Var<'t, S>)> {
        let hs = self.backbone.forward(p, seq)?;
        let hidden = hs.select(self.config.subgoal_slot(i))?;
        let mean = self.subgoal_head.forward(p, &hidden)?;
        Ok((hidden, mean))
    }

    fn action_step<'t, S: Scalar>(
        &self,
        p: &[Var<'t, S>],
        seq: &Var<'t, S>,
    ) -> Result<(Var<'t, S>, Var<'t, S>)> {
        let hs = self.backbone.forward(p, seq)?;
        let hidden = hs.select(self.config.action_slot())?;
        let mean = self.action_head.forward(p, &hidden)?;
        Ok((hidden, mean))
    }

    /// Autoregressive generation of the subgoal chain and the action.
    pub fn generate<'t, S: Scalar, R: Rng>(
        &self,
        p: &[Var<'t, S>],
        s: &Var<'t, S>,
        e_g: &Var<'t, S>,
        mode: GenerationMode,
        rng: &mut R,
    ) -> Result<Generation<S>> {
        let h = self.config.horizon();
        let e_o = self.encode_state(p, s)?;
        let mut filled: Vec<Option<Var<'t, S>>> = vec![None; h];
        let mut steps = Vec::with_capacity(h + 1);
        let sample = |mean: &Tensor<S>, log_std: &Tensor<S>, rng: &mut R| -> Tensor<S> {
            match mode {
                GenerationMode::Mean => mean.clone(),
                GenerationMode::Sample => {
                    let d = log_std.len();
                    let mut out = mean.clone();
                    for (j, x) in out.data_mut().iter_mut().enumerate() {
                        let ls = log_std.data()[j % d]
                            .max(S::of(crate::autodiff::LOG_STD_MIN))
                            .min(S::of(crate::autodiff::LOG_STD_MAX));
                        let n: f64 = rng.sample(StandardNormal);
                        *x += ls.exp() * S::of(n);
                    }
                    out
                }
            }
        };
        let check = |t: &Tensor<S>, step: usize, what: &str| -> Result<()> {
            if t.all_finite() {
                Ok(())
            } else {
                Err(Error::Generation {
                    step,
                    msg: format!("non-finite {what} head output"),
                })
            }
        };
        let sg_ls = p[self.subgoal_log_std].value();
        for i in self.config.step_order() {
            let seq = self.assemble(p, &e_o, e_g, &filled)?;
            let (hidden, mean) = self.subgoal_step(p, &seq, i)?;
            let mean_v = mean.value();
            check(&mean_v, i, "subgoal")?;
            let z = sample(&mean_v, &sg_ls, rng);
            filled[i - 1] = Some(e_o.tape().constant(z.clone()));
            steps.push(TraceStep {
                index: i,
                tokens: seq.value(),
                hidden: hidden.value(),
                mean: mean_v,
                output: z,
            });
        }
        let seq = self.assemble(p, &e_o, e_g, &filled)?;
        let (hidden, mean) = self.action_step(p, &seq)?;
        let mean_v = mean.value();
        check(&mean_v, 0, "action")?;
        let a_ls = p[self.action_log_std].value();
        let raw = sample(&mean_v, &a_ls, rng);
        let bound = S::of(self.config.action_bound);
        let action = raw.map(|x| x.max(-bound).min(bound));
        steps.push(TraceStep {
            index: 0,
            tokens: seq.value(),
            hidden: hidden.value(),
            mean: mean_v,
            output: raw,
        });
        let subgoals = filled
            .into_iter()
            .map(|z| z.expect("every slot generated").value())
            .collect();
        Ok(Generation {
            subgoals,
            action,
            trace: GenerationTrace {
                steps,
                action_log_std: a_ls,
            },
        })
    }

    /// Training-time log-likelihoods of dataset subgoal embeddings
    /// `targets[i−1] = e_{s_i}` and dataset actions. Targets are detached.
    pub fn teacher_forced_logprobs<'t, S: Scalar>(
        &self,
        p: &[Var<'t, S>],
        s: &Var<'t, S>,
        e_g: &Var<'t, S>,
        targets: &[Var<'t, S>],
        action: &Var<'t, S>,
        conditioning: Conditioning,
    ) -> Result<ForcedLogProbs<'t, S>> {
        let h = self.config.horizon();
        if targets.len() != h {
            return Err(Error::Config(format!(
                "{} subgoal targets for a policy with H = {h}",
                targets.len()
            )));
        }
        let targets: Vec<Var<'t, S>> = targets.iter().map(|t| t.detach()).collect();
        let e_o = self.encode_state(p, s)?;
        let order = self.config.step_order();
        let b = e_o.shape()[0];
        let mut hiddens: Vec<Option<Var<'t, S>>> = vec![None; h];
        let mut logp_h: Vec<Option<Var<'t, S>>> = vec![None; h];
        let mut cond_log = vec![Vec::new(); h];
        let sg_ls = p[self.subgoal_log_std];
        let logp_l;

        match conditioning {
            Conditioning::TeacherForced => {
                // every step's input is known up front: one batched backbone pass
                let mut filled: Vec<Option<Var<'t, S>>> = vec![None; h];
                let mut seqs = Vec::with_capacity(h + 1);
                for &i in &order {
                    cond_log[i - 1] = filled.iter().map(|z| z.map(|v: Var<'t, S>| v.value())).collect();
                    seqs.push(self.assemble(p, &e_o, e_g, &filled)?);
                    filled[i - 1] = Some(targets[i - 1]);
                }
                seqs.push(self.assemble(p, &e_o, e_g, &filled)?);
                let all = self.backbone.forward(p, &Var::cat0(&seqs)?)?;
                for (n, &i) in order.iter().enumerate() {
                    let hidden = all.slice0(n * b, b)?.select(self.config.subgoal_slot(i))?;
                    let mean = self.subgoal_head.forward(p, &hidden)?;
                    logp_h[i - 1] = Some(mean.gaussian_log_prob(&sg_ls, &targets[i - 1])?);
                    hiddens[i - 1] = Some(hidden);
                }
                let hidden = all.slice0(h * b, b)?.select(self.config.action_slot())?;
                let mean = self.action_head.forward(p, &hidden)?;
                logp_l = mean.gaussian_log_prob(&p[self.action_log_std], action)?;
            }
            Conditioning::OwnPredictions => {
                let mut filled: Vec<Option<Var<'t, S>>> = vec![None; h];
                for &i in &order {
                    cond_log[i - 1] = filled.iter().map(|z| z.map(|v: Var<'t, S>| v.value())).collect();
                    let seq = self.assemble(p, &e_o, e_g, &filled)?;
                    let (hidden, mean) = self.subgoal_step(p, &seq, i)?;
                    logp_h[i - 1] = Some(mean.gaussian_log_prob(&sg_ls, &targets[i - 1])?);
                    hiddens[i - 1] = Some(hidden);
                    filled[i - 1] = Some(mean.detach());
                }
                let seq = self.assemble(p, &e_o, e_g, &filled)?;
                let (_, mean) = self.action_step(p, &seq)?;
                logp_l = mean.gaussian_log_prob(&p[self.action_log_std], action)?;
            }
        }
        Ok(ForcedLogProbs {
            logp_h: logp_h.into_iter().map(|v| v.unwrap()).collect(),
            logp_l,
            hiddens: hiddens.into_iter().map(|v| v.unwrap()).collect(),
            conditioning: cond_log,
        })
    }
}

/// Policy network, its parameters, and the order lock.
#[derive(Clone, Debug)]
pub struct PolicyModel<S> {
    pub net: PolicyNet,
    pub params: ParamSet<S>,
    order_locked: bool,
}

impl<S: Scalar> PolicyModel<S> {
    pub fn new<R: Rng>(config: &PolicyConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let net = PolicyNet::new(&mut params, config, rng)?;
        Ok(PolicyModel {
            net,
            params,
            order_locked: false,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.net.config
    }

    pub fn set_generation_order(&mut self, order: GenerationOrder) -> Result<()> {
        if self.order_locked && order != self.net.config.generation_order {
            return Err(Error::Config(
                "generation order cannot change once training has started".into(),
            ));
        }
        self.net.config.generation_order = order;
        Ok(())
    }

    /// Called by the trainer before the first update.
    pub fn lock_order(&mut self) {
        self.order_locked = true;
    }

    /// Generation on frozen parameters from plain tensors.
    pub fn generate<R: Rng>(
        &self,
        s: &Tensor<S>,
        e_g: &Tensor<S>,
        mode: GenerationMode,
        rng: &mut R,
    ) -> Result<Generation<S>> {
        let tape = Tape::new();
        let p = self.params.attach_const(&tape);
        self.net
            .generate(&p, &tape.constant(s.clone()), &tape.constant(e_g.clone()), mode, rng)
    }
}
