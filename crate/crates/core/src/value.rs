//! Goal-conditioned state value with embedded goals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{dims, Mlp};

pub const DEFAULT_TAU: f64 = 0.7;
pub const DEFAULT_TARGET_RATE: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueConfig {
    pub obs_dim: usize,
    pub embed_dim: usize,
    pub goal_encoder_hidden: Vec<usize>,
    pub hidden: Vec<usize>,
}

impl ValueConfig {
    pub fn new(obs_dim: usize, embed_dim: usize) -> Self {
        ValueConfig {
            obs_dim,
            embed_dim,
            goal_encoder_hidden: vec![64],
            hidden: vec![64, 64],
        }
    }
}

/// Network layout; parameters live in a separate [`ParamSet`].
#[derive(Clone, Debug)]
pub struct ValueNet {
    pub config: ValueConfig,
    goal_encoder: Mlp,
    value_mlp: Mlp,
}

impl ValueNet {
    pub fn new<S: Scalar, R: Rng>(params: &mut ParamSet<S>, config: &ValueConfig, rng: &mut R) -> Self {
        let c = config;
        let goal_encoder = Mlp::new(
            params,
            "goal_encoder",
            &dims(c.obs_dim, &c.goal_encoder_hidden, c.embed_dim),
            rng,
        );
        let value_mlp = Mlp::new(
            params,
            "value_mlp",
            &dims(c.obs_dim + c.embed_dim, &c.hidden, 1),
            rng,
        );
        ValueNet {
            config: config.clone(),
            goal_encoder,
            value_mlp,
        }
    }

    /// `[b, obs] → [b, d]`.
    pub fn embed_goal<'t, S: Scalar>(&self, p: &[Var<'t, S>], g: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.goal_encoder.forward(p, g)
    }

    /// `([b, obs], [b, d]) → [b]`.
    pub fn value<'t, S: Scalar>(
        &self,
        p: &[Var<'t, S>],
        s: &Var<'t, S>,
        e_g: &Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let b = s.shape()[0];
        self.value_mlp.forward(p, &s.concat(e_g)?)?.reshape(&[b])
    }
}

/// One value-regression batch. `done[j]` marks `s[j]` as already at `g[j]`,
/// in which case `reward[j]` is 0 and nothing is bootstrapped.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueBatch<S> {
    pub s: Tensor<S>,
    pub s_next: Tensor<S>,
    pub g: Tensor<S>,
    pub reward: Vec<S>,
    pub done: Vec<bool>,
}

impl<S: Scalar> ValueBatch<S> {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }
}

/// Mean expectile TD loss. `p` are the online parameters on the tape, `target`
/// the target parameters (attached as constants). The goal embedding inside the
/// bootstrap term comes from the online encoder, detached.
pub fn value_loss<'t, S: Scalar>(
    net: &ValueNet,
    p: &[Var<'t, S>],
    target: &[Var<'t, S>],
    batch: &ValueBatch<S>,
    gamma: f64,
    tau: f64,
) -> Result<Var<'t, S>> {
    crate::autodiff::check_tau(tau)?;
    let tape = p
        .first()
        .ok_or_else(|| Error::Shape("value_loss with no parameters".into()))?
        .tape();
    let n = batch.len();
    if batch.s.shape()[0] != n || batch.s_next.shape()[0] != n || batch.g.shape()[0] != n {
        return Err(Error::Shape(format!(
            "value batch: s {:?}, s' {:?}, g {:?}, {} rewards",
            batch.s.shape(),
            batch.s_next.shape(),
            batch.g.shape(),
            n
        )));
    }
    let g = tape.constant(batch.g.clone());
    let e_g = net.embed_goal(p, &g)?;
    let v_next = net
        .value(target, &tape.constant(batch.s_next.clone()), &e_g.detach())?
        .value();
    let y = td_targets(batch, v_next.data(), gamma);
    regress(net, p, batch, &e_g, y, tau)
}

/// `r + γ·(1−done)·v_next`.
pub fn td_targets<S: Scalar>(batch: &ValueBatch<S>, v_next: &[S], gamma: f64) -> Vec<S> {
    let gm = S::of(gamma);
    (0..batch.len())
        .map(|j| {
            if batch.done[j] {
                batch.reward[j]
            } else {
                batch.reward[j] + gm * v_next[j]
            }
        })
        .collect()
}

/// Expectile regression of `V(s, e_g)` onto fixed targets `y`.
pub fn regress<'t, S: Scalar>(
    net: &ValueNet,
    p: &[Var<'t, S>],
    batch: &ValueBatch<S>,
    e_g: &Var<'t, S>,
    y: Vec<S>,
    tau: f64,
) -> Result<Var<'t, S>> {
    let tape = e_g.tape();
    let pred = net.value(p, &tape.constant(batch.s.clone()), e_g)?;
    let td = tape.constant(Tensor::vector(y)).sub(&pred)?;
    Ok(td.expectile(tau)?.mean())
}

/// Value network with its parameters and EMA target copy.
#[derive(Clone, Debug)]
pub struct ValueModel<S> {
    pub net: ValueNet,
    pub params: ParamSet<S>,
    pub target: ParamSet<S>,
}

impl<S: Scalar> ValueModel<S> {
    pub fn new<R: Rng>(config: &ValueConfig, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let net = ValueNet::new(&mut params, config, rng);
        let target = params.clone();
        ValueModel { net, params, target }
    }

    /// Loss on a fresh tape region; `p` must come from `self.params.attach`.
    pub fn loss<'t>(
        &self,
        p: &[Var<'t, S>],
        batch: &ValueBatch<S>,
        gamma: f64,
        tau: f64,
    ) -> Result<Var<'t, S>> {
        let tape = p
            .first()
            .ok_or_else(|| Error::Shape("empty value parameters".into()))?
            .tape();
        let target = self.target.attach_const(tape);
        value_loss(&self.net, p, &target, batch, gamma, tau)
    }

    /// `ψ̄ ← (1−ρ)·ψ̄ + ρ·ψ`.
    pub fn target_sync(&mut self, rate: f64) -> Result<()> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::Config(format!("target rate {rate} outside (0, 1]")));
        }
        let r = S::of(rate);
        let keep = S::one() - r;
        for (id, src) in self.params.tensors().iter().enumerate() {
            let dst = self.target.get_mut(id);
            if rate == 1.0 {
                dst.data_mut().copy_from_slice(src.data());
            } else {
                for (t, &o) in dst.data_mut().iter_mut().zip(src.data()) {
                    *t = keep * *t + r * o;
                }
            }
        }
        Ok(())
    }

    /// Goal embeddings without gradient, `[b, obs] → [b, d]`.
    pub fn embed(&self, g: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let p = self.params.attach_const(&tape);
        Ok(self.net.embed_goal(&p, &tape.constant(g.clone()))?.value())
    }

    /// `V(s, e_g)` without gradient.
    pub fn evaluate(&self, s: &Tensor<S>, e_g: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let p = self.params.attach_const(&tape);
        Ok(self
            .net
            .value(&p, &tape.constant(s.clone()), &tape.constant(e_g.clone()))?
            .value())
    }

    /// `V(s, φ(g))` without gradient.
    pub fn evaluate_goals(&self, s: &Tensor<S>, g: &Tensor<S>) -> Result<Tensor<S>> {
        self.evaluate(s, &self.embed(g)?)
    }
}
