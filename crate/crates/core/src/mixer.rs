//! MLP-Mixer block with a lower-triangular causal token mixer.
//!
//! A token sequence is a `[batch, T, d]` tensor whose rows are the fixed
//! slots `[state, goal, subgoal_H, …, subgoal_1, action]`, so `T = H + 3`.
//! One block computes
//!
//! ```text
//! u   = causal_mix(token_mix(x))
//! v   = x + u
//! out = v + channel_mix(v)
//! ```
//!
//! with a pre-norm layer normalization in front of each MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{dims, Mlp};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CausalMixerMode {
    /// Trainable entries `a_mn`, `m ≥ n`.
    #[default]
    Learnable,
    /// Frozen `a_mn = 1/m` (1-indexed) for `n ≤ m`.
    FixedAverage,
    /// No causal mixing; the token-mixing output feeds the skip directly.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub embed_dim: usize,
    /// Number of subgoal slots `H`.
    pub horizon: usize,
    pub token_mixer_hidden: Vec<usize>,
    pub channel_mixer_hidden: Vec<usize>,
    pub n_blocks: usize,
    pub causal_mixer_mode: CausalMixerMode,
}

impl MixerConfig {
    pub fn new(embed_dim: usize, horizon: usize) -> Self {
        MixerConfig {
            embed_dim,
            horizon,
            token_mixer_hidden: vec![32, 32],
            channel_mixer_hidden: vec![32, 32],
            n_blocks: 1,
            causal_mixer_mode: CausalMixerMode::Learnable,
        }
    }

    /// `T = H + 3`: state, goal, `H` subgoals, action.
    pub fn token_count(&self) -> usize {
        self.horizon + 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be positive".into()));
        }
        if self
            .token_mixer_hidden
            .iter()
            .chain(&self.channel_mixer_hidden)
            .any(|&h| h == 0)
        {
            return Err(Error::Config("mixer hidden dims must be positive".into()));
        }
        Ok(())
    }
}

/// Entry `(m, n)` of a lower-triangular `T×T` matrix in the packed layout.
#[inline]
pub fn packed_index(m: usize, n: usize) -> usize {
    debug_assert!(n <= m);
    m * (m + 1) / 2 + n
}

/// The lower-triangular token mixer `M`. Only entries with `m ≥ n` exist.
#[derive(Clone, Debug)]
pub enum CausalMixer {
    Learnable { t: usize, packed: ParamId },
    FixedAverage { t: usize },
    None { t: usize },
}

impl CausalMixer {
    fn new<S: Scalar>(params: &mut ParamSet<S>, name: &str, t: usize, mode: CausalMixerMode) -> Self {
        match mode {
            CausalMixerMode::Learnable => {
                let mut packed = vec![S::zero(); t * (t + 1) / 2];
                for m in 0..t {
                    packed[packed_index(m, m)] = S::one();
                }
                let id = params.add(format!("{name}.causal"), Tensor::vector(packed));
                CausalMixer::Learnable { t, packed: id }
            }
            CausalMixerMode::FixedAverage => CausalMixer::FixedAverage { t },
            CausalMixerMode::None => CausalMixer::None { t },
        }
    }

    pub fn token_count(&self) -> usize {
        match *self {
            CausalMixer::Learnable { t, .. }
            | CausalMixer::FixedAverage { t }
            | CausalMixer::None { t } => t,
        }
    }

    /// Packed entries, or `None` when mixing is disabled.
    pub fn packed<S: Scalar>(&self, params: &ParamSet<S>) -> Option<Vec<S>> {
        match *self {
            CausalMixer::Learnable { packed, .. } => Some(params.get(packed).data().to_vec()),
            CausalMixer::FixedAverage { t } => {
                let mut v = vec![S::zero(); t * (t + 1) / 2];
                for m in 0..t {
                    for n in 0..=m {
                        v[packed_index(m, n)] = S::one() / S::of((m + 1) as f64);
                    }
                }
                Some(v)
            }
            CausalMixer::None { .. } => None,
        }
    }

    /// Dense `T×T` matrix; entries above the diagonal are exactly zero.
    /// The disabled mixer materializes as the identity.
    pub fn matrix<S: Scalar>(&self, params: &ParamSet<S>) -> Tensor<S> {
        let t = self.token_count();
        let mut dense = vec![S::zero(); t * t];
        match self.packed(params) {
            Some(p) => {
                for m in 0..t {
                    for n in 0..=m {
                        dense[m * t + n] = p[packed_index(m, n)];
                    }
                }
            }
            None => {
                for m in 0..t {
                    dense[m * t + m] = S::one();
                }
            }
        }
        Tensor::from_parts(vec![t, t], dense)
    }

    /// `Y′ = M·Y` over the token axis of a `[batch, T, d]` sequence.
    pub fn forward<'t, S: Scalar>(&self, p: &[Var<'t, S>], y: &Var<'t, S>) -> Result<Var<'t, S>> {
        let t = self.token_count();
        let shape = y.shape();
        if shape.len() != 3 || shape[1] != t {
            return Err(Error::Shape(format!(
                "causal mixer for {t} tokens applied to sequence {shape:?}"
            )));
        }
        match *self {
            CausalMixer::Learnable { packed, .. } => y.causal_mix(&p[packed]),
            CausalMixer::FixedAverage { t } => {
                let mut v = vec![S::zero(); t * (t + 1) / 2];
                for m in 0..t {
                    for n in 0..=m {
                        v[packed_index(m, n)] = S::one() / S::of((m + 1) as f64);
                    }
                }
                let c = y.tape().constant(Tensor::vector(v));
                y.causal_mix(&c)
            }
            CausalMixer::None { .. } => Ok(*y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MixerBlock {
    pub token_norm: (ParamId, ParamId),
    pub token_mlp: Mlp,
    pub causal: CausalMixer,
    pub channel_norm: (ParamId, ParamId),
    pub channel_mlp: Mlp,
}

impl MixerBlock {
    pub fn new<S: Scalar, R: Rng>(
        params: &mut ParamSet<S>,
        name: &str,
        cfg: &MixerConfig,
        rng: &mut R,
    ) -> Self {
        let t = cfg.token_count();
        let d = cfg.embed_dim;
        let norm = |params: &mut ParamSet<S>, n: &str| {
            (
                params.add(format!("{name}.{n}.gain"), Tensor::full(&[d], S::one())),
                params.add(format!("{name}.{n}.bias"), Tensor::zeros(&[d])),
            )
        };
        let token_norm = norm(params, "token_norm");
        let token_mlp = Mlp::new(
            params,
            &format!("{name}.token_mlp"),
            &dims(t, &cfg.token_mixer_hidden, t),
            rng,
        );
        let causal = CausalMixer::new(params, name, t, cfg.causal_mixer_mode);
        let channel_norm = norm(params, "channel_norm");
        let channel_mlp = Mlp::new(
            params,
            &format!("{name}.channel_mlp"),
            &dims(d, &cfg.channel_mixer_hidden, d),
            rng,
        );
        MixerBlock {
            token_norm,
            token_mlp,
            causal,
            channel_norm,
            channel_mlp,
        }
    }

    /// Layer norm over channels, then an MLP across the token axis for every
    /// channel independently.
    pub fn token_mix<'t, S: Scalar>(&self, p: &[Var<'t, S>], seq: &Var<'t, S>) -> Result<Var<'t, S>> {
        let x = seq.layer_norm(&p[self.token_norm.0], &p[self.token_norm.1])?;
        let xt = x.transpose12()?;
        let yt = self.token_mlp.forward(p, &xt)?;
        yt.transpose12()
    }

    pub fn causal_mix<'t, S: Scalar>(&self, p: &[Var<'t, S>], seq: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.causal.forward(p, seq)
    }

    /// Layer norm, then an MLP over the channels of every token independently.
    pub fn channel_mix<'t, S: Scalar>(
        &self,
        p: &[Var<'t, S>],
        seq: &Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let x = seq.layer_norm(&p[self.channel_norm.0], &p[self.channel_norm.1])?;
        self.channel_mlp.forward(p, &x)
    }

    pub fn forward<'t, S: Scalar>(&self, p: &[Var<'t, S>], seq: &Var<'t, S>) -> Result<Var<'t, S>> {
        let u = self.causal_mix(p, &self.token_mix(p, seq)?)?;
        let v = seq.add(&u)?;
        v.add(&self.channel_mix(p, &v)?)
    }
}

/// Stack of mixer blocks shared by every prediction step.
#[derive(Clone, Debug)]
pub struct MixerBackbone {
    pub config: MixerConfig,
    pub blocks: Vec<MixerBlock>,
}

impl MixerBackbone {
    pub fn new<S: Scalar, R: Rng>(
        params: &mut ParamSet<S>,
        name: &str,
        config: &MixerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.n_blocks)
            .map(|i| MixerBlock::new(params, &format!("{name}.block{i}"), config, rng))
            .collect();
        Ok(MixerBackbone {
            config: config.clone(),
            blocks,
        })
    }

    pub fn forward<'t, S: Scalar>(&self, p: &[Var<'t, S>], seq: &Var<'t, S>) -> Result<Var<'t, S>> {
        let shape = seq.shape();
        let (t, d) = (self.config.token_count(), self.config.embed_dim);
        if shape.len() != 3 || shape[1] != t || shape[2] != d {
            return Err(Error::Shape(format!(
                "backbone expects [batch, {t}, {d}], got {shape:?}"
            )));
        }
        let mut h = *seq;
        for b in &self.blocks {
            h = b.forward(p, &h)?;
        }
        Ok(h)
    }
}
