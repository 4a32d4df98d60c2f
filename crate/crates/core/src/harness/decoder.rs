//! Subgoal decoder: maps the policy's hidden state at a subgoal slot back to
//! an observation, trained on detached inputs.

use rand::Rng;

use crate::autodiff::{ParamSet, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{dims, Mlp};

#[derive(Clone, Debug)]
pub struct Decoder<S> {
    pub mlp: Mlp,
    pub params: ParamSet<S>,
}

impl<S: Scalar> Decoder<S> {
    pub fn new<R: Rng>(embed_dim: usize, hidden: &[usize], obs_dim: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, "decoder", &dims(embed_dim, hidden, obs_dim), rng);
        Decoder { mlp, params }
    }

    /// Mean over subgoals of the per-row squared error `‖D(h_i) − s_i‖²`.
    /// Hidden inputs are detached.
    pub fn loss<'t>(
        &self,
        p: &[Var<'t, S>],
        hiddens: &[Var<'t, S>],
        targets: &[Tensor<S>],
    ) -> Result<Var<'t, S>> {
        if hiddens.len() != targets.len() || hiddens.is_empty() {
            return Err(Error::Shape(format!(
                "decoder: {} hidden states, {} targets",
                hiddens.len(),
                targets.len()
            )));
        }
        let tape = hiddens[0].tape();
        let mut acc: Option<Var<'t, S>> = None;
        for (h, t) in hiddens.iter().zip(targets) {
            let out = self.mlp.forward(p, &h.detach())?;
            let diff = out.sub(&tape.constant(t.clone()))?;
            let rows = diff.shape()[0].max(1);
            let sq = diff.mul(&diff)?.sum().scale(S::of(1.0 / rows as f64));
            acc = Some(match acc {
                None => sq,
                Some(a) => a.add(&sq)?,
            });
        }
        Ok(acc.unwrap().scale(S::of(1.0 / hiddens.len() as f64)))
    }

    pub fn decode(&self, hidden: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let p = self.params.attach_const(&tape);
        Ok(self.mlp.forward(&p, &tape.constant(hidden.clone()))?.value())
    }
}
