//! Small feed-forward building blocks shared by every network.

use rand::Rng;

use crate::autodiff::{ParamId, ParamSet, Scalar, Tensor, Var};
use crate::error::Result;

/// Affine layer `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(
        params: &mut ParamSet<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = params.add_uniform(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear { weight, bias }
    }

    pub fn forward<'t, S: Scalar>(&self, p: &[Var<'t, S>], x: &Var<'t, S>) -> Result<Var<'t, S>> {
        x.linear(&p[self.weight], &p[self.bias])
    }
}

/// Multi-layer perceptron with GELU between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width: input, hidden..., output.
    pub fn new<S: Scalar, R: Rng>(
        params: &mut ParamSet<S>,
        name: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }

    pub fn forward<'t, S: Scalar>(&self, p: &[Var<'t, S>], x: &Var<'t, S>) -> Result<Var<'t, S>> {
        let mut h = *x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, &h)?;
            if i < last {
                h = h.gelu();
            }
        }
        Ok(h)
    }
}

/// Widths `[input, hidden..., output]`.
pub(crate) fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = Vec::with_capacity(hidden.len() + 2);
    d.push(input);
    d.extend_from_slice(hidden);
    d.push(output);
    d
}
