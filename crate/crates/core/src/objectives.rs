//! Advantage estimates and the advantage-weighted hierarchical objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::value::ValueModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_h: f64,
    pub lambda_l: f64,
    pub gamma_h: f64,
    pub beta: f64,
    pub weight_clip: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_h: 0.04,
            lambda_l: 1.0,
            gamma_h: 0.8,
            beta: 3.0,
            weight_clip: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_h, self.lambda_l, self.gamma_h, self.beta, self.weight_clip];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite: {self:?}")));
        }
        if self.lambda_h < 0.0 {
            return Err(Error::Config("weights.lambda_h must be ≥ 0".into()));
        }
        if self.lambda_l <= 0.0 {
            return Err(Error::Config("weights.lambda_l must be > 0".into()));
        }
        if !(self.gamma_h > 0.0 && self.gamma_h <= 1.0) {
            return Err(Error::Config("weights.gamma_h must lie in (0, 1]".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config("weights.beta must be ≥ 0".into()));
        }
        if self.weight_clip < 1.0 {
            return Err(Error::Config("weights.weight_clip must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Coefficient on `J^{h_i}` inside the maximized objective.
    pub fn high_coefficient(&self, i: usize) -> f64 {
        self.lambda_h * self.gamma_h.powi(i as i32 - 1)
    }
}

/// `min(exp(β·adv), clip)`.
pub fn awr_weight(adv: f64, beta: f64, clip: f64) -> f64 {
    (beta * adv).exp().min(clip)
}

/// `V(s_i, e_g) − V(s, e_g)` per row; no gradient.
pub fn high_advantage<S: Scalar>(
    value: &ValueModel<S>,
    s: &Tensor<S>,
    s_i: &Tensor<S>,
    e_g: &Tensor<S>,
) -> Result<Vec<f64>> {
    let a = value.evaluate(s_i, e_g)?;
    let b = value.evaluate(s, e_g)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (*x - *y).as_f64()).collect())
}

/// `V(s', e_{z_1}) − V(s, e_{z_1})` per row; no gradient.
pub fn low_advantage<S: Scalar>(
    value: &ValueModel<S>,
    s: &Tensor<S>,
    s_next: &Tensor<S>,
    e_z1: &Tensor<S>,
) -> Result<Vec<f64>> {
    high_advantage(value, s, s_next, e_z1)
}

/// Advantages for one policy batch: `high[i−1]` belongs to subgoal `i`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Advantages {
    pub high: Vec<Vec<f64>>,
    pub low: Vec<f64>,
}

/// Per-term diagnostics of one objective evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTerms {
    /// `J^{h_i}` at index `i−1`.
    pub j_h: Vec<f64>,
    pub j_l: f64,
    /// Coefficient applied to each `J^{h_i}`, index `i−1`.
    pub coef_h: Vec<f64>,
    pub coef_l: f64,
    /// Mean AWR weight over all subgoal terms, and for the action term.
    pub mean_weight_h: f64,
    pub mean_weight_l: f64,
    /// Largest `|w − 1|` across every weight used.
    pub max_weight_deviation: f64,
    /// Minimized value, `−J_total`.
    pub loss: f64,
}

fn weighted_mean<'t, S: Scalar>(
    logp: &Var<'t, S>,
    adv: &[f64],
    w: &LossWeights,
    dev: &mut f64,
) -> Result<(Var<'t, S>, f64)> {
    let n = logp.shape().first().copied().unwrap_or(0);
    if adv.len() != n {
        return Err(Error::Shape(format!("{} advantages for {n} log-likelihoods", adv.len())));
    }
    let ws: Vec<f64> = adv.iter().map(|&a| awr_weight(a, w.beta, w.weight_clip)).collect();
    for x in &ws {
        *dev = dev.max((x - 1.0).abs());
    }
    let mean_w = ws.iter().sum::<f64>() / n.max(1) as f64;
    let wt = logp.tape().constant(Tensor::vector(ws.into_iter().map(S::of).collect()));
    Ok((wt.mul(logp)?.mean(), mean_w))
}

/// `−(λ_h·Σ_i γ_h^{i−1}·J^{h_i} + λ_ℓ·J^ℓ)` with `J = mean(w·logp)`.
pub fn total_loss<'t, S: Scalar>(
    logp_h: &[Var<'t, S>],
    logp_l: &Var<'t, S>,
    adv: &Advantages,
    w: &LossWeights,
) -> Result<(Var<'t, S>, LossTerms)> {
    if adv.high.len() != logp_h.len() {
        return Err(Error::Shape(format!(
            "{} high advantages for {} subgoal terms",
            adv.high.len(),
            logp_h.len()
        )));
    }
    let mut dev = 0.0f64;
    let mut terms = LossTerms::default();
    let (j_l, mw_l) = weighted_mean(logp_l, &adv.low, w, &mut dev)?;
    terms.j_l = j_l.item().as_f64();
    terms.coef_l = w.lambda_l;
    terms.mean_weight_l = mw_l;
    if !terms.j_l.is_finite() {
        return Err(Error::Numerical(format!("J^l is {}", terms.j_l)));
    }
    let mut objective = j_l.scale(S::of(w.lambda_l));
    let mut mw_h = 0.0;
    for (k, (lp, a)) in logp_h.iter().zip(&adv.high).enumerate() {
        let i = k + 1;
        let (j, mw) = weighted_mean(lp, a, w, &mut dev)?;
        let jv = j.item().as_f64();
        if !jv.is_finite() {
            return Err(Error::Numerical(format!("J^h_{i} is {jv}")));
        }
        let c = w.high_coefficient(i);
        objective = objective.add(&j.scale(S::of(c)))?;
        terms.j_h.push(jv);
        terms.coef_h.push(c);
        mw_h += mw;
    }
    terms.mean_weight_h = if logp_h.is_empty() { 0.0 } else { mw_h / logp_h.len() as f64 };
    terms.max_weight_deviation = dev;
    let loss = objective.scale(S::of(-1.0));
    terms.loss = loss.item().as_f64();
    if !terms.loss.is_finite() {
        return Err(Error::Numerical(format!("total loss is {}", terms.loss)));
    }
    Ok((loss, terms))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_pcg::Pcg64;

    use super::*;
    use crate::autodiff::Tape;
    use crate::value::ValueConfig;

    #[test]
    fn awr_weight_examples() {
        assert_eq!(awr_weight(0.0, 3.0, 100.0), 1.0);
        assert!((awr_weight(1.0, 3.0, 100.0) - 20.085536923187668).abs() < 1e-12);
        assert_eq!(awr_weight(10.0, 3.0, 100.0), 100.0);
        assert_eq!(awr_weight(123.0, 0.0, 100.0), 1.0);
    }

    proptest! {
        #[test]
        fn awr_weight_positive_and_bounded(adv in -50.0f64..50.0, beta in 0.0f64..10.0, clip in 1.0f64..1e3) {
            let w = awr_weight(adv, beta, clip);
            prop_assert!(w > 0.0 && w <= clip);
        }
    }

    #[test]
    fn advantages_vanish_for_identical_states() {
        let mut rng = Pcg64::seed_from_u64(1);
        let v = ValueModel::<f64>::new(&ValueConfig::new(2, 4), &mut rng);
        let s = Tensor::from_f64(&[3, 2], &[0.1, 0.2, 1.0, 2.0, -1.0, 0.5]).unwrap();
        let e = v.embed(&s).unwrap();
        assert!(high_advantage(&v, &s, &s, &e).unwrap().iter().all(|&a| a == 0.0));
        assert!(low_advantage(&v, &s, &s, &e).unwrap().iter().all(|&a| a == 0.0));
        let s2 = s.map(|x| x + 0.3);
        let a = high_advantage(&v, &s, &s2, &e).unwrap();
        let want: Vec<f64> = v
            .evaluate(&s2, &e)
            .unwrap()
            .data()
            .iter()
            .zip(v.evaluate(&s, &e).unwrap().data())
            .map(|(x, y)| x - y)
            .collect();
        assert_eq!(a, want);
    }

    fn leaves<'t>(tape: &'t Tape<f64>, rng: &mut Pcg64, h: usize, b: usize) -> (Vec<Var<'t, f64>>, Var<'t, f64>) {
        let mut v = || tape.param(Tensor::vector((0..b).map(|_| rng.random_range(-3.0..0.0)).collect()));
        let lh = (0..h).map(|_| v()).collect();
        (lh, v())
    }

    #[test]
    fn flat_policy_loss_is_action_term_only() {
        let mut rng = Pcg64::seed_from_u64(2);
        let tape = Tape::new();
        let (lh, ll) = leaves(&tape, &mut rng, 0, 4);
        let w = LossWeights { lambda_l: 2.0, ..Default::default() };
        let adv = Advantages { high: vec![], low: vec![0.1, -0.2, 0.0, 0.3] };
        let (loss, t) = total_loss(&lh, &ll, &adv, &w).unwrap();
        assert!((loss.item() + 2.0 * t.j_l).abs() < 1e-12);
        let want: f64 = (0..4)
            .map(|j| awr_weight(adv.low[j], 3.0, 100.0) * ll.value().data()[j])
            .sum::<f64>()
            / 4.0;
        assert!((t.j_l - want).abs() < 1e-12);
    }

    #[test]
    fn effective_weights_follow_discounted_sum() {
        let mut rng = Pcg64::seed_from_u64(3);
        let tape = Tape::new();
        let (lh, ll) = leaves(&tape, &mut rng, 2, 5);
        let w = LossWeights { lambda_h: 0.3, lambda_l: 1.5, gamma_h: 0.8, beta: 0.0, weight_clip: 100.0 };
        let adv = Advantages { high: vec![vec![0.5; 5], vec![-2.0; 5]], low: vec![7.0; 5] };
        let (loss, t) = total_loss(&lh, &ll, &adv, &w).unwrap();
        assert_eq!(t.max_weight_deviation, 0.0);
        let g = tape.backward(loss).unwrap();
        // d(loss)/d(logp) = −coef/b, per row
        for (i, want) in [(1usize, 0.3), (2, 0.3 * 0.8)] {
            for x in g.get(lh[i - 1]).data() {
                assert!((x + want / 5.0).abs() < 1e-12);
            }
        }
        for x in g.get(ll).data() {
            assert!((x + 1.5 / 5.0).abs() < 1e-12);
        }
        assert_eq!(t.coef_h, vec![0.3, 0.3 * 0.8]);
    }

    #[test]
    fn loss_is_linear_in_lambdas() {
        let mut rng = Pcg64::seed_from_u64(4);
        let tape = Tape::new();
        let (lh, ll) = leaves(&tape, &mut rng, 2, 3);
        let adv = Advantages {
            high: vec![vec![0.1, 0.2, -0.3], vec![1.0, 0.0, -1.0]],
            low: vec![0.05, 0.5, -0.5],
        };
        let w = LossWeights::default();
        let (_, a) = total_loss(&lh, &ll, &adv, &w).unwrap();
        let (_, b) = total_loss(&lh, &ll, &adv, &LossWeights { lambda_l: 2.0, ..w.clone() }).unwrap();
        let (_, c) = total_loss(&lh, &ll, &adv, &LossWeights { lambda_h: 0.0, ..w.clone() }).unwrap();
        assert!(((b.loss - a.loss) - (-a.j_l)).abs() < 1e-12);
        assert!((c.loss + a.j_l).abs() < 1e-12);
    }

    #[test]
    fn nan_term_is_named() {
        let tape = Tape::new();
        let lh = vec![tape.param(Tensor::vector(vec![f64::NAN]))];
        let ll = tape.param(Tensor::vector(vec![-1.0]));
        let adv = Advantages { high: vec![vec![0.0]], low: vec![0.0] };
        let err = total_loss(&lh, &ll, &adv, &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("J^h_1"), "{err}");
    }

    #[test]
    fn validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { weight_clip: 0.5, ..Default::default() }.validate().is_err());
        assert!(LossWeights { lambda_l: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { gamma_h: 1.5, ..Default::default() }.validate().is_err());
    }
}
