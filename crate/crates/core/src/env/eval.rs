use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{step, MazeSpec, Point};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Start positions are jittered by up to this fraction of a cell.
pub const START_JITTER: f64 = 0.1;

/// Batched goal-conditioned controller.
pub trait Controller {
    fn act(&mut self, obs: &[Point], goals: &[Point]) -> Result<Vec<Point>>;
}

/// Always outputs the zero action.
pub struct ZeroController;

impl Controller for ZeroController {
    fn act(&mut self, obs: &[Point], _goals: &[Point]) -> Result<Vec<Point>> {
        Ok(vec![[0.0, 0.0]; obs.len()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub start: Point,
    pub goal: Point,
    /// Percent of episodes that reached the goal.
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: Vec<PairResult>,
    /// Mean success over pairs, in percent.
    pub mean: f64,
}

/// Roll out `episodes_per_pair` episodes for each evaluation pair, all
/// episodes stepping in lockstep so the controller sees one batch per step.
pub fn evaluate(
    ctrl: &mut dyn Controller,
    spec: &MazeSpec,
    episodes_per_pair: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes_per_pair == 0 {
        return Err(Error::Config("episodes_per_pair must be at least 1".into()));
    }
    let mut rng = stream(seed, Stream::Eval);
    let j = START_JITTER * spec.cell_size;
    let mut states = Vec::new();
    let mut goals = Vec::new();
    for &(s, g) in &spec.eval_pairs {
        for _ in 0..episodes_per_pair {
            states.push([s[0] + rng.random_range(-j..=j), s[1] + rng.random_range(-j..=j)]);
            goals.push(g);
        }
    }
    let n = states.len();
    let mut done: Vec<bool> = (0..n).map(|i| spec.at_goal(states[i], goals[i])).collect();
    let mut active: Vec<usize> = (0..n).filter(|&i| !done[i]).collect();
    for _ in 0..spec.max_episode_steps {
        if active.is_empty() {
            break;
        }
        let obs: Vec<Point> = active.iter().map(|&i| states[i]).collect();
        let gs: Vec<Point> = active.iter().map(|&i| goals[i]).collect();
        let actions = ctrl.act(&obs, &gs)?;
        if actions.len() != active.len() {
            return Err(Error::Shape(format!(
                "controller returned {} actions for {} observations",
                actions.len(),
                active.len()
            )));
        }
        for (&i, a) in active.iter().zip(&actions) {
            let out = step(spec, states[i], *a, goals[i])?;
            states[i] = out.state;
            done[i] = out.at_goal;
        }
        active.retain(|&i| !done[i]);
    }
    let pairs: Vec<PairResult> = spec
        .eval_pairs
        .iter()
        .enumerate()
        .map(|(p, &(start, goal))| {
            let hits = done[p * episodes_per_pair..(p + 1) * episodes_per_pair]
                .iter()
                .filter(|&&d| d)
                .count();
            PairResult {
                start,
                goal,
                success_rate: 100.0 * hits as f64 / episodes_per_pair as f64,
            }
        })
        .collect();
    let mean = pairs.iter().map(|p| p.success_rate).sum::<f64>() / pairs.len().max(1) as f64;
    Ok(EvalReport { pairs, mean })
}
