use std::collections::HashMap;

use super::maze::dist;
use super::oracle::shortest_path_lengths;
use super::{Controller, MazeSpec, Point};
use crate::error::Result;

/// Scripted navigator: follows BFS cell waypoints with proportional control.
pub struct Expert<'a> {
    spec: &'a MazeSpec,
    gain: f64,
    fields: HashMap<(usize, usize), Vec<Option<usize>>>,
}

impl<'a> Expert<'a> {
    pub fn new(spec: &'a MazeSpec) -> Self {
        Expert {
            spec,
            gain: 1.0,
            fields: HashMap::new(),
        }
    }

    /// Next intermediate target on a shortest cell path from `s` to `goal`.
    pub fn target(&mut self, s: Point, goal: Point) -> Point {
        let spec = self.spec;
        let (Some(sc), Some(gc)) = (spec.cell_of(s), spec.cell_of(goal)) else {
            return s;
        };
        if sc == gc {
            return goal;
        }
        let field = self
            .fields
            .entry(gc)
            .or_insert_with(|| shortest_path_lengths(spec, gc));
        let Some(d) = field[spec.cell_index(sc)] else {
            return s;
        };
        spec.neighbours(sc)
            .find(|&n| field[spec.cell_index(n)] == Some(d - 1))
            .map(|n| spec.cell_centre(n))
            .unwrap_or(s)
    }

    /// Noise-free action toward `goal`, clipped to the action bound.
    pub fn action(&mut self, s: Point, goal: Point) -> Point {
        let t = self.target(s, goal);
        let b = self.spec.action_bound;
        [
            (self.gain * (t[0] - s[0])).clamp(-b, b),
            (self.gain * (t[1] - s[1])).clamp(-b, b),
        ]
    }

    pub fn reached(&self, s: Point, waypoint: Point) -> bool {
        dist(s, waypoint) < 0.1 * self.spec.cell_size
    }
}

/// The scripted expert as an evaluation controller.
pub struct ExpertController<'a> {
    expert: Expert<'a>,
}

impl<'a> ExpertController<'a> {
    pub fn new(spec: &'a MazeSpec) -> Self {
        ExpertController {
            expert: Expert::new(spec),
        }
    }
}

impl Controller for ExpertController<'_> {
    fn act(&mut self, obs: &[Point], goals: &[Point]) -> Result<Vec<Point>> {
        Ok(obs
            .iter()
            .zip(goals)
            .map(|(s, g)| self.expert.action(*s, *g))
            .collect())
    }
}
