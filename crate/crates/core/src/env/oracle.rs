use std::collections::VecDeque;

use super::MazeSpec;

/// Per-cell values on a maze grid; `None` for wall cells.
#[derive(Clone, Debug, PartialEq)]
pub struct CellValues {
    pub width: usize,
    pub height: usize,
    pub values: Vec<Option<f64>>,
}

impl CellValues {
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        self.values[y * self.width + x]
    }
}

/// BFS cell distances to `goal` over 4-connected free cells.
pub fn shortest_path_lengths(spec: &MazeSpec, goal: (usize, usize)) -> Vec<Option<usize>> {
    let mut dist = vec![None; spec.n_cells()];
    if spec.is_wall_cell(goal.0, goal.1) {
        return dist;
    }
    dist[spec.cell_index(goal)] = Some(0);
    let mut queue = VecDeque::from([goal]);
    while let Some(c) = queue.pop_front() {
        let d = dist[spec.cell_index(c)].unwrap();
        for n in spec.neighbours(c) {
            let i = spec.cell_index(n);
            if dist[i].is_none() {
                dist[i] = Some(d + 1);
                queue.push_back(n);
            }
        }
    }
    dist
}

/// Value iteration on the cell graph: reward 0 at the (absorbing) goal,
/// −1 per move elsewhere, discount `gamma`. Iterates to a sup-norm change
/// below 1e-10. Cells that cannot reach the goal stay at `−1/(1−γ)`.
pub fn dp_value_oracle(spec: &MazeSpec, goal: (usize, usize), gamma: f64) -> CellValues {
    let floor = -1.0 / (1.0 - gamma);
    let n = spec.n_cells();
    let goal_idx = spec.cell_index(goal);
    let mut v: Vec<f64> = (0..n)
        .map(|i| if i == goal_idx { 0.0 } else { floor })
        .collect();
    let free: Vec<(usize, usize)> = spec.free_cells();
    loop {
        let mut delta = 0.0f64;
        let prev = v.clone();
        for &c in &free {
            let i = spec.cell_index(c);
            if i == goal_idx {
                continue;
            }
            let best = spec
                .neighbours(c)
                .map(|nb| -1.0 + gamma * prev[spec.cell_index(nb)])
                .fold(floor, f64::max);
            delta = delta.max((best - v[i]).abs());
            v[i] = best;
        }
        if delta < 1e-10 {
            break;
        }
    }
    CellValues {
        width: spec.width,
        height: spec.height,
        values: (0..n)
            .map(|i| {
                let (x, y) = spec.cell_coords(i);
                (!spec.is_wall_cell(x, y)).then_some(v[i])
            })
            .collect(),
    }
}
