use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// A point maze: `grid[y][x]` is `true` for walls; everything outside the
/// grid is wall. Cell `(x, y)` covers `[x, x+1) × [y, y+1)` in units of
/// `cell_size`.
#[derive(Clone, Debug, PartialEq)]
pub struct MazeSpec {
    pub name: String,
    pub width: usize,
    pub height: usize,
    walls: Vec<bool>,
    pub cell_size: f64,
    pub action_bound: f64,
    pub success_radius: f64,
    pub max_episode_steps: usize,
    pub eval_pairs: Vec<(Point, Point)>,
}

/// On-disk JSON form: grid rows of `'#'` (wall) and `'.'` (free).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MazeFile {
    pub name: String,
    pub grid: Vec<String>,
    pub eval_pairs: Vec<[f64; 4]>,
    pub max_episode_steps: usize,
    #[serde(default = "default_cell")]
    pub cell_size: f64,
    #[serde(default = "default_bound")]
    pub action_bound: f64,
    #[serde(default = "default_radius")]
    pub success_radius: f64,
}

fn default_cell() -> f64 {
    1.0
}
fn default_bound() -> f64 {
    0.25
}
fn default_radius() -> f64 {
    0.5
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: Point,
    pub reward: f64,
    pub at_goal: bool,
}

const CORRIDOR: &[&str] = &["..............................."];

const ROOMS: &[&str] = &[
    "....#....",
    "....#....",
    ".........",
    "....#....",
    "##.###.##",
    "....#....",
    ".........",
    "....#....",
    "....#....",
];

const LONG: &[&str] = &[
    "...............",
    "##############.",
    "...............",
    ".##############",
    "...............",
    "##############.",
    "...............",
    ".##############",
    "...............",
    "##############.",
    "...............",
    ".##############",
    "...............",
    "##############.",
    "...............",
];

fn centre(x: usize, y: usize) -> Point {
    [x as f64 + 0.5, y as f64 + 0.5]
}

impl MazeSpec {
    pub const BUILTIN: [&'static str; 3] = ["corridor", "rooms", "long"];

    pub fn builtin(name: &str) -> Result<Self> {
        let (grid, steps, pairs): (&[&str], usize, Vec<(Point, Point)>) = match name {
            "corridor" => (
                CORRIDOR,
                200,
                vec![
                    (centre(0, 0), centre(30, 0)),
                    (centre(30, 0), centre(0, 0)),
                    (centre(5, 0), centre(25, 0)),
                    (centre(22, 0), centre(3, 0)),
                    (centre(12, 0), centre(29, 0)),
                ],
            ),
            "rooms" => (
                ROOMS,
                400,
                vec![
                    (centre(0, 0), centre(8, 8)),
                    (centre(8, 0), centre(0, 8)),
                    (centre(1, 7), centre(7, 1)),
                    (centre(3, 3), centre(6, 5)),
                    (centre(7, 7), centre(0, 1)),
                ],
            ),
            "long" => (
                LONG,
                800,
                vec![
                    (centre(0, 0), centre(0, 14)),
                    (centre(14, 14), centre(7, 0)),
                    (centre(0, 4), centre(0, 10)),
                    (centre(7, 12), centre(7, 2)),
                    (centre(14, 6), centre(3, 14)),
                ],
            ),
            other => {
                return Err(Error::Config(format!(
                    "unknown maze '{other}' (built-in: {})",
                    Self::BUILTIN.join(", ")
                )))
            }
        };
        Self::from_file(MazeFile {
            name: name.to_string(),
            grid: grid.iter().map(|s| s.to_string()).collect(),
            eval_pairs: pairs
                .iter()
                .map(|(s, g)| [s[0], s[1], g[0], g[1]])
                .collect(),
            max_episode_steps: steps,
            cell_size: 1.0,
            action_bound: 0.25,
            success_radius: 0.5,
        })
    }

    /// Built-in name, or a path to a maze JSON file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if Self::BUILTIN.contains(&name_or_path) {
            return Self::builtin(name_or_path);
        }
        let path = Path::new(name_or_path);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: MazeFile = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_file(file)
    }

    pub fn from_file(file: MazeFile) -> Result<Self> {
        let height = file.grid.len();
        let width = file.grid.first().map_or(0, |r| r.chars().count());
        if width == 0 || height == 0 {
            return Err(Error::Config(format!("maze '{}' has an empty grid", file.name)));
        }
        let mut walls = Vec::with_capacity(width * height);
        for (y, row) in file.grid.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::Config(format!(
                    "maze '{}': row {y} has {} cells, expected {width}",
                    file.name,
                    row.chars().count()
                )));
            }
            for c in row.chars() {
                walls.push(match c {
                    '#' => true,
                    '.' => false,
                    other => {
                        return Err(Error::Config(format!(
                            "maze '{}': unexpected grid character {other:?}",
                            file.name
                        )))
                    }
                });
            }
        }
        if file.eval_pairs.len() != 5 {
            return Err(Error::Config(format!(
                "maze '{}' must define exactly 5 eval pairs, found {}",
                file.name,
                file.eval_pairs.len()
            )));
        }
        let spec = MazeSpec {
            name: file.name,
            width,
            height,
            walls,
            cell_size: file.cell_size,
            action_bound: file.action_bound,
            success_radius: file.success_radius,
            max_episode_steps: file.max_episode_steps,
            eval_pairs: file
                .eval_pairs
                .iter()
                .map(|p| ([p[0], p[1]], [p[2], p[3]]))
                .collect(),
        };
        for (i, (s, g)) in spec.eval_pairs.iter().enumerate() {
            for p in [s, g] {
                if spec.is_wall_at(*p) {
                    return Err(Error::Config(format!(
                        "maze '{}': eval pair {i} point {p:?} lies in a wall",
                        spec.name
                    )));
                }
            }
            let (sc, gc) = (spec.cell_of(*s).unwrap(), spec.cell_of(*g).unwrap());
            if super::oracle::shortest_path_lengths(&spec, gc)[spec.cell_index(sc)].is_none() {
                return Err(Error::Config(format!(
                    "maze '{}': eval pair {i} is not connected",
                    spec.name
                )));
            }
        }
        Ok(spec)
    }

    pub fn to_file(&self) -> MazeFile {
        MazeFile {
            name: self.name.clone(),
            grid: (0..self.height)
                .map(|y| {
                    (0..self.width)
                        .map(|x| if self.is_wall_cell(x, y) { '#' } else { '.' })
                        .collect()
                })
                .collect(),
            eval_pairs: self
                .eval_pairs
                .iter()
                .map(|(s, g)| [s[0], s[1], g[0], g[1]])
                .collect(),
            max_episode_steps: self.max_episode_steps,
            cell_size: self.cell_size,
            action_bound: self.action_bound,
            success_radius: self.success_radius,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell_index(&self, (x, y): (usize, usize)) -> usize {
        y * self.width + x
    }

    pub fn cell_coords(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    pub fn is_wall_cell(&self, x: usize, y: usize) -> bool {
        x >= self.width || y >= self.height || self.walls[y * self.width + x]
    }

    /// Cell containing `p`, or `None` outside the grid.
    pub fn cell_of(&self, p: Point) -> Option<(usize, usize)> {
        let fx = (p[0] / self.cell_size).floor();
        let fy = (p[1] / self.cell_size).floor();
        if !(fx >= 0.0 && fy >= 0.0) || fx >= self.width as f64 || fy >= self.height as f64 {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    pub fn is_wall_at(&self, p: Point) -> bool {
        match self.cell_of(p) {
            Some((x, y)) => self.is_wall_cell(x, y),
            None => true,
        }
    }

    pub fn cell_centre(&self, (x, y): (usize, usize)) -> Point {
        [
            (x as f64 + 0.5) * self.cell_size,
            (y as f64 + 0.5) * self.cell_size,
        ]
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .filter(|&(x, y)| !self.is_wall_cell(x, y))
            .collect()
    }

    /// 4-connected free neighbours in fixed order (−x, +x, −y, +y).
    pub fn neighbours(&self, (x, y): (usize, usize)) -> impl Iterator<Item = (usize, usize)> + '_ {
        let cands = [
            x.checked_sub(1).map(|nx| (nx, y)),
            Some((x + 1, y)),
            y.checked_sub(1).map(|ny| (x, ny)),
            Some((x, y + 1)),
        ];
        cands
            .into_iter()
            .flatten()
            .filter(move |&(nx, ny)| !self.is_wall_cell(nx, ny))
    }

    pub fn at_goal(&self, p: Point, goal: Point) -> bool {
        dist(p, goal) <= self.success_radius
    }

    /// Bounding box `[0, w] × [0, h]` in world units.
    pub fn contains(&self, p: Point) -> bool {
        p[0] >= 0.0
            && p[1] >= 0.0
            && p[0] <= self.width as f64 * self.cell_size
            && p[1] <= self.height as f64 * self.cell_size
    }
}

pub(crate) fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Clip the action per axis, move, and cancel the component along any axis
/// whose move would enter a wall (x resolved first, then y).
pub fn step(spec: &MazeSpec, state: Point, action: Point, goal: Point) -> Result<StepOutcome> {
    if spec.is_wall_at(state) {
        return Err(Error::Integrity(format!(
            "state {state:?} lies inside a wall of maze '{}'",
            spec.name
        )));
    }
    let b = spec.action_bound;
    let ax = if action[0].is_nan() { 0.0 } else { action[0].clamp(-b, b) };
    let ay = if action[1].is_nan() { 0.0 } else { action[1].clamp(-b, b) };
    let mut next = state;
    if !spec.is_wall_at([state[0] + ax, state[1]]) {
        next[0] = state[0] + ax;
    }
    if !spec.is_wall_at([next[0], state[1] + ay]) {
        next[1] = state[1] + ay;
    }
    let at_goal = spec.at_goal(next, goal);
    Ok(StepOutcome {
        state: next,
        reward: if at_goal { 0.0 } else { -1.0 },
        at_goal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate_and_have_five_pairs() {
        for name in MazeSpec::BUILTIN {
            let m = MazeSpec::builtin(name).unwrap();
            assert_eq!(m.eval_pairs.len(), 5);
        }
        assert!(MazeSpec::builtin("nope").is_err());
    }

    #[test]
    fn zero_action_stays_put() {
        let m = MazeSpec::builtin("corridor").unwrap();
        let o = step(&m, [3.5, 0.5], [0.0, 0.0], [20.5, 0.5]).unwrap();
        assert_eq!(o.state, [3.5, 0.5]);
        assert_eq!(o.reward, -1.0);
        assert!(!o.at_goal);
    }

    #[test]
    fn wall_slide_cancels_blocked_axis() {
        let m = MazeSpec::builtin("corridor").unwrap();
        // y is blocked (corridor is one cell tall), x moves
        let o = step(&m, [3.5, 0.9], [0.2, 0.2], [20.5, 0.5]).unwrap();
        assert_eq!(o.state, [3.5 + 0.2, 0.9]);
        let o = step(&m, [0.1, 0.5], [-0.25, 0.0], [20.5, 0.5]).unwrap();
        assert_eq!(o.state, [0.1, 0.5]);
    }

    #[test]
    fn actions_are_clipped() {
        let m = MazeSpec::builtin("corridor").unwrap();
        let o = step(&m, [3.5, 0.5], [9.0, 0.0], [20.5, 0.5]).unwrap();
        assert_eq!(o.state, [3.75, 0.5]);
    }

    #[test]
    fn reaching_goal_radius_gives_zero_reward() {
        let m = MazeSpec::builtin("corridor").unwrap();
        let o = step(&m, [10.1, 0.5], [0.05, 0.0], [10.5, 0.5]).unwrap();
        assert!(o.at_goal);
        assert_eq!(o.reward, 0.0);
    }

    #[test]
    fn state_in_wall_is_integrity_error() {
        let m = MazeSpec::builtin("rooms").unwrap();
        let err = step(&m, [4.5, 0.5], [0.0, 0.0], [0.5, 0.5]).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn maze_file_round_trip() {
        let m = MazeSpec::builtin("rooms").unwrap();
        let json = serde_json::to_string(&m.to_file()).unwrap();
        let back = MazeSpec::from_file(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_pair_count_and_wall_points() {
        let mut f = MazeSpec::builtin("corridor").unwrap().to_file();
        f.eval_pairs.pop();
        assert!(MazeSpec::from_file(f.clone()).is_err());
        f.eval_pairs.push([0.5, 0.5, 0.5, 1.5]);
        assert!(MazeSpec::from_file(f).is_err());
    }
}
