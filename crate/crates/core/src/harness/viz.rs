//! Decoded-subgoal rollouts as CSV tables and SVG overlays.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::{Scalar, Tensor};
use crate::env::{step, MazeSpec, Point};
use crate::error::{Error, Result};
use crate::policy::GenerationMode;
use crate::rng::{stream, Stream};
use crate::trainer::Agent;

/// One executed step: position before acting and decoded `ŝ_1 … ŝ_H`.
#[derive(Clone, Debug, PartialEq)]
pub struct VizStep {
    pub agent: Point,
    pub goal: Point,
    pub subgoals: Vec<Point>,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub pair: usize,
    pub steps: Vec<VizStep>,
    pub final_state: Point,
    pub success: bool,
}

/// Roll out one mean-mode episode from the exact start of eval pair `pair`,
/// decoding every subgoal hidden state.
pub fn rollout<S: Scalar>(agent: &Agent<S>, maze: &MazeSpec, pair: usize) -> Result<Episode> {
    let decoder = agent.decoder.as_ref().ok_or_else(|| {
        Error::Config(
            "checkpoint has no subgoal decoder; retrain with --set decoder.enabled=true".into(),
        )
    })?;
    let &(start, goal) = maze.eval_pairs.get(pair).ok_or_else(|| {
        Error::Config(format!("pair {pair} out of range (maze has {})", maze.eval_pairs.len()))
    })?;
    let h = agent.policy.config().horizon();
    let row = |p: Point| Tensor::new(vec![1, 2], vec![S::of(p[0]), S::of(p[1])]);
    let e_g = agent.value.embed(&row(goal)?)?;
    let mut rng = stream(0, Stream::Eval);
    let mut s = start;
    let mut steps = Vec::new();
    let mut success = maze.at_goal(s, goal);
    while !success && steps.len() < maze.max_episode_steps {
        let g = agent.policy.generate(&row(s)?, &e_g, GenerationMode::Mean, &mut rng)?;
        let mut subgoals = vec![[0.0; 2]; h];
        for t in g.trace.steps.iter().filter(|t| t.index > 0) {
            let d = decoder.decode(&t.hidden)?;
            subgoals[t.index - 1] = [d.data()[0].as_f64(), d.data()[1].as_f64()];
        }
        let a = g.action.data();
        let out = step(maze, s, [a[0].as_f64(), a[1].as_f64()], goal)?;
        steps.push(VizStep {
            agent: s,
            goal,
            subgoals,
        });
        s = out.state;
        success = out.at_goal;
    }
    Ok(Episode {
        pair,
        steps,
        final_state: s,
        success,
    })
}

pub fn episode_csv(ep: &Episode, horizon: usize) -> String {
    let mut out = String::from("step,agent_x,agent_y,goal_x,goal_y");
    for i in 1..=horizon {
        write!(out, ",subgoal_{i}_x,subgoal_{i}_y").unwrap();
    }
    out.push('\n');
    for (t, s) in ep.steps.iter().enumerate() {
        write!(out, "{t},{},{},{},{}", s.agent[0], s.agent[1], s.goal[0], s.goal[1]).unwrap();
        for p in &s.subgoals {
            write!(out, ",{},{}", p[0], p[1]).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Colour for subgoal `i` of `h`, warm (nearest) to cool (farthest).
fn colour(i: usize, h: usize) -> String {
    let t = if h <= 1 { 0.0 } else { (i - 1) as f64 / (h - 1) as f64 };
    format!("hsl({:.0},85%,50%)", 10.0 + 220.0 * t)
}

pub fn episode_svg(ep: &Episode, maze: &MazeSpec) -> String {
    const PX: f64 = 40.0;
    let c = maze.cell_size;
    let (w, hgt) = (maze.width as f64 * PX, maze.height as f64 * PX);
    // y grows upward in the maze, downward in SVG.
    let sx = |x: f64| x / c * PX;
    let sy = |y: f64| hgt - y / c * PX;
    let mut o = String::new();
    writeln!(
        o,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{hgt}" viewBox="0 0 {w} {hgt}">"#
    )
    .unwrap();
    writeln!(o, r#"<rect width="{w}" height="{hgt}" fill="white"/>"#).unwrap();
    for y in 0..maze.height {
        for x in 0..maze.width {
            if maze.is_wall_cell(x, y) {
                writeln!(
                    o,
                    r##"<rect x="{}" y="{}" width="{PX}" height="{PX}" fill="#444"/>"##,
                    x as f64 * PX,
                    hgt - (y + 1) as f64 * PX
                )
                .unwrap();
            }
        }
    }
    let h = ep.steps.first().map_or(0, |s| s.subgoals.len());
    for s in &ep.steps {
        for (i, p) in s.subgoals.iter().enumerate() {
            writeln!(
                o,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.5"/>"#,
                sx(p[0]),
                sy(p[1]),
                colour(i + 1, h)
            )
            .unwrap();
        }
    }
    let mut pts: Vec<String> = ep.steps.iter().map(|s| format!("{:.2},{:.2}", sx(s.agent[0]), sy(s.agent[1]))).collect();
    pts.push(format!("{:.2},{:.2}", sx(ep.final_state[0]), sy(ep.final_state[1])));
    writeln!(
        o,
        r#"<polyline points="{}" fill="none" stroke="black" stroke-width="2"/>"#,
        pts.join(" ")
    )
    .unwrap();
    if let Some(s) = ep.steps.first() {
        writeln!(o, r#"<circle cx="{:.2}" cy="{:.2}" r="6" fill="blue"/>"#, sx(s.agent[0]), sy(s.agent[1])).unwrap();
    }
    let g = ep.steps.first().map_or(ep.final_state, |s| s.goal);
    writeln!(o, r#"<circle cx="{:.2}" cy="{:.2}" r="6" fill="green"/>"#, sx(g[0]), sy(g[1])).unwrap();
    o.push_str("</svg>\n");
    o
}

/// Writes `pair_{j}.csv` and `pair_{j}.svg` per requested pair.
pub fn write_visualisations<S: Scalar>(
    agent: &Agent<S>,
    maze: &MazeSpec,
    pairs: &[usize],
    out: &Path,
) -> Result<Vec<Episode>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let h = agent.policy.config().horizon();
    let mut eps = Vec::new();
    for &j in pairs {
        let ep = rollout(agent, maze, j)?;
        let write = |name: String, text: String| -> Result<PathBuf> {
            let p = out.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            Ok(p)
        };
        write(format!("pair_{j}.csv"), episode_csv(&ep, h))?;
        write(format!("pair_{j}.svg"), episode_svg(&ep, maze))?;
        eps.push(ep);
    }
    Ok(eps)
}
