//! Point-mass navigation in a walled grid.
//!
//! World coordinates put cell `(row, col)` at `[col, col+1) × [row, row+1)`;
//! the state is the continuous position `(x, y)`.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::envs::data::{DatasetMeta, Transition, TransitionDataset};
use crate::error::{Result, SaqError};
use crate::seed::derive_indexed;

/// Gap kept between the point mass and a wall face it was stopped at.
pub const WALL_MARGIN: f64 = 1e-6;

/// Layout shaped after the large D4RL point-mass maze.
pub const DEFAULT_LAYOUT: &str = "\
############
#....#.....#
#.##.#.#.#.#
#......#...#
#.####.###.#
#..#.#.....#
##.#.#.#.###
#S.#...#.G.#
############
";

#[derive(Clone, Debug, PartialEq)]
pub struct MazeSpec {
    walls: Vec<Vec<bool>>,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    pub goal_radius: f64,
    pub dt: f64,
    pub max_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: [f64; 2],
    pub reward: f64,
    /// Goal reached. Step-limit truncation is tracked by the caller.
    pub reached: bool,
}

impl MazeSpec {
    pub fn new(
        walls: Vec<Vec<bool>>,
        start: (usize, usize),
        goal: (usize, usize),
        goal_radius: f64,
        dt: f64,
        max_steps: usize,
    ) -> Result<Self> {
        let h = walls.len();
        if h == 0 || walls.iter().any(|r| r.len() != walls[0].len()) {
            return Err(SaqError::InvalidConfig("maze grid must be a non-empty rectangle".into()));
        }
        let spec = Self {
            walls,
            start,
            goal,
            goal_radius,
            dt,
            max_steps,
        };
        for (name, cell) in [("start", start), ("goal", goal)] {
            if spec.is_wall(cell.0 as isize, cell.1 as isize) {
                return Err(SaqError::InvalidConfig(format!("{name} cell {cell:?} is a wall")));
            }
        }
        if !(dt > 0.0 && dt <= 1.0) {
            return Err(SaqError::InvalidConfig(format!("dt must lie in (0, 1], got {dt}")));
        }
        if goal_radius <= 0.0 {
            return Err(SaqError::InvalidConfig("goal radius must be positive".into()));
        }
        Ok(spec)
    }

    /// The default 12×9 maze.
    pub fn default_maze() -> Self {
        Self::parse(DEFAULT_LAYOUT).expect("default layout is valid")
    }

    /// Parses a text grid: `#` wall, `.` free, `S` start, `G` goal. Physical
    /// parameters take their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut walls = Vec::new();
        let (mut start, mut goal) = (None, None);
        for (r, line) in text.lines().map(str::trim_end).filter(|l| !l.is_empty()).enumerate() {
            let mut row = Vec::new();
            for (c, ch) in line.chars().enumerate() {
                match ch {
                    '#' => row.push(true),
                    '.' => row.push(false),
                    'S' => {
                        start = Some((r, c));
                        row.push(false)
                    }
                    'G' => {
                        goal = Some((r, c));
                        row.push(false)
                    }
                    other => {
                        return Err(SaqError::InvalidConfig(format!(
                            "unexpected maze character {other:?} at row {r}, column {c}"
                        )))
                    }
                }
            }
            walls.push(row);
        }
        let start = start.ok_or_else(|| SaqError::InvalidConfig("maze has no start cell 'S'".into()))?;
        let goal = goal.ok_or_else(|| SaqError::InvalidConfig("maze has no goal cell 'G'".into()))?;
        Self::new(walls, start, goal, 0.5, 0.2, 300)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (r, row) in self.walls.iter().enumerate() {
            for (c, &w) in row.iter().enumerate() {
                out.push(if (r, c) == self.start {
                    'S'
                } else if (r, c) == self.goal {
                    'G'
                } else if w {
                    '#'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }

    pub fn height(&self) -> usize {
        self.walls.len()
    }

    pub fn width(&self) -> usize {
        self.walls[0].len()
    }

    /// Out-of-grid cells count as walls.
    pub fn is_wall(&self, row: isize, col: isize) -> bool {
        if row < 0 || col < 0 || row as usize >= self.height() || col as usize >= self.width() {
            return true;
        }
        self.walls[row as usize][col as usize]
    }

    pub fn cell_of(pos: [f64; 2]) -> (isize, isize) {
        (pos[1].floor() as isize, pos[0].floor() as isize)
    }

    pub fn in_wall(&self, pos: [f64; 2]) -> bool {
        let (r, c) = Self::cell_of(pos);
        self.is_wall(r, c)
    }

    pub fn center(cell: (usize, usize)) -> [f64; 2] {
        [cell.1 as f64 + 0.5, cell.0 as f64 + 0.5]
    }

    pub fn start_position(&self) -> [f64; 2] {
        Self::center(self.start)
    }

    pub fn goal_position(&self) -> [f64; 2] {
        Self::center(self.goal)
    }

    pub fn at_goal(&self, pos: [f64; 2]) -> bool {
        let g = self.goal_position();
        ((pos[0] - g[0]).powi(2) + (pos[1] - g[1]).powi(2)).sqrt() < self.goal_radius
    }

    /// Moves one coordinate by `delta`, stopping at the first wall face met.
    fn slide(&self, pos: [f64; 2], axis: usize, delta: f64) -> f64 {
        let from = pos[axis];
        let to = from + delta;
        let (row, col) = Self::cell_of(pos);
        let other = if axis == 0 { row } else { col };
        let blocked = |cell: isize| {
            if axis == 0 {
                self.is_wall(other, cell)
            } else {
                self.is_wall(cell, other)
            }
        };
        let mut cell = from.floor() as isize;
        let target = to.floor() as isize;
        if delta > 0.0 {
            while cell < target {
                if blocked(cell + 1) {
                    return (cell + 1) as f64 - WALL_MARGIN;
                }
                cell += 1;
            }
        } else {
            while cell > target {
                if blocked(cell - 1) {
                    return cell as f64 + WALL_MARGIN;
                }
                cell -= 1;
            }
        }
        to
    }

    /// One integration step with axis-separated collision resolution
    /// (x first, then y). The action is clipped to `[-1, 1]²`.
    pub fn step(&self, pos: [f64; 2], action: [f64; 2]) -> StepOutcome {
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let x = self.slide(pos, 0, self.dt * a[0]);
        let y = self.slide([x, pos[1]], 1, self.dt * a[1]);
        let next = [x, y];
        let reached = self.at_goal(next);
        StepOutcome {
            next,
            reward: if reached { 1.0 } else { 0.0 },
            reached,
        }
    }

    /// Breadth-first distances (in cells) to the goal; `None` for walls and
    /// unreachable cells.
    pub fn distance_map(&self) -> Vec<Vec<Option<usize>>> {
        let mut dist = vec![vec![None; self.width()]; self.height()];
        let mut queue = VecDeque::new();
        dist[self.goal.0][self.goal.1] = Some(0);
        queue.push_back(self.goal);
        while let Some((r, c)) = queue.pop_front() {
            let d = dist[r][c].unwrap();
            for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if self.is_wall(nr, nc) {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if dist[nr][nc].is_none() {
                    dist[nr][nc] = Some(d + 1);
                    queue.push_back((nr, nc));
                }
            }
        }
        dist
    }
}

/// Waypoint-following controller along a shortest grid path.
#[derive(Clone, Debug)]
pub struct ScriptedExpert {
    spec: MazeSpec,
    dist: Vec<Vec<Option<usize>>>,
    gain: f64,
}

impl ScriptedExpert {
    pub fn new(spec: &MazeSpec) -> Result<Self> {
        let dist = spec.distance_map();
        if dist[spec.start.0][spec.start.1].is_none() {
            return Err(SaqError::UnreachableGoal);
        }
        Ok(Self {
            spec: spec.clone(),
            dist,
            gain: 4.0,
        })
    }

    fn next_cell(&self, cell: (usize, usize)) -> (usize, usize) {
        let here = self.dist[cell.0][cell.1];
        let mut best = cell;
        let mut best_d = here.unwrap_or(usize::MAX);
        for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
            let (nr, nc) = (cell.0 as isize + dr, cell.1 as isize + dc);
            if self.spec.is_wall(nr, nc) {
                continue;
            }
            if let Some(d) = self.dist[nr as usize][nc as usize] {
                if d < best_d {
                    best_d = d;
                    best = (nr as usize, nc as usize);
                }
            }
        }
        best
    }

    /// Unit-clipped action toward the next cell centre on the shortest path
    /// (or the goal centre once inside the goal cell).
    pub fn act(&self, pos: [f64; 2]) -> [f64; 2] {
        let (r, c) = MazeSpec::cell_of(pos);
        let target = if self.spec.is_wall(r, c) {
            self.spec.goal_position()
        } else {
            let cell = (r as usize, c as usize);
            if cell == self.spec.goal {
                self.spec.goal_position()
            } else {
                MazeSpec::center(self.next_cell(cell))
            }
        };
        [
            (self.gain * (target[0] - pos[0])).clamp(-1.0, 1.0),
            (self.gain * (target[1] - pos[1])).clamp(-1.0, 1.0),
        ]
    }
}

/// One expert rollout from the start cell with Gaussian action noise.
pub fn expert_rollout<R: Rng + ?Sized>(
    spec: &MazeSpec,
    expert: &ScriptedExpert,
    noise_scale: f64,
    rng: &mut R,
) -> (Vec<Transition>, bool) {
    let noise = Normal::new(0.0, noise_scale.max(0.0)).expect("finite noise scale");
    let mut pos = spec.start_position();
    let mut out = Vec::new();
    for _ in 0..spec.max_steps {
        let mut a = expert.act(pos);
        if noise_scale > 0.0 {
            for v in a.iter_mut() {
                *v = (*v + noise.sample(rng)).clamp(-1.0, 1.0);
            }
        }
        let step = spec.step(pos, a);
        out.push(Transition {
            state: pos.to_vec(),
            action: a.to_vec(),
            reward: step.reward,
            next_state: step.next.to_vec(),
            terminal: step.reached,
        });
        pos = step.next;
        if step.reached {
            return (out, true);
        }
    }
    (out, false)
}

/// Concatenated expert demonstrations; trajectory `i` draws its noise from a
/// stream derived from `(seed, i)`.
pub fn generate_demonstrations(
    spec: &MazeSpec,
    n_trajectories: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<TransitionDataset> {
    if n_trajectories == 0 {
        return Err(SaqError::InvalidConfig("need at least one trajectory".into()));
    }
    let expert = ScriptedExpert::new(spec)?;
    let mut ds = TransitionDataset::new(DatasetMeta {
        env: "maze".into(),
        state_dim: 2,
        action_dim: 2,
        seed,
    });
    for i in 0..n_trajectories {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(derive_indexed(
            seed,
            "demonstration",
            i as u64,
        ));
        let (traj, reached) = expert_rollout(spec, &expert, noise_scale, &mut rng);
        if !reached && noise_scale == 0.0 {
            return Err(SaqError::ExpertFailed { trajectory: i });
        }
        for t in traj {
            ds.push(t)?;
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn goal_center_with_zero_action_terminates() {
        let spec = MazeSpec::default_maze();
        let out = spec.step(spec.goal_position(), [0.0, 0.0]);
        assert_eq!(out.reward, 1.0);
        assert!(out.reached);
    }

    #[test]
    fn free_motion_moves_by_dt() {
        let mut spec = MazeSpec::default_maze();
        spec.dt = 0.1;
        let pos = [2.5, 1.5];
        let out = spec.step(pos, [1.0, 0.0]);
        assert!((out.next[0] - 2.6).abs() < 1e-12);
        assert_eq!(out.next[1], 1.5);
    }

    /// Reference: the same move split into many tiny sub-steps, each rejected
    /// outright if it would end inside a wall.
    fn fine_step(spec: &MazeSpec, pos: [f64; 2], action: [f64; 2]) -> [f64; 2] {
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let n = 20_000;
        let mut p = pos;
        for axis in 0..2 {
            let d = spec.dt * a[axis] / n as f64;
            for _ in 0..n {
                let mut q = p;
                q[axis] += d;
                if spec.in_wall(q) {
                    break;
                }
                p = q;
            }
        }
        p
    }

    #[test]
    fn collisions_match_fine_step_simulation() {
        let mut spec = MazeSpec::default_maze();
        spec.dt = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut blocked = 0;
        for _ in 0..2000 {
            let pos = loop {
                let p = [rng.gen_range(0.0..8.0), rng.gen_range(0.0..8.0)];
                if !spec.in_wall(p) {
                    break p;
                }
            };
            let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let got = spec.step(pos, a).next;
            let want = fine_step(&spec, pos, a);
            let free = [pos[0] + spec.dt * a[0], pos[1] + spec.dt * a[1]];
            if (got[0] - free[0]).abs() > 1e-9 || (got[1] - free[1]).abs() > 1e-9 {
                blocked += 1;
            }
            for axis in 0..2 {
                assert!((got[axis] - want[axis]).abs() < 1e-4, "{pos:?} {a:?}: {got:?} vs {want:?}");
            }
        }
        assert!(blocked > 100, "test should exercise wall contacts, saw {blocked}");
    }

    #[test]
    fn pushing_into_wall_stops_at_face() {
        let spec = MazeSpec::default_maze();
        // Cell (1,1) has a wall to the west at x = 1.
        let out = spec.step([1.05, 1.5], [-1.0, 0.0]);
        assert!((out.next[0] - (1.0 + WALL_MARGIN)).abs() < 1e-12);
        assert_eq!(out.next[1], 1.5);
    }

    #[test]
    fn random_fuzzing_never_enters_walls() {
        let spec = MazeSpec::default_maze();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pos = spec.start_position();
        for _ in 0..200_000 {
            let a = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
            pos = spec.step(pos, a).next;
            assert!(!spec.in_wall(pos), "entered wall at {pos:?}");
        }
    }

    #[test]
    fn text_round_trip() {
        let spec = MazeSpec::default_maze();
        assert_eq!(spec.to_text(), DEFAULT_LAYOUT);
        assert!(MazeSpec::parse("#S#\n#.#\n###\n").is_err());
        assert!(MazeSpec::parse("S.x\n..G\n").is_err());
    }

    #[test]
    fn unreachable_goal_is_rejected() {
        let spec = MazeSpec::parse("#####\n#S#G#\n#####\n").unwrap();
        assert!(matches!(ScriptedExpert::new(&spec), Err(SaqError::UnreachableGoal)));
    }

    #[test]
    fn expert_points_at_goal_on_last_leg() {
        let spec = MazeSpec::default_maze();
        let expert = ScriptedExpert::new(&spec).unwrap();
        let g = spec.goal_position();
        let pos = [g[0] - 0.6, g[1]];
        let a = expert.act(pos);
        let d = [g[0] - pos[0], g[1] - pos[1]];
        let cos = (a[0] * d[0] + a[1] * d[1]) / ((a[0].hypot(a[1])) * d[0].hypot(d[1]));
        assert!(cos > 0.99);
    }

    #[test]
    fn noiseless_expert_reaches_goal() {
        let spec = MazeSpec::default_maze();
        let ds = generate_demonstrations(&spec, 1, 0.0, 0).unwrap();
        let last = ds.transitions().last().unwrap();
        assert!(last.terminal && last.reward == 1.0);
        assert!(ds.len() < spec.max_steps);
    }

    #[test]
    fn zero_trajectories_is_an_error() {
        assert!(generate_demonstrations(&MazeSpec::default_maze(), 0, 0.05, 1).is_err());
    }
}
