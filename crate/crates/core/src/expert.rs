//! Shortest-path demonstrator: breadth-first search over agent poses
//! `(row, col, direction)` with unit-cost left/right/forward edges, followed
//! by a final `done`.

use std::collections::VecDeque;

use thiserror::Error;

use crate::gridworld::{
    self, dir_offset, encode_observation, Action, EnvConfig, EnvError, EpisodeState, FactoredGrid, Goal, EMPTY, GRID,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExpertError {
    #[error("no pose faces an object matching `{0}`")]
    Unsolvable(Goal),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pose {
    pub row: usize,
    pub col: usize,
    pub direction: u8,
}

impl Pose {
    fn key(self) -> usize {
        (self.row * GRID + self.col) * 4 + self.direction as usize
    }

    fn faced(self) -> (usize, usize) {
        let (dr, dc) = dir_offset(self.direction);
        ((self.row as isize + dr) as usize, (self.col as isize + dc) as usize)
    }
}

/// Successor of `pose` under a movement action; `None` for non-moving actions.
pub fn next_pose(state: &EpisodeState, pose: Pose, action: Action) -> Option<Pose> {
    match action {
        Action::Left => Some(Pose {
            direction: (pose.direction + 3) % 4,
            ..pose
        }),
        Action::Right => Some(Pose {
            direction: (pose.direction + 1) % 4,
            ..pose
        }),
        Action::Forward => {
            let (r, c) = pose.faced();
            if state.grid[r][c].kind == EMPTY {
                Some(Pose { row: r, col: c, ..pose })
            } else {
                Some(pose)
            }
        }
        _ => None,
    }
}

pub fn is_goal_pose(state: &EpisodeState, pose: Pose) -> bool {
    let (r, c) = pose.faced();
    state.goal.matches(state.grid[r][c])
}

/// Minimal action sequence reaching a pose that faces a goal object, then `done`.
pub fn plan(state: &EpisodeState) -> Result<Vec<Action>, ExpertError> {
    let start = Pose {
        row: state.agent.0,
        col: state.agent.1,
        direction: state.direction,
    };
    let mut parent: Vec<Option<(usize, Action)>> = vec![None; GRID * GRID * 4];
    let mut visited = vec![false; GRID * GRID * 4];
    visited[start.key()] = true;
    let mut queue = VecDeque::from([start]);
    while let Some(pose) = queue.pop_front() {
        if is_goal_pose(state, pose) {
            let mut actions = vec![Action::Done];
            let mut key = pose.key();
            while let Some((prev, action)) = parent[key] {
                actions.push(action);
                key = prev;
            }
            actions.reverse();
            return Ok(actions);
        }
        for action in [Action::Left, Action::Right, Action::Forward] {
            let next = next_pose(state, pose, action).expect("movement action");
            if !visited[next.key()] {
                visited[next.key()] = true;
                parent[next.key()] = Some((pose.key(), action));
                queue.push_back(next);
            }
        }
    }
    Err(ExpertError::Unsolvable(state.goal))
}

/// One demonstration: `states` holds `s_0..s_T` (one more than `actions`).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub goal: Goal,
    pub states: Vec<FactoredGrid>,
    pub actions: Vec<u8>,
    pub rewards: Vec<f32>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// The state in which `done` was taken; it faces the goal object.
    pub fn rewarding_state(&self) -> &FactoredGrid {
        &self.states[self.actions.len() - 1]
    }

    pub fn final_state(&self) -> &FactoredGrid {
        self.states.last().expect("non-empty trajectory")
    }
}

pub fn rollout_expert(seed: u64, config: &EnvConfig) -> Result<Trajectory, ExpertError> {
    let mut state = gridworld::reset(seed, config)?;
    let actions = plan(&state)?;
    let mut traj = Trajectory {
        seed,
        goal: state.goal,
        states: vec![encode_observation(&state)],
        actions: Vec::with_capacity(actions.len()),
        rewards: Vec::with_capacity(actions.len()),
    };
    for a in actions {
        let out = gridworld::step(&state, a)?;
        traj.actions.push(a.id());
        traj.rewards.push(out.reward as f32);
        traj.states.push(encode_observation(&out.state));
        state = out.state;
    }
    debug_assert_eq!(traj.rewards.last(), Some(&1.0));
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{Article, Cell, BALL, BOX};

    fn room(objects: &[((usize, usize), Cell)], agent: (usize, usize), dir: u8, goal: Goal) -> EpisodeState {
        let mut s = gridworld::reset(0, &EnvConfig::default()).unwrap();
        for r in 0..GRID {
            for c in 0..GRID {
                let border = r == 0 || c == 0 || r == GRID - 1 || c == GRID - 1;
                s.grid[r][c] = if border { Cell::WALL } else { Cell::EMPTY };
            }
        }
        for &((r, c), cell) in objects {
            s.grid[r][c] = cell;
        }
        s.agent = agent;
        s.direction = dir;
        s.goal = goal;
        s
    }

    #[test]
    fn straight_line_plan() {
        let goal = Goal::new(Article::The, 2, BALL);
        let s = room(&[((1, 3), Cell::object(BALL, 2))], (1, 1), 1, goal);
        assert_eq!(plan(&s).unwrap(), vec![Action::Forward, Action::Done]);
    }

    #[test]
    fn already_facing_goal() {
        let goal = Goal::new(Article::A, 1, BOX);
        let s = room(&[((2, 2), Cell::object(BOX, 1))], (1, 2), 2, goal);
        assert_eq!(plan(&s).unwrap(), vec![Action::Done]);
    }

    #[test]
    fn behind_turns_left_first() {
        let goal = Goal::new(Article::A, 1, BOX);
        let s = room(&[((3, 3), Cell::object(BOX, 1))], (2, 3), 0, goal);
        assert_eq!(plan(&s).unwrap(), vec![Action::Left, Action::Left, Action::Done]);
    }

    #[test]
    fn enclosed_goal_is_unsolvable() {
        let goal = Goal::new(Article::A, 1, BOX);
        let wall = Cell::object(BALL, 3);
        let s = room(
            &[((1, 6), Cell::object(BOX, 1)), ((1, 5), wall), ((2, 6), wall)],
            (4, 2),
            0,
            goal,
        );
        assert_eq!(plan(&s), Err(ExpertError::Unsolvable(goal)));
    }

    #[test]
    fn rollout_rewards_and_replay() {
        let cfg = EnvConfig::default();
        for seed in 0..50 {
            let t = rollout_expert(seed, &cfg).unwrap();
            assert_eq!(t.states.len(), t.actions.len() + 1);
            let (last, rest) = t.rewards.split_last().unwrap();
            assert_eq!(*last, 1.0);
            assert!(rest.iter().all(|&r| r == 0.0));
            let mut s = gridworld::reset(seed, &cfg).unwrap();
            for (i, &a) in t.actions.iter().enumerate() {
                s = gridworld::step(&s, Action::from_id(a).unwrap()).unwrap().state;
                assert_eq!(encode_observation(&s), t.states[i + 1]);
            }
            assert_eq!(t, rollout_expert(seed, &cfg).unwrap());
        }
    }
}
