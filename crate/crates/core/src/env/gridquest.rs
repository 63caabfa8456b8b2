//! A 9x9 tile maze rendered to pixels: collect keys, open the doors they
//! gate, reach the goal. Sparse reward of +1 at the goal only. Every
//! episode seed generates a fresh maze (a spanning tree over 16 rooms),
//! so the layout is part of the state fingerprint.

use rand::Rng;

use crate::env::{Environment, Frame, StepOutcome};
use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_from_seed};

pub const GRID: usize = 9;
const CELL_PX: usize = 7;
const SIDE_PX: usize = GRID * CELL_PX;

// grayscale-distinct palette
const COLOR_FLOOR: [u8; 3] = [210, 210, 210];
const COLOR_WALL: [u8; 3] = [40, 40, 40];
const COLOR_DOOR: [u8; 3] = [70, 70, 70];
const COLOR_KEY: [u8; 3] = [110, 110, 110];
const COLOR_GOAL: [u8; 3] = [160, 160, 160];
const COLOR_AGENT: [u8; 3] = [255, 255, 255];

pub struct GridQuestEnv {
    pub max_steps: usize,
    layout_seed: u64,
    open: Vec<bool>,
    start: usize,
    goal: usize,
    keys: Vec<usize>,
    doors: Vec<usize>,
    collected: Vec<bool>,
    opened: Vec<bool>,
    agent: usize,
    steps: usize,
    needs_reset: bool,
}

impl Default for GridQuestEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl GridQuestEnv {
    pub fn new() -> Self {
        GridQuestEnv {
            max_steps: 4500,
            layout_seed: 0,
            open: vec![false; GRID * GRID],
            start: 0,
            goal: 0,
            keys: Vec::new(),
            doors: Vec::new(),
            collected: Vec::new(),
            opened: Vec::new(),
            agent: 0,
            steps: 0,
            needs_reset: true,
        }
    }

    fn neighbors(cell: usize) -> impl Iterator<Item = usize> {
        let (r, c) = (cell / GRID, cell % GRID);
        let mut out = Vec::with_capacity(4);
        if r > 0 {
            out.push(cell - GRID);
        }
        if r + 1 < GRID {
            out.push(cell + GRID);
        }
        if c > 0 {
            out.push(cell - 1);
        }
        if c + 1 < GRID {
            out.push(cell + 1);
        }
        out.into_iter()
    }

    /// BFS distances over open cells, treating `blocked` as walls.
    fn distances(&self, from: usize, blocked: &[usize]) -> Vec<Option<usize>> {
        let mut dist = vec![None; GRID * GRID];
        if blocked.contains(&from) {
            return dist;
        }
        dist[from] = Some(0);
        let mut queue = std::collections::VecDeque::from([from]);
        while let Some(cell) = queue.pop_front() {
            for n in Self::neighbors(cell) {
                if self.open[n] && dist[n].is_none() && !blocked.contains(&n) {
                    dist[n] = Some(dist[cell].unwrap() + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    fn farthest(dist: &[Option<usize>], exclude: &[usize]) -> Option<usize> {
        let mut best: Option<(usize, usize)> = None;
        for (cell, d) in dist.iter().enumerate() {
            if let Some(d) = d {
                if exclude.contains(&cell) {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((_, bd)) => *d > bd,
                };
                if better {
                    best = Some((cell, *d));
                }
            }
        }
        best.map(|(cell, _)| cell)
    }

    fn shortest_path(&self, from: usize, to: usize) -> Vec<usize> {
        let mut parent = vec![usize::MAX; GRID * GRID];
        parent[from] = from;
        let mut queue = std::collections::VecDeque::from([from]);
        while let Some(cell) = queue.pop_front() {
            if cell == to {
                break;
            }
            for n in Self::neighbors(cell) {
                if self.open[n] && parent[n] == usize::MAX {
                    parent[n] = cell;
                    queue.push_back(n);
                }
            }
        }
        let mut path = vec![to];
        let mut cur = to;
        while parent[cur] != cur {
            cur = parent[cur];
            path.push(cur);
        }
        path.reverse();
        path
    }

    fn generate(&mut self, seed: u64) {
        let mut rng = rng_from_seed(seed);
        self.layout_seed = seed;
        self.open = vec![false; GRID * GRID];

        // spanning tree over the 4x4 room lattice at odd coordinates
        let rooms: Vec<usize> = (0..16)
            .map(|i| (2 * (i / 4) + 1) * GRID + 2 * (i % 4) + 1)
            .collect();
        let start_room = rooms[rng.gen_range(0..rooms.len())];
        let mut visited = vec![false; GRID * GRID];
        visited[start_room] = true;
        self.open[start_room] = true;
        let mut stack = vec![start_room];
        while let Some(&cell) = stack.last() {
            let (r, c) = (cell / GRID, cell % GRID);
            let mut options = Vec::new();
            for (dr, dc) in [(-2isize, 0isize), (2, 0), (0, -2), (0, 2)] {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr >= 1 && nr < GRID as isize - 1 && nc >= 1 && nc < GRID as isize - 1 {
                    let n = nr as usize * GRID + nc as usize;
                    if !visited[n] {
                        options.push(n);
                    }
                }
            }
            if options.is_empty() {
                stack.pop();
                continue;
            }
            let next = options[rng.gen_range(0..options.len())];
            let mid = (cell + next) / 2;
            self.open[mid] = true;
            self.open[next] = true;
            visited[next] = true;
            stack.push(next);
        }

        self.start = start_room;
        let dist = self.distances(self.start, &[]);
        self.goal = Self::farthest(&dist, &[self.start]).expect("maze has open cells");

        self.keys.clear();
        self.doors.clear();
        let path = self.shortest_path(self.start, self.goal);
        if path.len() >= 5 {
            let door0 = path[path.len() / 2];
            let near = self.distances(self.start, &[door0]);
            if let Some(key0) = Self::farthest(&near, &[self.start, self.goal]) {
                self.doors.push(door0);
                self.keys.push(key0);

                // a second gate on the far segment when there is room
                let door0_at = path.iter().position(|&c| c == door0).unwrap();
                let far_segment = &path[door0_at..];
                if far_segment.len() >= 5 {
                    let door1 = far_segment[far_segment.len() / 2];
                    if door1 != door0 && door1 != self.goal {
                        let mid_region = self.distances(self.start, &[door1]);
                        let exclude: Vec<usize> = {
                            let mut ex = vec![self.start, self.goal, door0, key0];
                            // keep the second key strictly behind the first door
                            for (cell, d) in near.iter().enumerate() {
                                if d.is_some() {
                                    ex.push(cell);
                                }
                            }
                            ex
                        };
                        if let Some(key1) = Self::farthest(&mid_region, &exclude) {
                            self.doors.push(door1);
                            self.keys.push(key1);
                        }
                    }
                }
            }
        }

        self.collected = vec![false; self.keys.len()];
        self.opened = vec![false; self.doors.len()];
        self.agent = self.start;
        self.steps = 0;
        self.needs_reset = false;
    }

    fn inventory(&self) -> usize {
        let held = self.collected.iter().filter(|c| **c).count();
        let used = self.opened.iter().filter(|o| **o).count();
        held - used
    }

    fn render(&self) -> Frame {
        let mut rgb = vec![0u8; 3 * SIDE_PX * SIDE_PX];
        for cell in 0..GRID * GRID {
            let mut color = if self.open[cell] {
                COLOR_FLOOR
            } else {
                COLOR_WALL
            };
            if let Some(d) = self.doors.iter().position(|&c| c == cell) {
                if !self.opened[d] {
                    color = COLOR_DOOR;
                }
            }
            if let Some(k) = self.keys.iter().position(|&c| c == cell) {
                if !self.collected[k] {
                    color = COLOR_KEY;
                }
            }
            if cell == self.goal {
                color = COLOR_GOAL;
            }
            if cell == self.agent {
                color = COLOR_AGENT;
            }
            let (r, c) = (cell / GRID, cell % GRID);
            for py in 0..CELL_PX {
                for px in 0..CELL_PX {
                    let idx = 3 * ((r * CELL_PX + py) * SIDE_PX + (c * CELL_PX + px));
                    rgb[idx..idx + 3].copy_from_slice(&color);
                }
            }
        }
        Frame::new(SIDE_PX, SIDE_PX, rgb)
    }
}

impl Environment for GridQuestEnv {
    fn action_count(&self) -> usize {
        4
    }

    fn frame_size(&self) -> (usize, usize) {
        (SIDE_PX, SIDE_PX)
    }

    fn reset(&mut self, seed: u64) -> Result<Frame> {
        self.generate(seed);
        Ok(self.render())
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if self.needs_reset {
            return Err(Error::Usage(
                "stepping a finished episode; reset the environment first".into(),
            ));
        }
        if action >= 4 {
            return Err(Error::Usage(format!("action {action} out of range 0..4")));
        }
        self.steps += 1;

        let (r, c) = (self.agent / GRID, self.agent % GRID);
        let target = match action {
            0 if r > 0 => Some(self.agent - GRID),
            1 if r + 1 < GRID => Some(self.agent + GRID),
            2 if c > 0 => Some(self.agent - 1),
            3 if c + 1 < GRID => Some(self.agent + 1),
            _ => None,
        };

        let mut reward = 0.0;
        let mut done = false;
        if let Some(t) = target {
            if self.open[t] {
                let door = self
                    .doors
                    .iter()
                    .position(|&d| d == t)
                    .filter(|&d| !self.opened[d]);
                match door {
                    Some(d) if self.inventory() >= 1 => {
                        self.opened[d] = true;
                        self.agent = t;
                    }
                    Some(_) => {} // locked
                    None => {
                        self.agent = t;
                        if let Some(k) = self.keys.iter().position(|&key| key == t) {
                            if !self.collected[k] {
                                self.collected[k] = true;
                            }
                        }
                        if t == self.goal {
                            reward = 1.0;
                            done = true;
                        }
                    }
                }
            }
        }
        if self.steps >= self.max_steps {
            done = true;
        }
        if done {
            self.needs_reset = true;
        }
        Ok(StepOutcome {
            frame: self.render(),
            reward,
            done,
        })
    }

    fn state_hash(&self) -> Option<u64> {
        let key_mask = self
            .collected
            .iter()
            .enumerate()
            .fold(0u64, |m, (i, c)| m | ((*c as u64) << i));
        let door_mask = self
            .opened
            .iter()
            .enumerate()
            .fold(0u64, |m, (i, o)| m | ((*o as u64) << i));
        Some(derive_seed(
            self.layout_seed,
            &[self.agent as u64, key_mask, door_mask],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    /// Exhaustive solver over (position, keys, doors) states; the
    /// independent reachability oracle.
    fn solvable(env: &GridQuestEnv) -> bool {
        let mut seen = HashSet::new();
        let start = (env.start, 0u8, 0u8);
        let mut queue = std::collections::VecDeque::from([start]);
        seen.insert(start);
        while let Some((pos, keys, doors)) = queue.pop_front() {
            if pos == env.goal {
                return true;
            }
            for n in GridQuestEnv::neighbors(pos) {
                if !env.open[n] {
                    continue;
                }
                let mut keys = keys;
                let mut doors = doors;
                if let Some(d) = env.doors.iter().position(|&c| c == n) {
                    if doors & (1 << d) == 0 {
                        let held = (keys.count_ones() - doors.count_ones()) as i32;
                        if held >= 1 {
                            doors |= 1 << d;
                        } else {
                            continue;
                        }
                    }
                }
                if let Some(k) = env.keys.iter().position(|&c| c == n) {
                    keys |= 1 << k;
                }
                let state = (n, keys, doors);
                if seen.insert(state) {
                    queue.push_back(state);
                }
            }
        }
        false
    }

    #[test]
    fn every_generated_maze_is_solvable() {
        let mut env = GridQuestEnv::new();
        for seed in 0..200u64 {
            env.reset(seed).unwrap();
            assert!(solvable(&env), "seed {seed} generated an unsolvable maze");
            assert!(!env.doors.is_empty(), "seed {seed}: expected gated regions");
            assert_eq!(env.keys.len(), env.doors.len());
        }
    }

    #[test]
    fn goal_is_behind_a_locked_door() {
        let mut env = GridQuestEnv::new();
        let mut gated = 0;
        for seed in 0..50u64 {
            env.reset(seed).unwrap();
            // with the first door closed the goal must be unreachable
            let dist = env.distances(env.start, &env.doors[..1].to_vec());
            if dist[env.goal].is_none() {
                gated += 1;
            }
        }
        assert_eq!(gated, 50, "the first door should always gate the goal");
    }

    #[test]
    fn deterministic_given_seed_and_actions() {
        let run = |seed: u64| -> (Vec<u8>, f64, Vec<u64>) {
            let mut env = GridQuestEnv::new();
            let mut frame = env.reset(seed).unwrap();
            let mut total = 0.0;
            let mut hashes = vec![env.state_hash().unwrap()];
            for action in [0, 1, 2, 3, 1, 1, 3, 3, 0, 2, 1, 3] {
                let out = env.step(action).unwrap();
                frame = out.frame;
                total += out.reward;
                hashes.push(env.state_hash().unwrap());
            }
            (frame.rgb, total, hashes)
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7).0, run(8).0, "different seeds give different mazes");
    }

    #[test]
    fn bumping_a_wall_changes_nothing() {
        let mut env = GridQuestEnv::new();
        env.reset(3).unwrap();
        let before = env.state_hash().unwrap();
        // find a direction that is a wall from the start cell
        for action in 0..4 {
            let (r, c) = (env.agent / GRID, env.agent % GRID);
            let target = match action {
                0 if r > 0 => Some(env.agent - GRID),
                1 if r + 1 < GRID => Some(env.agent + GRID),
                2 if c > 0 => Some(env.agent - 1),
                3 if c + 1 < GRID => Some(env.agent + 1),
                _ => None,
            };
            let blocked = target.map(|t| !env.open[t]).unwrap_or(true);
            if blocked {
                env.step(action).unwrap();
                assert_eq!(env.state_hash().unwrap(), before);
                return;
            }
        }
        panic!("start cell had no walls around it");
    }

    #[test]
    fn episode_caps_at_max_steps() {
        let mut env = GridQuestEnv::new();
        env.max_steps = 5;
        env.reset(1).unwrap();
        for i in 0..5 {
            let out = env.step(0).unwrap();
            assert_eq!(out.done, i == 4);
        }
        assert!(matches!(env.step(0), Err(Error::Usage(_))));
    }

    #[test]
    fn hash_distinguishes_layout_position_and_progress() {
        let mut env = GridQuestEnv::new();
        env.reset(11).unwrap();
        let h1 = env.state_hash().unwrap();
        env.reset(12).unwrap();
        let h2 = env.state_hash().unwrap();
        assert_ne!(h1, h2);

        env.reset(11).unwrap();
        assert_eq!(env.state_hash().unwrap(), h1);
        // move somewhere open
        for action in 0..4 {
            env.step(action).unwrap();
        }
        if env.agent != env.start {
            assert_ne!(env.state_hash().unwrap(), h1);
        }
    }
}
