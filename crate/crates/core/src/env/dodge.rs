//! A side-scrolling dodge field: hazards spawn at the right edge and
//! sweep left; the agent holds a fixed column and moves vertically.
//! Dense reward of +0.1 per survived step; contact ends the episode.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{Environment, Frame, StepOutcome};
use crate::error::{Error, Result};
use crate::seeding::rng_from_seed;

pub const FIELD: usize = 21;
const CELL_PX: usize = 4;
const SIDE_PX: usize = FIELD * CELL_PX; // 84, no resampling needed

const AGENT_COL: usize = 2;
const SPAWN_RATE: f64 = 0.25;
const FAST_RATE: f64 = 0.15;

const COLOR_BG: [u8; 3] = [25, 25, 25];
const COLOR_HAZARD: [u8; 3] = [200, 60, 60];
const COLOR_AGENT: [u8; 3] = [240, 240, 240];

#[derive(Debug, Clone, Copy)]
struct Hazard {
    row: usize,
    col: i32,
    speed: i32,
}

pub struct DodgeEnv {
    pub max_steps: usize,
    rng: ChaCha8Rng,
    agent_row: usize,
    hazards: Vec<Hazard>,
    steps: usize,
    needs_reset: bool,
}

impl Default for DodgeEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl DodgeEnv {
    pub fn new() -> Self {
        DodgeEnv {
            max_steps: 4500,
            rng: rng_from_seed(0),
            agent_row: FIELD / 2,
            hazards: Vec::new(),
            steps: 0,
            needs_reset: true,
        }
    }

    fn render(&self) -> Frame {
        let mut rgb = Vec::with_capacity(3 * SIDE_PX * SIDE_PX);
        for _ in 0..SIDE_PX * SIDE_PX {
            rgb.extend_from_slice(&COLOR_BG);
        }
        let mut paint = |row: usize, col: usize, color: [u8; 3]| {
            for py in 0..CELL_PX {
                for px in 0..CELL_PX {
                    let idx = 3 * ((row * CELL_PX + py) * SIDE_PX + (col * CELL_PX + px));
                    rgb[idx..idx + 3].copy_from_slice(&color);
                }
            }
        };
        for h in &self.hazards {
            if h.col >= 0 && (h.col as usize) < FIELD {
                paint(h.row, h.col as usize, COLOR_HAZARD);
            }
        }
        paint(self.agent_row, AGENT_COL, COLOR_AGENT);
        Frame::new(SIDE_PX, SIDE_PX, rgb)
    }
}

impl Environment for DodgeEnv {
    fn action_count(&self) -> usize {
        3 // stay, up, down
    }

    fn frame_size(&self) -> (usize, usize) {
        (SIDE_PX, SIDE_PX)
    }

    fn reset(&mut self, seed: u64) -> Result<Frame> {
        self.rng = rng_from_seed(seed);
        self.agent_row = FIELD / 2;
        self.hazards.clear();
        self.steps = 0;
        self.needs_reset = false;
        Ok(self.render())
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if self.needs_reset {
            return Err(Error::Usage(
                "stepping a finished episode; reset the environment first".into(),
            ));
        }
        if action >= 3 {
            return Err(Error::Usage(format!("action {action} out of range 0..3")));
        }
        self.steps += 1;

        match action {
            1 if self.agent_row > 0 => self.agent_row -= 1,
            2 if self.agent_row + 1 < FIELD => self.agent_row += 1,
            _ => {}
        }

        // sweep hazards left; a hazard that lands on or jumps across the
        // agent cell is a hit
        let mut dead = false;
        for h in &mut self.hazards {
            let before = h.col;
            h.col -= h.speed;
            if h.row == self.agent_row
                && h.col <= AGENT_COL as i32
                && (AGENT_COL as i32) < before
            {
                dead = true;
            }
        }
        self.hazards.retain(|h| h.col >= 0);

        if self.rng.gen::<f64>() < SPAWN_RATE {
            let row = self.rng.gen_range(0..FIELD);
            let speed = if self.rng.gen::<f64>() < FAST_RATE { 2 } else { 1 };
            self.hazards.push(Hazard {
                row,
                col: (FIELD - 1) as i32,
                speed,
            });
        }

        let done = dead || self.steps >= self.max_steps;
        let reward = if dead { 0.0 } else { 0.1 };
        if done {
            self.needs_reset = true;
        }
        Ok(StepOutcome {
            frame: self.render(),
            reward,
            done,
        })
    }
}
