//! Gather and Battle gridworlds.
//!
//! Agents occupy one cell each and act simultaneously: every step resolves
//! attacks first (on start-of-step positions), then deaths, then moves,
//! then HP regeneration. Dead agents leave the map for good and are
//! invisible to everyone else.

mod dynamics;
mod enemy;
mod metrics;
mod observe;

use std::sync::Arc;

use crate::error::{Error, Result};

pub use dynamics::{reset, step};
pub use enemy::scripted_enemy_policy;
pub use metrics::{team_metrics, MetricsKind, Ratio, TeamMetrics};
pub use observe::{observe, Observation, NUM_CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scenario {
    Gather,
    Battle,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Gather => "gather",
            Scenario::Battle => "battle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gather" => Some(Scenario::Gather),
            "battle" => Some(Scenario::Battle),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Team {
    Blue,
    Red,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    North,
    East,
    South,
    West,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::North,
        Direction::East,
        Direction::South,
        Direction::West,
    ];

    pub fn delta(self) -> (i64, i64) {
        match self {
            Direction::North => (-1, 0),
            Direction::East => (0, 1),
            Direction::South => (1, 0),
            Direction::West => (0, -1),
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Move(Direction),
    Attack(Direction),
    NoOp,
}

/// Size of the discrete action space.
pub const NUM_ACTIONS: usize = 9;

impl Action {
    /// Moves occupy indices 0..4, attacks 4..8 and `NoOp` is 8.
    pub fn index(self) -> usize {
        match self {
            Action::Move(d) => d.index(),
            Action::Attack(d) => 4 + d.index(),
            Action::NoOp => 8,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        match i {
            0..=3 => Some(Action::Move(Direction::ALL[i])),
            4..=7 => Some(Action::Attack(Direction::ALL[i - 4])),
            8 => Some(Action::NoOp),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pos {
    pub row: usize,
    pub col: usize,
}

impl Pos {
    pub fn new(row: usize, col: usize) -> Self {
        Pos { row, col }
    }

    pub fn offset(self, dr: i64, dc: i64, size: usize) -> Option<Pos> {
        let r = self.row as i64 + dr;
        let c = self.col as i64 + dc;
        (r >= 0 && c >= 0 && (r as usize) < size && (c as usize) < size)
            .then(|| Pos::new(r as usize, c as usize))
    }

    pub fn step(self, d: Direction, size: usize) -> Option<Pos> {
        let (dr, dc) = d.delta();
        self.offset(dr, dc, size)
    }

    pub fn manhattan(self, other: Pos) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardTable {
    /// Paid to the agent landing the hit that absorbs a food cell.
    pub food_absorb: f64,
    /// Paid per hit on a hostile agent.
    pub attack_hit: f64,
    /// Paid to the last attacker of an agent that dies.
    pub kill: f64,
    /// Paid by every agent alive at the start of a step.
    pub step_cost: f64,
    pub death: f64,
}

impl RewardTable {
    pub fn gather() -> Self {
        RewardTable {
            food_absorb: 5.0,
            attack_hit: 0.0,
            kill: 0.0,
            step_cost: -0.01,
            death: -1.0,
        }
    }

    pub fn battle() -> Self {
        RewardTable {
            food_absorb: 0.0,
            attack_hit: 0.2,
            kill: 5.0,
            step_cost: -0.005,
            death: -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub scenario: Scenario,
    pub grid_size: usize,
    /// Agents in Gather; agents per team in Battle.
    pub num_agents: usize,
    pub num_food: usize,
    pub view_size: usize,
    pub max_steps: usize,
    pub rewards: RewardTable,
    pub seed: u64,
    pub max_hp: f64,
    pub attack_damage: f64,
    pub hp_regen: f64,
    pub food_hits: u32,
    /// Whether Gather agents may damage one another.
    pub gather_friendly_fire: bool,
}

impl EnvConfig {
    /// 30x30 map, 74 agents, 157 food, 15x15 view.
    pub fn gather() -> Self {
        EnvConfig {
            scenario: Scenario::Gather,
            grid_size: 30,
            num_agents: 74,
            num_food: 157,
            view_size: 15,
            max_steps: 300,
            rewards: RewardTable::gather(),
            seed: 0,
            max_hp: 10.0,
            // a single attack kills in Gather
            attack_damage: 10.0,
            hp_regen: 0.0,
            food_hits: 5,
            gather_friendly_fire: true,
        }
    }

    /// 30 vs 30 on a 30x30 map with a near-global 29x29 view.
    pub fn battle() -> Self {
        EnvConfig {
            scenario: Scenario::Battle,
            grid_size: 30,
            num_agents: 30,
            num_food: 0,
            view_size: 29,
            max_steps: 300,
            rewards: RewardTable::battle(),
            seed: 0,
            max_hp: 10.0,
            attack_damage: 2.0,
            hp_regen: 0.1,
            food_hits: 5,
            gather_friendly_fire: true,
        }
    }

    pub fn for_scenario(s: Scenario) -> Self {
        match s {
            Scenario::Gather => EnvConfig::gather(),
            Scenario::Battle => EnvConfig::battle(),
        }
    }

    /// Total agents on the map.
    pub fn total_agents(&self) -> usize {
        match self.scenario {
            Scenario::Gather => self.num_agents,
            Scenario::Battle => 2 * self.num_agents,
        }
    }

    /// Agents controlled by the learner (the blue team).
    pub fn learners(&self) -> usize {
        self.num_agents
    }

    pub fn obs_dim(&self) -> usize {
        NUM_CHANNELS * self.view_size * self.view_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.view_size % 2 == 0 {
            return Err(Error::Validation(format!(
                "view size {} must be odd",
                self.view_size
            )));
        }
        if self.grid_size < self.view_size {
            return Err(Error::Validation(format!(
                "grid size {} smaller than view size {}",
                self.grid_size, self.view_size
            )));
        }
        if self.num_agents == 0 {
            return Err(Error::Validation("at least one agent required".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Validation("max steps must be positive".into()));
        }
        if !(self.max_hp > 0.0) || self.attack_damage < 0.0 || self.hp_regen < 0.0 {
            return Err(Error::Validation("hp parameters out of range".into()));
        }
        if !(1..=5).contains(&self.food_hits) {
            return Err(Error::Validation("food hits must be in 1..=5".into()));
        }
        let r = &self.rewards;
        if ![r.food_absorb, r.attack_hit, r.kill, r.step_cost, r.death]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Validation("reward values must be finite".into()));
        }
        let cells = self.grid_size * self.grid_size;
        match self.scenario {
            Scenario::Gather => {
                let needed = self.num_agents + self.num_food;
                if needed > cells {
                    return Err(Error::Capacity { needed, cells });
                }
            }
            Scenario::Battle => {
                let half = self.grid_size / 2 * self.grid_size;
                if self.num_agents > half {
                    return Err(Error::Capacity {
                        needed: 2 * self.num_agents,
                        cells: 2 * half,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    pub id: usize,
    pub team: Team,
    pub pos: Pos,
    pub hp: f64,
    pub alive: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoodCell {
    pub pos: Pos,
    pub attacks_remaining: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Cell {
    Empty,
    Agent(usize),
    Food(usize),
}

/// Full world state. Cheap to clone apart from the occupancy grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    config: Arc<EnvConfig>,
    agents: Vec<AgentState>,
    food: Vec<FoodCell>,
    step: usize,
    grid: Vec<Cell>,
    done: bool,
}

impl EnvState {
    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn food(&self) -> &[FoodCell] {
        &self.food
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn food_left(&self) -> usize {
        self.food.iter().filter(|f| f.attacks_remaining > 0).count()
    }

    pub fn alive_count(&self, team: Team) -> usize {
        self.agents
            .iter()
            .filter(|a| a.alive && a.team == team)
            .count()
    }

    /// Indices of the learner-controlled agents (blue team), in order.
    pub fn learner_ids(&self) -> std::ops::Range<usize> {
        0..self.config.num_agents
    }

    pub fn learner_positions(&self) -> Vec<Pos> {
        self.learner_ids().map(|i| self.agents[i].pos).collect()
    }

    pub fn learner_alive(&self) -> Vec<bool> {
        self.learner_ids().map(|i| self.agents[i].alive).collect()
    }

    pub(crate) fn cell(&self, p: Pos) -> Cell {
        self.grid[p.row * self.config.grid_size + p.col]
    }

    fn set_cell(&mut self, p: Pos, c: Cell) {
        let n = self.config.grid_size;
        self.grid[p.row * n + p.col] = c;
    }

    /// Moves agent `id` to `pos` without game rules. For building test
    /// scenarios.
    pub fn place_agent(&mut self, id: usize, pos: Pos) -> Result<()> {
        if self.cell(pos) != Cell::Empty {
            return Err(Error::Contract(format!("cell {pos:?} is occupied")));
        }
        let old = self.agents[id].pos;
        if self.agents[id].alive {
            self.set_cell(old, Cell::Empty);
            self.set_cell(pos, Cell::Agent(id));
        }
        self.agents[id].pos = pos;
        Ok(())
    }

    /// Removes agent `id` from play without game rules.
    pub fn kill_agent(&mut self, id: usize) {
        if self.agents[id].alive {
            let p = self.agents[id].pos;
            self.set_cell(p, Cell::Empty);
            self.agents[id].alive = false;
            self.agents[id].hp = 0.0;
        }
    }

    pub fn set_hp(&mut self, id: usize, hp: f64) {
        self.agents[id].hp = hp;
    }

    /// Removes every food cell without game rules.
    pub fn clear_food(&mut self) {
        for f in 0..self.food.len() {
            if self.food[f].attacks_remaining > 0 {
                let p = self.food[f].pos;
                self.set_cell(p, Cell::Empty);
                self.food[f].attacks_remaining = 0;
            }
        }
    }

    /// Adds a fresh food cell at `pos`.
    pub fn add_food(&mut self, pos: Pos) -> Result<()> {
        if self.cell(pos) != Cell::Empty {
            return Err(Error::Contract(format!("cell {pos:?} is occupied")));
        }
        self.food.push(FoodCell {
            pos,
            attacks_remaining: self.config.food_hits,
        });
        let idx = self.food.len() - 1;
        self.set_cell(pos, Cell::Food(idx));
        Ok(())
    }
}

/// Per-step event counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepEvents {
    pub food_eaten: u32,
    /// Enemies killed by blue / red agents.
    pub kills_blue: u32,
    pub kills_red: u32,
    pub deaths_blue: u32,
    pub deaths_red: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub rewards: Vec<f64>,
    pub done: bool,
    pub events: StepEvents,
}
