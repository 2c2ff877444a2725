use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::RngStream;

use super::{
    Action, AgentState, Cell, EnvConfig, EnvState, FoodCell, Pos, Scenario, StepEvents,
    StepResult, Team,
};

/// Fresh episode: agents and food placed from `config.seed`, everyone at
/// full HP.
pub fn reset(config: &EnvConfig) -> Result<EnvState> {
    config.validate()?;
    let n = config.grid_size;
    let mut rng = RngStream::new(config.seed);
    let mut state = EnvState {
        config: Arc::new(config.clone()),
        agents: Vec::with_capacity(config.total_agents()),
        food: Vec::with_capacity(config.num_food),
        step: 0,
        grid: vec![Cell::Empty; n * n],
        done: false,
    };
    let all_cells = |cols: std::ops::Range<usize>| -> Vec<Pos> {
        (0..n)
            .flat_map(|r| cols.clone().map(move |c| Pos::new(r, c)))
            .collect()
    };
    match config.scenario {
        Scenario::Gather => {
            let mut cells = all_cells(0..n);
            rng.shuffle(&mut cells);
            for (i, &p) in cells.iter().take(config.num_agents).enumerate() {
                state.spawn(i, Team::Blue, p);
            }
            for &p in cells.iter().skip(config.num_agents).take(config.num_food) {
                state.add_food(p)?;
            }
        }
        Scenario::Battle => {
            let mut left = all_cells(0..n / 2);
            let mut right = all_cells(n - n / 2..n);
            rng.shuffle(&mut left);
            rng.shuffle(&mut right);
            for (i, &p) in left.iter().take(config.num_agents).enumerate() {
                state.spawn(i, Team::Blue, p);
            }
            for (i, &p) in right.iter().take(config.num_agents).enumerate() {
                state.spawn(config.num_agents + i, Team::Red, p);
            }
        }
    }
    Ok(state)
}

impl EnvState {
    fn spawn(&mut self, id: usize, team: Team, pos: Pos) {
        debug_assert_eq!(self.agents.len(), id);
        self.agents.push(AgentState {
            id,
            team,
            pos,
            hp: self.config.max_hp,
            alive: true,
        });
        self.set_cell(pos, Cell::Agent(id));
    }

    fn hostile(&self, a: usize, b: usize) -> bool {
        if a == b {
            return false;
        }
        match self.config.scenario {
            Scenario::Gather => self.config.gather_friendly_fire,
            Scenario::Battle => self.agents[a].team != self.agents[b].team,
        }
    }
}

/// Advances one step. `actions` has one entry per agent on the map; entries
/// for dead agents are ignored.
pub fn step(state: &EnvState, actions: &[Action]) -> Result<(EnvState, StepResult)> {
    if actions.len() != state.agents.len() {
        return Err(Error::Contract(format!(
            "{} actions for {} agents",
            actions.len(),
            state.agents.len()
        )));
    }
    if state.done {
        return Err(Error::Contract("step called on a finished episode".into()));
    }
    let cfg = Arc::clone(&state.config);
    let size = cfg.grid_size;
    let mut next = state.clone();
    let mut rewards = vec![0.0; next.agents.len()];
    let mut events = StepEvents::default();
    let alive_at_start: Vec<bool> = next.agents.iter().map(|a| a.alive).collect();

    // attacks, against start-of-step positions
    let mut last_attacker: Vec<Option<usize>> = vec![None; next.agents.len()];
    for (i, action) in actions.iter().enumerate() {
        let Action::Attack(dir) = *action else {
            continue;
        };
        if !alive_at_start[i] {
            continue;
        }
        let Some(target) = next.agents[i].pos.step(dir, size) else {
            continue;
        };
        match next.cell(target) {
            Cell::Agent(j) => {
                if next.hostile(i, j) {
                    next.agents[j].hp -= cfg.attack_damage;
                    rewards[i] += cfg.rewards.attack_hit;
                    last_attacker[j] = Some(i);
                }
            }
            Cell::Food(f) => {
                let food: &mut FoodCell = &mut next.food[f];
                food.attacks_remaining -= 1;
                if food.attacks_remaining == 0 {
                    let p = food.pos;
                    next.set_cell(p, Cell::Empty);
                    rewards[i] += cfg.rewards.food_absorb;
                    events.food_eaten += 1;
                }
            }
            Cell::Empty => {}
        }
    }

    // deaths
    for j in 0..next.agents.len() {
        if !next.agents[j].alive || next.agents[j].hp > 0.0 {
            continue;
        }
        let p = next.agents[j].pos;
        next.set_cell(p, Cell::Empty);
        next.agents[j].alive = false;
        next.agents[j].hp = 0.0;
        rewards[j] += cfg.rewards.death;
        match next.agents[j].team {
            Team::Blue => events.deaths_blue += 1,
            Team::Red => events.deaths_red += 1,
        }
        if let Some(k) = last_attacker[j] {
            rewards[k] += cfg.rewards.kill;
            match next.agents[k].team {
                Team::Blue => events.kills_blue += 1,
                Team::Red => events.kills_red += 1,
            }
        }
    }

    for (r, &was_alive) in rewards.iter_mut().zip(&alive_at_start) {
        if was_alive {
            *r += cfg.rewards.step_cost;
        }
    }

    // moves: a target must be empty now; earlier agents win contested cells
    let mut claimed = std::collections::HashSet::new();
    let mut moves = Vec::new();
    for (i, action) in actions.iter().enumerate() {
        let Action::Move(dir) = *action else {
            continue;
        };
        if !next.agents[i].alive {
            continue;
        }
        let Some(target) = next.agents[i].pos.step(dir, size) else {
            continue;
        };
        if next.cell(target) == Cell::Empty && claimed.insert(target) {
            moves.push((i, target));
        }
    }
    for &(i, _) in &moves {
        let p = next.agents[i].pos;
        next.set_cell(p, Cell::Empty);
    }
    for &(i, target) in &moves {
        next.agents[i].pos = target;
        next.set_cell(target, Cell::Agent(i));
    }

    for a in next.agents.iter_mut().filter(|a| a.alive) {
        a.hp = (a.hp + cfg.hp_regen).min(cfg.max_hp);
    }

    next.step += 1;
    let done = next.step >= cfg.max_steps
        || match cfg.scenario {
            Scenario::Gather => next.food_left() == 0 || next.alive_count(Team::Blue) == 0,
            Scenario::Battle => {
                next.alive_count(Team::Blue) == 0 || next.alive_count(Team::Red) == 0
            }
        };
    next.done = done;
    Ok((
        next,
        StepResult {
            rewards,
            done,
            events,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Direction;

    fn small_gather() -> EnvConfig {
        EnvConfig {
            grid_size: 8,
            num_agents: 3,
            num_food: 2,
            view_size: 5,
            max_steps: 50,
            ..EnvConfig::gather()
        }
    }

    fn small_battle() -> EnvConfig {
        EnvConfig {
            grid_size: 8,
            num_agents: 2,
            view_size: 5,
            max_steps: 50,
            ..EnvConfig::battle()
        }
    }

    fn noop(n: usize) -> Vec<Action> {
        vec![Action::NoOp; n]
    }

    #[test]
    fn full_scale_resets() {
        let s = reset(&EnvConfig::gather()).unwrap();
        assert_eq!(s.alive_count(Team::Blue), 74);
        assert_eq!(s.food_left(), 157);
        let s = reset(&EnvConfig::battle()).unwrap();
        assert_eq!(s.alive_count(Team::Blue) + s.alive_count(Team::Red), 60);
        assert!(s.agents().iter().all(|a| a.hp == 10.0));
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn reset_is_deterministic() {
        let cfg = EnvConfig {
            seed: 42,
            ..EnvConfig::gather()
        };
        assert_eq!(reset(&cfg).unwrap(), reset(&cfg).unwrap());
    }

    #[test]
    fn capacity_error() {
        let cfg = EnvConfig {
            grid_size: 5,
            view_size: 5,
            num_agents: 20,
            num_food: 10,
            ..EnvConfig::gather()
        };
        assert!(matches!(reset(&cfg), Err(Error::Capacity { .. })));
    }

    #[test]
    fn battle_damage_then_regen() {
        let mut s = reset(&small_battle()).unwrap();
        s.place_agent(0, Pos::new(3, 3)).unwrap();
        s.place_agent(2, Pos::new(3, 4)).unwrap();
        let mut actions = noop(4);
        actions[0] = Action::Attack(Direction::East);
        let (s2, r) = step(&s, &actions).unwrap();
        assert!((s2.agents()[2].hp - 8.1).abs() < 1e-12);
        assert!((r.rewards[0] - (0.2 - 0.005)).abs() < 1e-12);
        assert_eq!(s2.agents()[0].hp, 10.0);
    }

    #[test]
    fn teammate_attack_is_not_registered() {
        let mut s = reset(&small_battle()).unwrap();
        s.place_agent(0, Pos::new(3, 3)).unwrap();
        s.place_agent(1, Pos::new(2, 3)).unwrap();
        let mut actions = noop(4);
        actions[0] = Action::Attack(Direction::North);
        let (s2, r) = step(&s, &actions).unwrap();
        assert_eq!(s2.agents()[1].hp, 10.0);
        assert_eq!(r.rewards[0], r.rewards[3]);
        assert_eq!(r.events, StepEvents::default());
    }

    #[test]
    fn food_absorbed_on_fifth_hit() {
        let mut s = reset(&small_gather()).unwrap();
        s.clear_food();
        s.place_agent(0, Pos::new(4, 4)).unwrap();
        s.add_food(Pos::new(4, 5)).unwrap();
        let mut actions = noop(3);
        actions[0] = Action::Attack(Direction::East);
        for hit in 1..=5 {
            let (next, r) = step(&s, &actions).unwrap();
            if hit < 5 {
                assert_eq!(next.food_left(), 1);
                assert_eq!(r.events.food_eaten, 0);
                assert!((r.rewards[0] + 0.01).abs() < 1e-12);
            } else {
                assert_eq!(next.food_left(), 0);
                assert_eq!(r.events.food_eaten, 1);
                assert!((r.rewards[0] - 4.99).abs() < 1e-12);
                assert!(r.done);
            }
            s = next;
        }
    }

    #[test]
    fn gather_attack_kills_in_one_hit() {
        let mut s = reset(&small_gather()).unwrap();
        s.place_agent(0, Pos::new(0, 0)).unwrap_or(());
        let p0 = s.agents()[0].pos;
        let target = Direction::ALL
            .iter()
            .find_map(|&d| p0.step(d, 8).filter(|&p| s.cell(p) == Cell::Empty).map(|p| (d, p)))
            .unwrap();
        s.place_agent(1, target.1).unwrap();
        let mut actions = noop(3);
        actions[0] = Action::Attack(target.0);
        let (s2, r) = step(&s, &actions).unwrap();
        assert!(!s2.agents()[1].alive);
        assert_eq!(r.events.deaths_blue, 1);
        assert!((r.rewards[1] - (-1.0 - 0.01)).abs() < 1e-12);
    }

    #[test]
    fn contested_move_goes_to_lower_index() {
        let mut s = reset(&small_battle()).unwrap();
        s.place_agent(0, Pos::new(3, 2)).unwrap();
        s.place_agent(1, Pos::new(3, 4)).unwrap();
        let mut actions = noop(4);
        actions[0] = Action::Move(Direction::East);
        actions[1] = Action::Move(Direction::West);
        let (s2, _) = step(&s, &actions).unwrap();
        assert_eq!(s2.agents()[0].pos, Pos::new(3, 3));
        assert_eq!(s2.agents()[1].pos, Pos::new(3, 4));
    }

    #[test]
    fn blocked_by_edge_and_occupant() {
        let mut s = reset(&small_battle()).unwrap();
        s.place_agent(0, Pos::new(0, 0)).unwrap();
        s.place_agent(1, Pos::new(1, 0)).unwrap();
        let mut actions = noop(4);
        actions[0] = Action::Move(Direction::North);
        let (s2, _) = step(&s, &actions).unwrap();
        assert_eq!(s2.agents()[0].pos, Pos::new(0, 0));
        actions[0] = Action::Move(Direction::South);
        let (s3, _) = step(&s2, &actions).unwrap();
        assert_eq!(s3.agents()[0].pos, Pos::new(0, 0));
    }

    #[test]
    fn wrong_action_count() {
        let s = reset(&small_battle()).unwrap();
        assert!(matches!(step(&s, &noop(3)), Err(Error::Contract(_))));
    }

    #[test]
    fn episode_ends_at_max_steps() {
        let cfg = EnvConfig {
            max_steps: 3,
            ..small_battle()
        };
        let mut s = reset(&cfg).unwrap();
        for t in 1..=3 {
            let (next, r) = step(&s, &noop(4)).unwrap();
            assert_eq!(r.done, t == 3);
            s = next;
        }
        assert!(step(&s, &noop(4)).is_err());
    }
}
