use super::{Cell, EnvState};

/// Wall/out-of-bounds, own team, enemy, food, food HP fraction, own HP.
pub const NUM_CHANNELS: usize = 6;

const WALL: usize = 0;
const TEAM: usize = 1;
const ENEMY: usize = 2;
const FOOD: usize = 3;
const FOOD_HP: usize = 4;
const OWN_HP: usize = 5;

/// Agent-centered channel stack, laid out channel-major:
/// `data[(c * view + r) * view + col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    view: usize,
    data: Vec<f64>,
}

impl Observation {
    pub fn view_size(&self) -> usize {
        self.view
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[(channel * self.view + row) * self.view + col]
    }

    fn set(&mut self, channel: usize, row: usize, col: usize, v: f64) {
        self.data[(channel * self.view + row) * self.view + col] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Observation of agent `id`; all zeros when the agent is dead.
pub fn observe(state: &EnvState, id: usize) -> Observation {
    let cfg = state.config();
    let view = cfg.view_size;
    let mut obs = Observation {
        view,
        data: vec![0.0; NUM_CHANNELS * view * view],
    };
    let me = &state.agents()[id];
    if !me.alive {
        return obs;
    }
    let half = (view / 2) as i64;
    for vr in 0..view {
        for vc in 0..view {
            let dr = vr as i64 - half;
            let dc = vc as i64 - half;
            let Some(p) = me.pos.offset(dr, dc, cfg.grid_size) else {
                obs.set(WALL, vr, vc, 1.0);
                continue;
            };
            match state.cell(p) {
                Cell::Empty => {}
                Cell::Agent(j) if j == id => {}
                Cell::Agent(j) => {
                    let ch = if state.agents()[j].team == me.team {
                        TEAM
                    } else {
                        ENEMY
                    };
                    obs.set(ch, vr, vc, 1.0);
                }
                Cell::Food(f) => {
                    obs.set(FOOD, vr, vc, 1.0);
                    let frac = state.food()[f].attacks_remaining as f64 / cfg.food_hits as f64;
                    obs.set(FOOD_HP, vr, vc, frac);
                }
            }
        }
    }
    obs.set(OWN_HP, view / 2, view / 2, (me.hp / cfg.max_hp).clamp(0.0, 1.0));
    obs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{reset, step, Action, EnvConfig, Pos};

    fn lone_agent() -> EnvState {
        let cfg = EnvConfig {
            grid_size: 11,
            num_agents: 1,
            num_food: 0,
            view_size: 5,
            ..EnvConfig::gather()
        };
        let mut s = reset(&cfg).unwrap();
        s.place_agent(0, Pos::new(5, 5)).unwrap();
        s
    }

    #[test]
    fn lone_agent_sees_only_its_hp() {
        let s = lone_agent();
        let o = observe(&s, 0);
        for c in 0..NUM_CHANNELS {
            for r in 0..5 {
                for k in 0..5 {
                    let expected = if c == OWN_HP && r == 2 && k == 2 { 1.0 } else { 0.0 };
                    assert_eq!(o.get(c, r, k), expected);
                }
            }
        }
    }

    #[test]
    fn food_offset_maps_to_view_cell() {
        let mut s = lone_agent();
        s.add_food(Pos::new(6, 5)).unwrap();
        let o = observe(&s, 0);
        assert_eq!(o.get(FOOD, 3, 2), 1.0);
        assert_eq!(o.get(FOOD_HP, 3, 2), 1.0);
        let total: f64 = (0..5).flat_map(|r| (0..5).map(move |k| (r, k))).map(|(r, k)| o.get(FOOD, r, k)).sum();
        assert_eq!(total, 1.0);
    }

    #[test]
    fn edge_cells_are_walls() {
        let mut s = lone_agent();
        s.place_agent(0, Pos::new(0, 0)).unwrap();
        let o = observe(&s, 0);
        assert_eq!(o.get(WALL, 0, 0), 1.0);
        assert_eq!(o.get(WALL, 1, 4), 1.0);
        assert_eq!(o.get(WALL, 2, 2), 0.0);
        assert_eq!(o.get(WALL, 4, 1), 1.0);
        assert_eq!(o.get(WALL, 3, 3), 0.0);
    }

    #[test]
    fn dead_agents_vanish() {
        let cfg = EnvConfig {
            grid_size: 11,
            num_agents: 2,
            num_food: 0,
            view_size: 5,
            ..EnvConfig::gather()
        };
        let mut s = reset(&cfg).unwrap();
        s.place_agent(0, Pos::new(5, 5)).unwrap();
        s.place_agent(1, Pos::new(5, 6)).unwrap();
        assert_eq!(observe(&s, 0).get(TEAM, 2, 3), 1.0);
        let (s2, _) = step(&s, &[Action::Attack(crate::env::Direction::East), Action::NoOp]).unwrap();
        assert!(observe(&s2, 1).is_zero());
        assert_eq!(observe(&s2, 0).get(TEAM, 2, 3), 0.0);
    }
}
