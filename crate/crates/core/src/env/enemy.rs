use super::{Action, Direction, EnvState, Scenario, Team};

/// Rule-based red team: hit an adjacent blue agent (lowest index first),
/// otherwise step toward the nearest blue agent, trying N, E, S, W in
/// order. Returns one action per red agent, in red index order.
pub fn scripted_enemy_policy(state: &EnvState) -> Vec<Action> {
    let cfg = state.config();
    if cfg.scenario != Scenario::Battle {
        return Vec::new();
    }
    let agents = state.agents();
    let blues: Vec<_> = agents
        .iter()
        .filter(|a| a.alive && a.team == Team::Blue)
        .collect();
    agents
        .iter()
        .filter(|a| a.team == Team::Red)
        .map(|red| {
            if !red.alive || blues.is_empty() {
                return Action::NoOp;
            }
            for b in &blues {
                if let Some(d) = Direction::ALL
                    .into_iter()
                    .find(|&d| red.pos.step(d, cfg.grid_size) == Some(b.pos))
                {
                    return Action::Attack(d);
                }
            }
            // min_by_key keeps the first (lowest index) among equals
            let target = blues
                .iter()
                .min_by_key(|b| red.pos.manhattan(b.pos))
                .expect("non-empty");
            let dist = red.pos.manhattan(target.pos);
            Direction::ALL
                .into_iter()
                .find(|&d| {
                    red.pos
                        .step(d, cfg.grid_size)
                        .is_some_and(|p| p.manhattan(target.pos) < dist)
                })
                .map_or(Action::NoOp, Action::Move)
        })
        .collect()
}
