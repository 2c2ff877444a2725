use super::{Scenario, StepEvents};

/// A ratio whose zero denominator is reported as the numerator with a flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ratio {
    pub value: f64,
    pub infinite: bool,
}

impl Ratio {
    pub fn new(numerator: u32, denominator: u32) -> Self {
        if denominator == 0 {
            Ratio {
                value: numerator as f64,
                infinite: true,
            }
        } else {
            Ratio {
                value: numerator as f64 / denominator as f64,
                infinite: false,
            }
        }
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.infinite {
            write!(f, "inf")
        } else {
            write!(f, "{:.2}", self.value)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricsKind {
    /// live, death, live/death
    LiveDeath,
    /// kill, death, kill/death
    KillDeath,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeamMetrics {
    pub kind: MetricsKind,
    /// Survivors (Gather) or enemy deaths (Battle).
    pub primary: u32,
    pub death: u32,
    pub ratio: Ratio,
}

/// Episode summary for the learning team from its per-step events.
pub fn team_metrics(scenario: Scenario, num_agents: usize, events: &[StepEvents]) -> TeamMetrics {
    let deaths: u32 = events.iter().map(|e| e.deaths_blue).sum();
    match scenario {
        Scenario::Gather => {
            let live = (num_agents as u32).saturating_sub(deaths);
            TeamMetrics {
                kind: MetricsKind::LiveDeath,
                primary: live,
                death: deaths,
                ratio: Ratio::new(live, deaths),
            }
        }
        Scenario::Battle => {
            let kills: u32 = events.iter().map(|e| e.deaths_red).sum();
            TeamMetrics {
                kind: MetricsKind::KillDeath,
                primary: kills,
                death: deaths,
                ratio: Ratio::new(kills, deaths),
            }
        }
    }
}
