use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::Binding;
use crate::numeric::{Matrix, ParamStore, RngStream, Tape, Var};

use super::config::{LossMode, TrainConfig};
use super::network::{QNetwork, StepInput};
use super::replay::Transition;

/// A batch with its observations and graphs rebuilt.
pub struct PreparedBatch {
    pub inputs: Vec<StepInput>,
    pub next_inputs: Vec<StepInput>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terminal: Vec<bool>,
}

impl PreparedBatch {
    pub fn new(batch: &[&Transition], neighbors: usize) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Contract("loss needs a non-empty batch".into()));
        }
        let mut p = PreparedBatch {
            inputs: Vec::with_capacity(batch.len()),
            next_inputs: Vec::with_capacity(batch.len()),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminal: Vec::with_capacity(batch.len()),
        };
        for t in batch {
            p.inputs.push(StepInput::from_state(&t.state, neighbors)?);
            p.next_inputs.push(StepInput::from_state(&t.next_state, neighbors)?);
            p.actions.extend_from_slice(&t.actions);
            p.rewards.extend_from_slice(&t.rewards);
            p.terminal.push(t.terminal);
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    /// Mean squared TD residual over agents alive at `t`.
    pub td: f64,
    /// Mean squared prediction residual over the same agents.
    pub gs: f64,
    pub agents: usize,
}

/// The loss node on its tape.
pub struct LossGraph {
    pub tape: Tape,
    pub loss: Var,
    pub stats: LossStats,
}

/// Blend weights and the GS loss weight in effect for one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

/// TD loss plus, for GS learners, the next-step prediction loss. Local
/// parameters are trainable; target parameters enter as constants.
pub fn compute_losses(
    net: &QNetwork,
    local: &ParamStore,
    target: &ParamStore,
    batch: &PreparedBatch,
    config: &TrainConfig,
    weights: LossWeights,
    rng: &mut RngStream,
) -> Result<LossGraph> {
    if batch.is_empty() {
        return Err(Error::Contract("loss needs a non-empty batch".into()));
    }
    let cur: Vec<&StepInput> = batch.inputs.iter().collect();
    let next: Vec<&StepInput> = batch.next_inputs.iter().collect();
    let gb = net.batch(&cur)?;
    let gb1 = net.batch(&next)?;
    let (rows, n) = (gb.rows(), gb.nodes);
    if batch.actions.len() != rows || batch.rewards.len() != rows {
        return Err(Error::dim("compute_losses", "actions or rewards per agent"));
    }

    let mut tape = Tape::new();
    let train = Binding::Train(local);
    let frozen = Binding::Frozen(target);
    let (_, gat_t) = net.features(&mut tape, train, &gb)?;
    let q_t = net.q(&mut tape, train, gat_t, &gb)?;
    let (_, gat_t1) = net.features(&mut tape, frozen, &gb1)?;
    let q_t1 = net.q(&mut tape, frozen, gat_t1, &gb1)?;

    let mut gs_sq = None;
    let next_q = match &net.gs {
        Some(gs) => {
            let mut pred = None;
            for b in 0..gb.blocks {
                let active: Rc<[usize]> = (b * n..(b + 1) * n).filter(|&i| gb1.alive[i]).collect();
                let p = gs.predict_on_tape(&mut tape, train, gat_t, gat_t1, active, config.gs_mode, rng)?;
                pred = Some(match pred {
                    None => p.prediction,
                    Some(acc) => tape.add(acc, p.prediction)?,
                });
            }
            let pred = pred.expect("at least one block");
            let diff = tape.sub(pred, gat_t1)?;
            let sq = tape.mul(diff, diff)?;
            gs_sq = Some(tape.row_sum(sq)?);
            let q_hat = net.q(&mut tape, frozen, pred, &gb1)?;
            let a = tape.scale(q_t1, weights.alpha)?;
            let b = tape.scale(q_hat, weights.beta)?;
            tape.add(a, b)?
        }
        None => q_t1,
    };

    // per-agent bootstrap: off when the episode ended or the agent died
    let bootstrap: Rc<[f64]> = (0..rows)
        .map(|i| {
            if batch.terminal[i / n] || !gb1.alive[i] {
                0.0
            } else {
                config.gamma
            }
        })
        .collect();
    let best = tape.row_max(next_q)?;
    let discounted = tape.scale_rows(best, bootstrap)?;
    let r = tape.constant(Matrix::from_vec(rows, 1, batch.rewards.clone())?)?;
    let td_target = tape.add(r, discounted)?;
    let picks: Rc<[(usize, usize)]> = batch.actions.iter().enumerate().map(|(i, &a)| (i, a)).collect();
    let chosen = tape.pick(q_t, picks)?;
    let td = tape.sub(td_target, chosen)?;

    let alive: Rc<[usize]> = (0..rows).filter(|&i| gb.alive[i]).collect();
    let count = alive.len();
    if count == 0 {
        let loss = tape.constant(Matrix::zeros(1, 1))?;
        return Ok(LossGraph {
            tape,
            loss,
            stats: LossStats::default(),
        });
    }
    let td = tape.gather_rows(td, alive.clone())?;
    let td_sq = tape.mul(td, td)?;
    let gs_sq = gs_sq.map(|g| tape.gather_rows(g, alive.clone())).transpose()?;
    let per_agent = match (gs_sq, config.loss_mode) {
        (None, _) => td_sq,
        (Some(g), LossMode::Decomposed) => {
            let g = tape.scale(g, weights.lambda)?;
            tape.add(td_sq, g)?
        }
        (Some(g), LossMode::PaperLiteral) => {
            let norm = tape.sqrt(g)?;
            let norm = tape.scale(norm, weights.lambda)?;
            let s = tape.add(td, norm)?;
            tape.mul(s, s)?
        }
    };
    let loss = tape.mean(per_agent)?;
    let stats = LossStats {
        loss: tape.scalar(loss)?,
        td: tape.value(td_sq).sum() / count as f64,
        gs: gs_sq.map_or(0.0, |g| tape.value(g).sum() / count as f64),
        agents: count,
    };
    Ok(LossGraph { tape, loss, stats })
}
