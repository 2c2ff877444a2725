use crate::error::{Error, Result};
use crate::numeric::{argmax, sample_gumbel, Matrix, RngStream, Tape, Var};

/// Output of the Sinkhorn operator. `residual` is recomputed from the
/// stored values: the largest deviation of any row or column sum from one.
#[derive(Clone, Debug, PartialEq)]
pub struct DoublyStochasticMatrix {
    values: Matrix,
    iterations: usize,
    residual: f64,
}

impl DoublyStochasticMatrix {
    pub fn new(values: Matrix, iterations: usize) -> Self {
        let residual = row_col_residual(&values);
        DoublyStochasticMatrix {
            values,
            iterations,
            residual,
        }
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// Per-row argmax (lowest column on ties).
    pub fn round_rows(&self) -> Vec<usize> {
        (0..self.values.rows())
            .map(|i| argmax(self.values.row(i)).0)
            .collect()
    }
}

pub fn row_col_residual(m: &Matrix) -> f64 {
    m.row_sums()
        .into_iter()
        .chain(m.col_sums())
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max)
}

/// `iters` rounds of row then column normalization of `exp(x)`, carried
/// out in log space. Returns the exponentiated result.
pub fn sinkhorn_on_tape(tape: &mut Tape, x: Var, iters: usize) -> Result<Var> {
    let (r, c) = tape.shape(x);
    if r != c {
        return Err(Error::dim("sinkhorn", format!("{r}x{c} is not square")));
    }
    if iters == 0 {
        return Err(Error::Contract("sinkhorn needs at least one iteration".into()));
    }
    let mut log_alpha = x;
    for _ in 0..iters {
        log_alpha = tape.log_normalize_rows(log_alpha)?;
        log_alpha = tape.log_normalize_cols(log_alpha)?;
    }
    tape.exp(log_alpha)
}

pub fn sinkhorn(x: &Matrix, iters: usize) -> Result<DoublyStochasticMatrix> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let out = sinkhorn_on_tape(&mut tape, xv, iters)?;
    Ok(DoublyStochasticMatrix::new(tape.value(out).clone(), iters))
}

/// Temperature, iteration count and noise scale of the Gumbel-Sinkhorn
/// relaxation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GumbelSinkhorn {
    pub temperature: f64,
    pub iterations: usize,
    pub noise_scale: f64,
}

impl Default for GumbelSinkhorn {
    fn default() -> Self {
        GumbelSinkhorn {
            temperature: 0.5,
            iterations: 20,
            noise_scale: 1.0,
        }
    }
}

impl GumbelSinkhorn {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Validation(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Validation("sinkhorn iterations must be >= 1".into()));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Validation("noise scale must be >= 0".into()));
        }
        Ok(())
    }

    /// `sinkhorn((x + noise * G) / tau)` on the tape. No noise is drawn when
    /// the scale is zero.
    pub fn relax(&self, tape: &mut Tape, x: Var, rng: &mut RngStream) -> Result<Var> {
        let (r, c) = tape.shape(x);
        let noisy = if self.noise_scale > 0.0 {
            let g = sample_gumbel(r, c, rng).scale(self.noise_scale);
            let g = tape.constant(g)?;
            tape.add(x, g)?
        } else {
            x
        };
        let scaled = tape.scale(noisy, 1.0 / self.temperature)?;
        sinkhorn_on_tape(tape, scaled, self.iterations)
    }
}

pub fn gumbel_sinkhorn_sample(
    x: &Matrix,
    params: &GumbelSinkhorn,
    rng: &mut RngStream,
) -> Result<DoublyStochasticMatrix> {
    params.validate()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let out = params.relax(&mut tape, xv, rng)?;
    Ok(DoublyStochasticMatrix::new(
        tape.value(out).clone(),
        params.iterations,
    ))
}
