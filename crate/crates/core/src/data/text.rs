use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{bail, Result};
use crate::numerics::{Matrix, Tape, Var};

/// Frozen stand-in for a pretrained text encoder.
///
/// Mean-pools the token vectors, applies a fixed seeded linear map and
/// L2-normalizes the result. Pooling makes it blind to token order.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderStub {
    /// `D x D`, applied as `W · t`.
    pub projection: Matrix,
}

impl TextEncoderStub {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let data = (0..dim * dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            projection: Matrix::from_vec(dim, dim, data).expect("square buffer"),
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.rows()
    }

    /// Encodes one prompt given as a `tokens x D` matrix.
    pub fn encode(&self, tokens: &Matrix) -> Result<Vec<f64>> {
        if tokens.rows() == 0 {
            bail!(Contract, "text encoder needs at least one token");
        }
        let mut tape = Tape::new();
        let t = tape.constant(tokens.clone());
        let w = tape.constant(self.projection.clone());
        let out = encode_on_tape(&mut tape, t, w)?;
        Ok(tape.value(out).as_slice().to_vec())
    }
}

/// Tape form of [`TextEncoderStub::encode`] for a single prompt.
pub fn encode_on_tape(tape: &mut Tape, tokens: Var, projection: Var) -> Result<Var> {
    let n = tape.value(tokens).rows();
    if n == 0 {
        bail!(Contract, "text encoder needs at least one token");
    }
    let pool = tape.constant(Matrix::filled(1, n, 1.0 / n as f64));
    let pooled = tape.matmul(pool, tokens)?;
    project_pooled(tape, pooled, projection)
}

/// Applies the frozen map and normalization to already pooled rows.
pub fn project_pooled(tape: &mut Tape, pooled: Var, projection: Var) -> Result<Var> {
    let mapped = tape.matmul_nt(pooled, projection)?;
    Ok(tape.l2_normalize_rows(mapped))
}
