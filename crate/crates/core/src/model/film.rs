//! FiLM parameter generators.
//!
//! One 2-layer MLP per FiLM site maps the task embedding to that site's
//! per-channel scale and offset. The output layers start at zero weights with
//! a unit gamma bias, so an untrained generator produces identity modulation
//! (gamma = 1, beta = 0) for any embedding.

use alloc::format;
use alloc::vec::Vec;

use crate::error::Result;
use crate::params::{BoundParams, InitSpec, ParamStore};
use crate::real::Real;
use crate::rng::EngineRng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Per-site scale/offset vectors, shaped `[1, channels]`.
#[derive(Clone, Debug)]
pub struct FilmParams<R: Real> {
    pub gammas: Vec<Tensor<R>>,
    pub betas: Vec<Tensor<R>>,
}

impl<R: Real> FilmParams<R> {
    /// gamma = 1, beta = 0 at every site (detached).
    pub fn identity(sites: &[usize]) -> Self {
        FilmParams {
            gammas: sites.iter().map(|&c| Tensor::ones(alloc::vec![1, c])).collect(),
            betas: sites.iter().map(|&c| Tensor::zeros(alloc::vec![1, c])).collect(),
        }
    }

    pub fn arity(&self) -> usize {
        debug_assert_eq!(self.gammas.len(), self.betas.len());
        self.gammas.len()
    }
}

#[derive(Clone, Debug)]
pub struct FilmGeneratorSpec {
    /// Channel count per FiLM site.
    pub sites: Vec<usize>,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Zero output layers (identity modulation at step 0). Turned off for
    /// gradient-measurement fixtures, where zero output weights would kill
    /// the encoder's gradient path entirely.
    pub identity_init: bool,
}

impl FilmGeneratorSpec {
    pub fn register(&self, store: &mut ParamStore<impl Real>, prefix: &str, rng: &mut EngineRng) {
        let out_init = if self.identity_init {
            InitSpec::Zeros
        } else {
            InitSpec::HeNormal { fan_in: self.hidden }
        };
        for (i, &channels) in self.sites.iter().enumerate() {
            store.register(
                &format!("{prefix}.site{i}.w1"),
                &[self.embed_dim, self.hidden],
                InitSpec::HeNormal { fan_in: self.embed_dim },
                true,
                rng,
            );
            store.register(&format!("{prefix}.site{i}.b1"), &[self.hidden], InitSpec::Zeros, true, rng);
            store.register(
                &format!("{prefix}.site{i}.w_gamma"),
                &[self.hidden, channels],
                out_init,
                true,
                rng,
            );
            store.register(
                &format!("{prefix}.site{i}.b_gamma"),
                &[channels],
                InitSpec::Ones,
                true,
                rng,
            );
            store.register(
                &format!("{prefix}.site{i}.w_beta"),
                &[self.hidden, channels],
                out_init,
                true,
                rng,
            );
            store.register(
                &format!("{prefix}.site{i}.b_beta"),
                &[channels],
                InitSpec::Zeros,
                true,
                rng,
            );
        }
    }

    /// One (gamma, beta) pair per site from a `[1, embed_dim]` task embedding.
    pub fn generate<R: Real>(
        &self,
        tape: &mut Tape<R>,
        bound: &BoundParams<R>,
        prefix: &str,
        task_embedding: &Tensor<R>,
    ) -> Result<FilmParams<R>> {
        let mut gammas = Vec::with_capacity(self.sites.len());
        let mut betas = Vec::with_capacity(self.sites.len());
        for i in 0..self.sites.len() {
            let w1 = bound.get(&format!("{prefix}.site{i}.w1"))?;
            let b1 = bound.get(&format!("{prefix}.site{i}.b1"))?;
            let h = tape.matmul(task_embedding, w1)?;
            let h = tape.add(&h, b1)?;
            let h = tape.relu(&h)?;
            let wg = bound.get(&format!("{prefix}.site{i}.w_gamma"))?;
            let bg = bound.get(&format!("{prefix}.site{i}.b_gamma"))?;
            let g = tape.matmul(&h, wg)?;
            gammas.push(tape.add(&g, bg)?);
            let wb = bound.get(&format!("{prefix}.site{i}.w_beta"))?;
            let bb = bound.get(&format!("{prefix}.site{i}.b_beta"))?;
            let bt = tape.matmul(&h, wb)?;
            betas.push(tape.add(&bt, bb)?);
        }
        Ok(FilmParams { gammas, betas })
    }
}
