//! Adaptive random-walk Metropolis-within-Gibbs over the model's parameter
//! blocks.
//!
//! Each chain sweeps the blocks in layout order. Scalar blocks target an
//! acceptance rate of 0.44 and vector blocks 0.23, with Robbins-Monro scale
//! adaptation active only during the adaptation window (after which proposal
//! scales are frozen, keeping the chain Markovian). Positive parameters are
//! proposed on the log scale and correlations on the inverse-tanh scale, with
//! the corresponding Jacobian corrections in the acceptance ratio, so no kept
//! draw can leave the parameter support.
//!
//! Chains are independent: chain `c` draws from a dedicated ChaCha stream
//! derived from `(seed, c)`, so results are bit-identical no matter how many
//! worker threads execute them.

use crate::error::{Error, Result};
use crate::data::Dataset;
use crate::model::{InitStrategy, Model, ModelSpec, ParameterState, ProposalStyle, Support};
use crate::stats::{self, SummaryStats};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

const MAX_INIT_ATTEMPTS: usize = 1000;
const TARGET_ACCEPT_SCALAR: f64 = 0.44;
const TARGET_ACCEPT_VECTOR: f64 = 0.23;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub chains: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub adapt_window: usize,
    pub init: InitStrategy,
}

impl SamplerConfig {
    /// Config with thinning of 1 and adaptation across the whole burn-in.
    pub fn new(chains: usize, iterations: usize, burn_in: usize, seed: u64) -> Self {
        SamplerConfig {
            chains,
            iterations,
            burn_in,
            thin: 1,
            seed,
            adapt_window: burn_in,
            init: InitStrategy::JitteredZero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Config("need at least one chain".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn_in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        let kept_span = self.iterations - self.burn_in;
        if self.thin == 0 || self.thin > kept_span {
            return Err(Error::Config(format!(
                "thin ({}) must lie in 1..={kept_span}",
                self.thin
            )));
        }
        if !kept_span.is_multiple_of(self.thin) {
            return Err(Error::Config(format!(
                "iterations - burn_in ({kept_span}) must be divisible by thin ({})",
                self.thin
            )));
        }
        if self.adapt_window > self.burn_in {
            return Err(Error::Config(format!(
                "adapt_window ({}) must not exceed burn_in ({})",
                self.adapt_window, self.burn_in
            )));
        }
        Ok(())
    }

    pub fn kept_per_chain(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

/// Per-block acceptance rates, one entry per chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockAcceptance {
    pub block: String,
    pub rates: Vec<f64>,
}

/// Kept posterior draws for all chains, in parameter-name order.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    names: Vec<String>,
    n_chains: usize,
    kept: usize,
    /// Row-major [chain][kept-iteration][parameter].
    values: Vec<f64>,
    pub acceptance: Vec<BlockAcceptance>,
    pub config: SamplerConfig,
    /// Proposal scales per chain/block at the end of the adaptation window
    /// and at the end of the run; equal by construction (adaptation freeze).
    pub scales_adapt_end: Vec<Vec<f64>>,
    pub scales_final: Vec<Vec<f64>>,
}

impl PosteriorDraws {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_chains(&self) -> usize {
        self.n_chains
    }

    pub fn kept_per_chain(&self) -> usize {
        self.kept
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn value(&self, chain: usize, iter: usize, param: usize) -> f64 {
        self.values[(chain * self.kept + iter) * self.names.len() + param]
    }

    /// One parameter's series within one chain.
    pub fn series(&self, chain: usize, param: usize) -> Vec<f64> {
        (0..self.kept).map(|it| self.value(chain, it, param)).collect()
    }

    /// One parameter's draws pooled over chains (chain-major order).
    pub fn pooled(&self, param: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.kept * self.n_chains);
        for chain in 0..self.n_chains {
            for it in 0..self.kept {
                out.push(self.value(chain, it, param));
            }
        }
        out
    }

    /// Long-format CSV: `chain,iteration,parameter,value` with the original
    /// iteration number (after burn-in/thinning). Parameter names containing
    /// commas (vector entries like `beta[3,1]`) are quoted; values round-trip
    /// exactly.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["chain", "iteration", "parameter", "value"]).map_err(csv_err)?;
        for chain in 0..self.n_chains {
            for it in 0..self.kept {
                let iteration = self.config.burn_in + it * self.config.thin;
                for (pidx, name) in self.names.iter().enumerate() {
                    wtr.write_record([
                        (chain + 1).to_string(),
                        iteration.to_string(),
                        name.clone(),
                        self.value(chain, it, pidx).to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads draws written by [`PosteriorDraws::write_csv`] (or any file in
    /// the same long format). Config fields other than chain/draw counts are
    /// not recoverable from the CSV and are zeroed.
    pub fn read_csv<R: Read>(reader: R) -> Result<PosteriorDraws> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        {
            let headers = rdr.headers().map_err(csv_err)?;
            let got: Vec<&str> = headers.iter().collect();
            if got != ["chain", "iteration", "parameter", "value"] {
                return Err(Error::Parse {
                    line: 1,
                    msg: "expected header chain,iteration,parameter,value".into(),
                });
            }
        }
        let mut names: Vec<String> = Vec::new();
        // (chain, iteration) -> values aligned with names
        let mut chains: Vec<u64> = Vec::new();
        let mut rows: Vec<(u64, u64, usize, f64)> = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(csv_err)?;
            let line = record.position().map_or(0, |p| p.line());
            let err = |msg: String| Error::Parse { line, msg };
            if record.len() != 4 {
                return Err(err(format!("expected 4 fields, got {}", record.len())));
            }
            let chain: u64 = record[0].parse().map_err(|_| err("bad chain".into()))?;
            let iteration: u64 = record[1].parse().map_err(|_| err("bad iteration".into()))?;
            let name = &record[2];
            let value: f64 = record[3].parse().map_err(|_| err("bad value".into()))?;
            let pidx = match names.iter().position(|n| n == name) {
                Some(i) => i,
                None => {
                    names.push(name.to_string());
                    names.len() - 1
                }
            };
            if !chains.contains(&chain) {
                chains.push(chain);
            }
            rows.push((chain, iteration, pidx, value));
        }
        if rows.is_empty() {
            return Err(Error::Parse {
                line: 1,
                msg: "draws file has no rows".into(),
            });
        }
        chains.sort_unstable();
        let n_params = names.len();
        let mut per_chain_iters: Vec<Vec<u64>> = vec![Vec::new(); chains.len()];
        for &(c, it, _, _) in &rows {
            let ci = chains.iter().position(|&x| x == c).unwrap();
            if per_chain_iters[ci].last() != Some(&it) && !per_chain_iters[ci].contains(&it) {
                per_chain_iters[ci].push(it);
            }
        }
        for iters in per_chain_iters.iter_mut() {
            iters.sort_unstable();
        }
        let kept = per_chain_iters[0].len();
        if per_chain_iters.iter().any(|v| v.len() != kept) {
            return Err(Error::Parse {
                line: 0,
                msg: "chains have unequal numbers of kept iterations".into(),
            });
        }
        let mut values = vec![f64::NAN; chains.len() * kept * n_params];
        for (c, it, pidx, value) in rows {
            let ci = chains.iter().position(|&x| x == c).unwrap();
            let ii = per_chain_iters[ci].binary_search(&it).unwrap();
            values[(ci * kept + ii) * n_params + pidx] = value;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Parse {
                line: 0,
                msg: "draws file is ragged: some (chain, iteration, parameter) cells missing".into(),
            });
        }
        Ok(PosteriorDraws {
            names,
            n_chains: chains.len(),
            kept,
            values,
            acceptance: Vec::new(),
            config: SamplerConfig {
                chains: chains.len(),
                iterations: kept,
                burn_in: 0,
                thin: 1,
                seed: 0,
                adapt_window: 0,
                init: InitStrategy::JitteredZero,
            },
            scales_adapt_end: Vec::new(),
            scales_final: Vec::new(),
        })
    }

    /// Pooled posterior summaries (mean, sd, 2.5/50/97.5% quantiles) per
    /// parameter. Needs at least 2 kept draws.
    pub fn summarize(&self) -> Result<Vec<ParamSummary>> {
        if self.kept * self.n_chains < 2 {
            return Err(Error::Config("summaries need at least 2 kept draws".into()));
        }
        Ok(self
            .names
            .iter()
            .enumerate()
            .map(|(pidx, name)| ParamSummary {
                name: name.clone(),
                stats: stats::summary_stats(&self.pooled(pidx)),
            })
            .collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    #[serde(flatten)]
    pub stats: SummaryStats,
}

/// Per-parameter posterior summaries pooled across chains.
pub fn summarize(draws: &PosteriorDraws) -> Result<Vec<ParamSummary>> {
    draws.summarize()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse {
        line: e.position().map_or(0, |p| p.line()),
        msg: e.to_string(),
    }
}

struct ChainOutput {
    values: Vec<f64>,
    acc_rates: Vec<f64>,
    scales_adapt_end: Vec<f64>,
    scales_final: Vec<f64>,
}

/// Runs all chains and assembles kept draws in chain-index order.
pub fn run(spec: &ModelSpec, dataset: &Dataset, config: &SamplerConfig) -> Result<PosteriorDraws> {
    let model = Model::new(spec.clone(), dataset)?;
    run_model(&model, config)
}

/// [`run`] for a prebuilt model.
pub fn run_model(model: &Model, config: &SamplerConfig) -> Result<PosteriorDraws> {
    config.validate()?;
    let outputs: Vec<Result<ChainOutput>> = (0..config.chains)
        .into_par_iter()
        .map(|chain| run_chain(model, config, chain))
        .collect();
    let mut values = Vec::with_capacity(config.chains * config.kept_per_chain() * model.n_params());
    let mut acceptance: Vec<BlockAcceptance> = model
        .blocks()
        .iter()
        .map(|b| BlockAcceptance {
            block: b.name.clone(),
            rates: Vec::with_capacity(config.chains),
        })
        .collect();
    let mut scales_adapt_end = Vec::with_capacity(config.chains);
    let mut scales_final = Vec::with_capacity(config.chains);
    for out in outputs {
        let out = out?;
        values.extend_from_slice(&out.values);
        for (acc, rate) in acceptance.iter_mut().zip(&out.acc_rates) {
            acc.rates.push(*rate);
        }
        scales_adapt_end.push(out.scales_adapt_end);
        scales_final.push(out.scales_final);
    }
    Ok(PosteriorDraws {
        names: model.param_names().to_vec(),
        n_chains: config.chains,
        kept: config.kept_per_chain(),
        values,
        acceptance,
        config: *config,
        scales_adapt_end,
        scales_final,
    })
}

/// Stream-split RNG for one chain: same seed, distinct counter stream.
fn chain_rng(seed: u64, chain: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64 + 1);
    rng
}

fn run_chain(model: &Model, config: &SamplerConfig, chain: usize) -> Result<ChainOutput> {
    let mut rng = chain_rng(config.seed, chain);

    let mut state: Option<ParameterState> = None;
    for _ in 0..MAX_INIT_ATTEMPTS {
        let cand = model.initial_state(config.init, &mut rng);
        if model.log_posterior(&cand).is_finite() {
            state = Some(cand);
            break;
        }
    }
    let mut state = state.ok_or(Error::InitFailure {
        attempts: MAX_INIT_ATTEMPTS,
    })?;

    let blocks = model.blocks();
    let n_blocks = blocks.len();
    let mut log_scales = vec![0.1f64.ln(); n_blocks];
    let mut proposals = vec![0u64; n_blocks];
    let mut accepts = vec![0u64; n_blocks];
    let mut adapt_steps = vec![0u64; n_blocks];
    let mut scales_adapt_end = if config.adapt_window == 0 {
        log_scales.iter().map(|s| s.exp()).collect::<Vec<_>>()
    } else {
        Vec::new()
    };

    let kept = config.kept_per_chain();
    let n_params = model.n_params();
    let mut values = Vec::with_capacity(kept * n_params);
    let mut cur = Vec::with_capacity(2);
    let mut prop = Vec::with_capacity(2);
    let mut anchors = Vec::new();

    for it in 0..config.iterations {
        let adapting = it < config.adapt_window;
        for (bidx, block) in blocks.iter().enumerate() {
            model.block_values(block, &state, &mut cur);
            let t_cur = model.block_target(block, &state);
            let scale = log_scales[bidx].exp();

            prop.clear();
            let mut log_jacobian = 0.0;
            let mut in_support = true;
            match block.proposal {
                ProposalStyle::Independent => {
                    for &x in cur.iter() {
                        let (x_new, jac) = propose(block.support, x, scale, &mut rng);
                        match x_new {
                            Some(v) => {
                                prop.push(v);
                                log_jacobian += jac;
                            }
                            None => {
                                in_support = false;
                                prop.push(x);
                            }
                        }
                    }
                }
                ProposalStyle::Translation => {
                    let eps: f64 = rand_distr::StandardNormal.sample(&mut rng);
                    let shift = scale * eps;
                    prop.extend(cur.iter().map(|x| x + shift));
                }
                ProposalStyle::ScaleWithAnchors => {
                    let eps: f64 = rand_distr::StandardNormal.sample(&mut rng);
                    let factor = (scale * eps).exp();
                    model.block_anchors(block, &state, &mut anchors);
                    let scaled = cur[0] * factor;
                    if !(scaled.is_finite() && scaled > 0.0) {
                        in_support = false;
                        prop.extend_from_slice(&cur);
                    } else {
                        prop.push(scaled);
                        for (x, a) in cur[1..].iter().zip(&anchors[1..]) {
                            prop.push(a + factor * (x - a));
                        }
                        // every component stretches by e^eps
                        log_jacobian = scale * eps * block.dim as f64;
                    }
                }
            }

            let alpha = if in_support {
                model.set_block(block, &mut state, &prop);
                let t_prop = model.block_target(block, &state);
                let log_ratio = t_prop - t_cur + log_jacobian;
                let alpha = log_ratio.min(0.0).exp();
                if rng.gen::<f64>().ln() < log_ratio {
                    accepts[bidx] += 1;
                } else {
                    model.set_block(block, &mut state, &cur);
                }
                alpha
            } else {
                0.0
            };
            proposals[bidx] += 1;

            if adapting {
                adapt_steps[bidx] += 1;
                let scalar_move =
                    block.dim == 1 || block.proposal != ProposalStyle::Independent;
                let target = if scalar_move {
                    TARGET_ACCEPT_SCALAR
                } else {
                    TARGET_ACCEPT_VECTOR
                };
                let gamma = (adapt_steps[bidx] as f64).powf(-0.6);
                log_scales[bidx] = (log_scales[bidx] + gamma * (alpha - target)).clamp(-15.0, 5.0);
            }
        }
        if it + 1 == config.adapt_window {
            scales_adapt_end = log_scales.iter().map(|s| s.exp()).collect();
        }
        if it >= config.burn_in && (it - config.burn_in).is_multiple_of(config.thin) {
            model.flatten(&state, &mut values);
        }
    }

    Ok(ChainOutput {
        values,
        acc_rates: accepts
            .iter()
            .zip(&proposals)
            .map(|(&a, &p)| a as f64 / p.max(1) as f64)
            .collect(),
        scales_adapt_end,
        scales_final: log_scales.iter().map(|s| s.exp()).collect(),
    })
}

/// Symmetric random walk in transformed coordinates; returns the new natural
/// value (None when numerically outside the open support) and the log-Jacobian
/// difference contributed by this component.
fn propose<R: Rng + ?Sized>(
    support: Support,
    x: f64,
    scale: f64,
    rng: &mut R,
) -> (Option<f64>, f64) {
    let eps: f64 = rand_distr::StandardNormal.sample(rng);
    match support {
        Support::Real => (Some(x + scale * eps), 0.0),
        Support::Positive => {
            let z = x.ln() + scale * eps;
            let x_new = z.exp();
            if x_new.is_finite() && x_new > 0.0 {
                // |dx/dz| = x
                (Some(x_new), x_new.ln() - x.ln())
            } else {
                (None, 0.0)
            }
        }
        Support::Interval(lo, hi) => {
            let w = (2.0 * (x - lo) / (hi - lo) - 1.0).clamp(-1.0 + 1e-15, 1.0 - 1e-15);
            let z = w.atanh() + scale * eps;
            let w_new = z.tanh();
            if w_new.abs() >= 1.0 {
                return (None, 0.0);
            }
            let x_new = lo + (hi - lo) * (w_new + 1.0) / 2.0;
            // |dx/dz| = (hi-lo)/2 * (1 - w^2)
            let jac = (1.0 - w_new * w_new).ln() - (1.0 - w * w).ln();
            (Some(x_new), jac)
        }
    }
}
