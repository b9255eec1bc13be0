//! The multinomial verdict-choice model: design-row construction from
//! transcripts, L2-penalized maximum-likelihood fitting, odds ratios,
//! cluster bootstrap CIs, and a synthetic recovery-row generator.
//!
//! Per row the verdict logits are
//! `theta[model][v] + phi[dilemma][v] + alpha[model]*1[v = prev_own]
//!  + gamma_prev[model]*n_prev[v] + gamma_within[model]*n_within[v]`.
//! The over-parameterized softmax has no reference category; the weak L2
//! penalty pins the representative, and at any stationary point each model's
//! theta row sums to (sum of data-gradient components)/(2 lambda) = 0.
//!
//! Fitting is diagonally preconditioned gradient descent on the penalized
//! negative log-likelihood with backtracking halving, so the loss trace is
//! strictly decreasing. All reductions run in a fixed sequential order;
//! results are bit-reproducible.

use std::collections::BTreeMap;

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{sample_with_phi, SyntheticParams};
use crate::metrics::percentile_bounds;
use crate::protocol::{DeliberationFormat, Transcript, Verdict};

const K: usize = 5;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("design has no rows")]
    EmptyRows,
    #[error("objective is not finite at iteration {0}")]
    NonFinite(usize),
    #[error("row references unknown model {0:?}")]
    UnknownModel(String),
    #[error("row references unknown dilemma {0:?}")]
    UnknownDilemma(String),
    #[error("{dropped} of {total} bootstrap replicates diverged (limit 10%)")]
    TooManyDropped { dropped: usize, total: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignRow {
    pub dilemma_id: String,
    pub model: String,
    pub round: u32,
    pub y: Verdict,
    /// The model's own previous-round verdict; absent iff round 1.
    pub prev_own: Option<Verdict>,
    /// Peer verdict counts over all strictly earlier rounds.
    pub n_prev: BTreeMap<Verdict, u32>,
    /// Peer verdict counts earlier within the current round (round robin).
    pub n_within: BTreeMap<Verdict, u32>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DesignOptions {
    /// Count the model's own earlier verdicts in n_prev as well. Off by
    /// default: self-repetition is already carried by the inertia term.
    pub prev_includes_self: bool,
}

#[derive(Debug, Default)]
pub struct DesignBuild {
    pub rows: Vec<DesignRow>,
    /// Transcript-level failures, reported instead of aborting the build.
    pub errors: Vec<String>,
}

/// One row per turn, including turns of partially aborted transcripts: every
/// produced turn is an observed choice.
pub fn build_design(transcripts: &[Transcript], opts: &DesignOptions) -> DesignBuild {
    let mut build = DesignBuild::default();
    for t in transcripts {
        if let Err(e) = t.validate() {
            build.errors.push(format!("{}: {e}", t.dilemma_id));
            continue;
        }
        for turn in &t.turns {
            let prev_own = if turn.round > 1 {
                t.turn_of(&turn.agent, turn.round - 1).map(|p| p.verdict)
            } else {
                None
            };
            let mut n_prev: BTreeMap<Verdict, u32> = BTreeMap::new();
            let mut n_within: BTreeMap<Verdict, u32> = BTreeMap::new();
            for other in &t.turns {
                let self_turn = other.agent == turn.agent;
                if other.round < turn.round && (!self_turn || opts.prev_includes_self) {
                    *n_prev.entry(other.verdict).or_default() += 1;
                }
                if t.config.format == DeliberationFormat::RoundRobin
                    && other.round == turn.round
                    && other.seq < turn.seq
                    && !self_turn
                {
                    *n_within.entry(other.verdict).or_default() += 1;
                }
            }
            build.rows.push(DesignRow {
                dilemma_id: t.dilemma_id.clone(),
                model: turn.agent.clone(),
                round: turn.round,
                y: turn.verdict,
                prev_own,
                n_prev,
                n_within,
            });
        }
    }
    build
}

/// Flat parameter layout over models and dilemmas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamIndex {
    pub models: Vec<String>,
    pub dilemmas: Vec<String>,
    pub include_phi: bool,
}

impl ParamIndex {
    pub fn from_rows(rows: &[DesignRow], include_phi: bool) -> ParamIndex {
        let mut models: Vec<String> = rows.iter().map(|r| r.model.clone()).collect();
        models.sort();
        models.dedup();
        let mut dilemmas: Vec<String> = rows.iter().map(|r| r.dilemma_id.clone()).collect();
        dilemmas.sort();
        dilemmas.dedup();
        ParamIndex {
            models,
            dilemmas,
            include_phi,
        }
    }

    pub fn n_params(&self) -> usize {
        let phi = if self.include_phi {
            K * self.dilemmas.len()
        } else {
            0
        };
        K * self.models.len() + phi + 3 * self.models.len()
    }

    fn theta(&self, m: usize, v: usize) -> usize {
        m * K + v
    }

    fn phi(&self, d: usize, v: usize) -> Option<usize> {
        if self.include_phi {
            Some(K * self.models.len() + d * K + v)
        } else {
            None
        }
    }

    fn tail_base(&self) -> usize {
        K * self.models.len()
            + if self.include_phi {
                K * self.dilemmas.len()
            } else {
                0
            }
    }

    fn alpha(&self, m: usize) -> usize {
        self.tail_base() + m
    }

    fn gamma_prev(&self, m: usize) -> usize {
        self.tail_base() + self.models.len() + m
    }

    fn gamma_within(&self, m: usize) -> usize {
        self.tail_base() + 2 * self.models.len() + m
    }

    pub fn model_of(&self, name: &str) -> Option<usize> {
        self.models.binary_search_by(|m| m.as_str().cmp(name)).ok()
    }

    pub fn dilemma_of(&self, id: &str) -> Option<usize> {
        self.dilemmas.binary_search_by(|d| d.as_str().cmp(id)).ok()
    }
}

/// Row with indices resolved, counts packed.
#[derive(Debug, Clone, Copy)]
struct Packed {
    m: usize,
    d: usize,
    y: usize,
    prev: Option<usize>,
    n_prev: [f64; K],
    n_within: [f64; K],
}

struct Problem {
    index: ParamIndex,
    packed: Vec<Packed>,
}

impl Problem {
    fn pack(rows: &[&DesignRow], index: ParamIndex) -> Result<Problem, FitError> {
        let mut packed = Vec::with_capacity(rows.len());
        for row in rows {
            let m = index
                .model_of(&row.model)
                .ok_or_else(|| FitError::UnknownModel(row.model.clone()))?;
            let d = index
                .dilemma_of(&row.dilemma_id)
                .ok_or_else(|| FitError::UnknownDilemma(row.dilemma_id.clone()))?;
            let mut n_prev = [0.0; K];
            for (v, c) in &row.n_prev {
                n_prev[v.index()] = f64::from(*c);
            }
            let mut n_within = [0.0; K];
            for (v, c) in &row.n_within {
                n_within[v.index()] = f64::from(*c);
            }
            packed.push(Packed {
                m,
                d,
                y: row.y.index(),
                prev: row.prev_own.map(|v| v.index()),
                n_prev,
                n_within,
            });
        }
        Ok(Problem { index, packed })
    }

    fn logits(&self, params: &[f64], row: &Packed) -> [f64; K] {
        let idx = &self.index;
        let mut logits = [0.0; K];
        for (v, l) in logits.iter_mut().enumerate() {
            let mut x = params[idx.theta(row.m, v)];
            if let Some(p) = idx.phi(row.d, v) {
                x += params[p];
            }
            if row.prev == Some(v) {
                x += params[idx.alpha(row.m)];
            }
            x += params[idx.gamma_prev(row.m)] * row.n_prev[v];
            x += params[idx.gamma_within(row.m)] * row.n_within[v];
            *l = x;
        }
        logits
    }

    /// Penalized negative log-likelihood.
    fn loss(&self, params: &[f64], lambda: f64) -> f64 {
        let mut ll = 0.0;
        for row in &self.packed {
            let logits = self.logits(params, row);
            ll += logits[row.y] - log_sum_exp(&logits);
        }
        let penalty: f64 = params.iter().map(|p| p * p).sum();
        -(ll - lambda * penalty)
    }

    /// Loss and its gradient in one pass.
    fn loss_and_grad(&self, params: &[f64], lambda: f64, grad: &mut [f64]) -> f64 {
        let idx = &self.index;
        grad.fill(0.0);
        let mut ll = 0.0;
        for row in &self.packed {
            let logits = self.logits(params, row);
            let lse = log_sum_exp(&logits);
            ll += logits[row.y] - lse;
            let mut probs = [0.0; K];
            for (p, l) in probs.iter_mut().zip(&logits) {
                *p = (l - lse).exp();
            }
            let mut dot_prev = 0.0;
            let mut dot_within = 0.0;
            for v in 0..K {
                let resid = f64::from(u8::from(v == row.y)) - probs[v];
                grad[idx.theta(row.m, v)] += resid;
                if let Some(p) = idx.phi(row.d, v) {
                    grad[p] += resid;
                }
                if row.prev == Some(v) {
                    grad[idx.alpha(row.m)] += resid;
                }
                dot_prev += resid * row.n_prev[v];
                dot_within += resid * row.n_within[v];
            }
            grad[idx.gamma_prev(row.m)] += dot_prev;
            grad[idx.gamma_within(row.m)] += dot_within;
        }
        // gradient of the loss = -(data gradient) + 2*lambda*params
        let mut penalty = 0.0;
        for (g, p) in grad.iter_mut().zip(params) {
            *g = -*g + 2.0 * lambda * p;
            penalty += p * p;
        }
        -(ll - lambda * penalty)
    }

    /// Diagonal of the Fisher information plus the penalty curvature, used
    /// as a preconditioner.
    fn fisher_diag(&self, params: &[f64], lambda: f64) -> Vec<f64> {
        let idx = &self.index;
        let mut h = vec![0.0; params.len()];
        for row in &self.packed {
            let logits = self.logits(params, row);
            let lse = log_sum_exp(&logits);
            let mut mean_prev = 0.0;
            let mut mean_sq_prev = 0.0;
            let mut mean_within = 0.0;
            let mut mean_sq_within = 0.0;
            for v in 0..K {
                let p = (logits[v] - lse).exp();
                let w = p * (1.0 - p);
                h[idx.theta(row.m, v)] += w;
                if let Some(i) = idx.phi(row.d, v) {
                    h[i] += w;
                }
                if row.prev == Some(v) {
                    h[idx.alpha(row.m)] += w;
                }
                mean_prev += p * row.n_prev[v];
                mean_sq_prev += p * row.n_prev[v] * row.n_prev[v];
                mean_within += p * row.n_within[v];
                mean_sq_within += p * row.n_within[v] * row.n_within[v];
            }
            h[idx.gamma_prev(row.m)] += mean_sq_prev - mean_prev * mean_prev;
            h[idx.gamma_within(row.m)] += mean_sq_within - mean_within * mean_within;
        }
        for x in &mut h {
            *x += 2.0 * lambda;
            *x = x.max(1e-9);
        }
        h
    }
}

fn log_sum_exp(logits: &[f64; K]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

pub const DEFAULT_LAMBDA: f64 = 1e-3;
pub const DEFAULT_MAX_ITERS: usize = 20_000;
pub const DEFAULT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Fit per-dilemma effects. Off, all phi are fixed at zero.
    pub include_phi: bool,
}

impl Default for FitOptions {
    fn default() -> FitOptions {
        FitOptions {
            lambda: DEFAULT_LAMBDA,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            include_phi: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub theta: BTreeMap<String, BTreeMap<Verdict, f64>>,
    pub phi: BTreeMap<String, BTreeMap<Verdict, f64>>,
    pub alpha: BTreeMap<String, f64>,
    pub gamma_prev: BTreeMap<String, f64>,
    pub gamma_within: BTreeMap<String, f64>,
}

impl ModelParams {
    fn from_flat(index: &ParamIndex, flat: &[f64]) -> ModelParams {
        let mut out = ModelParams::default();
        for (m, name) in index.models.iter().enumerate() {
            let mut row = BTreeMap::new();
            for (v, verdict) in Verdict::ALL.iter().enumerate() {
                row.insert(*verdict, flat[index.theta(m, v)]);
            }
            out.theta.insert(name.clone(), row);
            out.alpha.insert(name.clone(), flat[index.alpha(m)]);
            out.gamma_prev.insert(name.clone(), flat[index.gamma_prev(m)]);
            out.gamma_within
                .insert(name.clone(), flat[index.gamma_within(m)]);
        }
        if index.include_phi {
            for (d, id) in index.dilemmas.iter().enumerate() {
                let mut row = BTreeMap::new();
                for (v, verdict) in Verdict::ALL.iter().enumerate() {
                    row.insert(*verdict, flat[index.phi(d, v).unwrap()]);
                }
                out.phi.insert(id.clone(), row);
            }
        }
        out
    }

    fn to_flat(&self, index: &ParamIndex) -> Vec<f64> {
        let mut flat = vec![0.0; index.n_params()];
        for (m, name) in index.models.iter().enumerate() {
            if let Some(row) = self.theta.get(name) {
                for (v, verdict) in Verdict::ALL.iter().enumerate() {
                    flat[index.theta(m, v)] = row.get(verdict).copied().unwrap_or(0.0);
                }
            }
            flat[index.alpha(m)] = self.alpha.get(name).copied().unwrap_or(0.0);
            flat[index.gamma_prev(m)] = self.gamma_prev.get(name).copied().unwrap_or(0.0);
            flat[index.gamma_within(m)] =
                self.gamma_within.get(name).copied().unwrap_or(0.0);
        }
        if index.include_phi {
            for (d, id) in index.dilemmas.iter().enumerate() {
                if let Some(row) = self.phi.get(id) {
                    for (v, verdict) in Verdict::ALL.iter().enumerate() {
                        flat[index.phi(d, v).unwrap()] =
                            row.get(verdict).copied().unwrap_or(0.0);
                    }
                }
            }
        }
        flat
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub estimate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci: Option<(f64, f64)>,
    /// exp(estimate), exactly.
    pub odds_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEffects {
    pub alpha: ParamReport,
    pub gamma_prev: ParamReport,
    pub gamma_within: ParamReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    /// Per-model inertia and conformity effects with odds ratios.
    pub table: BTreeMap<String, ModelEffects>,
    pub loss_trace: Vec<f64>,
    pub converged: bool,
    pub grad_norm: f64,
    pub n_rows: usize,
    pub lambda: f64,
}

fn report(estimate: f64) -> ParamReport {
    ParamReport {
        estimate,
        ci: None,
        odds_ratio: estimate.exp(),
    }
}

struct FlatFit {
    flat: Vec<f64>,
    trace: Vec<f64>,
    converged: bool,
    grad_norm: f64,
}

const PRECOND_REFRESH: usize = 25;
const MAX_HALVINGS: usize = 60;

fn fit_problem(
    problem: &Problem,
    opts: &FitOptions,
    warm: Option<&[f64]>,
) -> Result<FlatFit, FitError> {
    let n = problem.index.n_params();
    let mut params: Vec<f64> = match warm {
        Some(w) => w.to_vec(),
        None => vec![0.0; n],
    };
    let mut grad = vec![0.0; n];
    let mut loss = problem.loss_and_grad(&params, opts.lambda, &mut grad);
    if !loss.is_finite() {
        return Err(FitError::NonFinite(0));
    }
    let mut trace = vec![loss];
    let mut h = problem.fisher_diag(&params, opts.lambda);
    let mut converged = false;
    let mut candidate = vec![0.0; n];

    for iter in 0..opts.max_iters {
        if iter > 0 && iter % PRECOND_REFRESH == 0 {
            h = problem.fisher_diag(&params, opts.lambda);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            for i in 0..n {
                candidate[i] = params[i] - step * grad[i] / h[i];
            }
            let cand_loss = problem.loss(&candidate, opts.lambda);
            if cand_loss.is_finite() && cand_loss < loss {
                accepted = Some(cand_loss);
                break;
            }
            step *= 0.5;
        }
        let Some(new_loss) = accepted else {
            // no descent direction left at floating-point resolution
            converged = true;
            break;
        };
        std::mem::swap(&mut params, &mut candidate);
        let improvement = loss - new_loss;
        loss = problem.loss_and_grad(&params, opts.lambda, &mut grad);
        trace.push(loss);
        if improvement <= opts.tol * (1.0 + loss.abs()) {
            converged = true;
            break;
        }
    }
    let grad_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    Ok(FlatFit {
        flat: params,
        trace,
        converged,
        grad_norm,
    })
}

/// Penalized log-likelihood of rows under explicit parameters (zero for
/// anything the parameter set does not name).
pub fn log_likelihood(
    params: &ModelParams,
    rows: &[DesignRow],
    lambda: f64,
) -> Result<f64, FitError> {
    let refs: Vec<&DesignRow> = rows.iter().collect();
    let index = ParamIndex::from_rows(rows, true);
    let problem = Problem::pack(&refs, index.clone())?;
    let flat = params.to_flat(&index);
    if flat.iter().any(|p| !p.is_finite()) {
        return Err(FitError::NonFinite(0));
    }
    Ok(-problem.loss(&flat, lambda))
}

/// Penalized loss and its analytic gradient at an explicit flat parameter
/// vector in `index` order. This is the raw objective surface, exposed so
/// the gradient can be checked against finite differences from outside.
pub fn loss_and_grad_flat(
    index: &ParamIndex,
    rows: &[DesignRow],
    flat: &[f64],
    lambda: f64,
) -> Result<(f64, Vec<f64>), FitError> {
    assert_eq!(flat.len(), index.n_params(), "parameter vector length");
    let refs: Vec<&DesignRow> = rows.iter().collect();
    let problem = Problem::pack(&refs, index.clone())?;
    let mut grad = vec![0.0; flat.len()];
    let loss = problem.loss_and_grad(flat, lambda, &mut grad);
    Ok((loss, grad))
}

pub fn fit(rows: &[DesignRow], opts: &FitOptions) -> Result<FitResult, FitError> {
    if rows.is_empty() {
        return Err(FitError::EmptyRows);
    }
    let refs: Vec<&DesignRow> = rows.iter().collect();
    let index = ParamIndex::from_rows(rows, opts.include_phi);
    let problem = Problem::pack(&refs, index.clone())?;
    let flat = fit_problem(&problem, opts, None)?;
    let params = ModelParams::from_flat(&index, &flat.flat);
    let table = index
        .models
        .iter()
        .map(|m| {
            (
                m.clone(),
                ModelEffects {
                    alpha: report(params.alpha[m]),
                    gamma_prev: report(params.gamma_prev[m]),
                    gamma_within: report(params.gamma_within[m]),
                },
            )
        })
        .collect();
    Ok(FitResult {
        params,
        table,
        loss_trace: flat.trace,
        converged: flat.converged,
        grad_norm: flat.grad_norm,
        n_rows: rows.len(),
        lambda: opts.lambda,
    })
}

/// Choice probabilities for one row under fitted parameters.
pub fn predict_proba(
    params: &ModelParams,
    row: &DesignRow,
) -> Result<BTreeMap<Verdict, f64>, FitError> {
    let theta = params
        .theta
        .get(&row.model)
        .ok_or_else(|| FitError::UnknownModel(row.model.clone()))?;
    let phi = if params.phi.is_empty() {
        None
    } else {
        Some(
            params
                .phi
                .get(&row.dilemma_id)
                .ok_or_else(|| FitError::UnknownDilemma(row.dilemma_id.clone()))?,
        )
    };
    let alpha = params.alpha.get(&row.model).copied().unwrap_or(0.0);
    let gp = params.gamma_prev.get(&row.model).copied().unwrap_or(0.0);
    let gw = params.gamma_within.get(&row.model).copied().unwrap_or(0.0);
    let mut logits = [0.0; K];
    for (v, verdict) in Verdict::ALL.iter().enumerate() {
        let mut x = theta.get(verdict).copied().unwrap_or(0.0);
        if let Some(phi) = phi {
            x += phi.get(verdict).copied().unwrap_or(0.0);
        }
        if row.prev_own == Some(*verdict) {
            x += alpha;
        }
        x += gp * f64::from(row.n_prev.get(verdict).copied().unwrap_or(0));
        x += gw * f64::from(row.n_within.get(verdict).copied().unwrap_or(0));
        logits[v] = x;
    }
    let lse = log_sum_exp(&logits);
    Ok(Verdict::ALL
        .iter()
        .zip(logits)
        .map(|(v, l)| (*v, (l - lse).exp()))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectCis {
    pub alpha: (f64, f64),
    pub gamma_prev: (f64, f64),
    pub gamma_within: (f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub cis: BTreeMap<String, EffectCis>,
    pub dropped: usize,
    pub replicates: usize,
}

pub const DEFAULT_BOOTSTRAP_REPLICATES: usize = 200;

/// Percentile CIs for the alpha and gamma effects from a cluster bootstrap:
/// dilemmas are resampled with replacement, each replicate refit warm-started
/// from the full-data solution. Diverging replicates are dropped; more than
/// 10% drops is a failure.
pub fn fit_bootstrap_ci(
    rows: &[DesignRow],
    b: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<BootstrapResult, FitError> {
    if rows.is_empty() {
        return Err(FitError::EmptyRows);
    }
    assert!(b > 0, "bootstrap needs at least one replicate");
    let refs: Vec<&DesignRow> = rows.iter().collect();
    let index = ParamIndex::from_rows(rows, opts.include_phi);
    let problem = Problem::pack(&refs, index.clone())?;
    let full = fit_problem(&problem, opts, None)?;

    // group packed rows by dilemma index
    let mut by_dilemma: Vec<Vec<Packed>> = vec![Vec::new(); index.dilemmas.len()];
    for p in &problem.packed {
        by_dilemma[p.d].push(*p);
    }
    let n_dilemmas = index.dilemmas.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut estimates: BTreeMap<&str, [Vec<f64>; 3]> = index
        .models
        .iter()
        .map(|m| (m.as_str(), [Vec::new(), Vec::new(), Vec::new()]))
        .collect();
    let mut dropped = 0;
    for _ in 0..b {
        let mut replicate_rows = Vec::with_capacity(problem.packed.len());
        for _ in 0..n_dilemmas {
            let pick = rng.random_range(0..n_dilemmas);
            replicate_rows.extend_from_slice(&by_dilemma[pick]);
        }
        let replicate = Problem {
            index: index.clone(),
            packed: replicate_rows,
        };
        match fit_problem(&replicate, opts, Some(&full.flat)) {
            Ok(fitted) => {
                for (m, name) in index.models.iter().enumerate() {
                    let slot = estimates.get_mut(name.as_str()).unwrap();
                    slot[0].push(fitted.flat[index.alpha(m)]);
                    slot[1].push(fitted.flat[index.gamma_prev(m)]);
                    slot[2].push(fitted.flat[index.gamma_within(m)]);
                }
            }
            Err(_) => dropped += 1,
        }
    }
    if dropped * 10 > b {
        return Err(FitError::TooManyDropped { dropped, total: b });
    }

    let mut cis = BTreeMap::new();
    for name in &index.models {
        let slot = estimates.get_mut(name.as_str()).unwrap();
        let interval = |xs: &mut Vec<f64>| {
            xs.sort_by(f64::total_cmp);
            percentile_bounds(xs, 0.95)
        };
        cis.insert(
            name.clone(),
            EffectCis {
                alpha: interval(&mut slot[0]),
                gamma_prev: interval(&mut slot[1]),
                gamma_within: interval(&mut slot[2]),
            },
        );
    }
    Ok(BootstrapResult {
        cis,
        dropped,
        replicates: b,
    })
}

/// Attach bootstrap CIs to a fit table.
pub fn attach_cis(result: &mut FitResult, boot: &BootstrapResult) {
    for (model, effects) in &mut result.table {
        if let Some(ci) = boot.cis.get(model) {
            effects.alpha.ci = Some(ci.alpha);
            effects.gamma_prev.ci = Some(ci.gamma_prev);
            effects.gamma_within.ci = Some(ci.gamma_within);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecoveryFormat {
    Synchronous,
    RoundRobin,
    /// Alternate formats across dilemmas.
    Mixed,
}

/// Generator settings for synthetic design rows. Rows are produced directly
/// from the choice model with full rounds (no consensus stopping), which
/// keeps the row count at n_dilemmas * rounds * agents.
#[derive(Debug, Clone)]
pub struct RecoveryConfig {
    pub n_dilemmas: usize,
    pub rounds: u32,
    pub n_agents: usize,
    pub params: SyntheticParams,
    /// Half-width of the uniform per-dilemma verdict offsets; 0 disables.
    pub phi_spread: f64,
    pub format: RecoveryFormat,
    pub seed: u64,
    /// All agents share one parameter set; with a shared label their rows
    /// pool into a single fitted model instead of one per seat.
    pub model_label: Option<String>,
}

/// Sample a synthetic dataset with known ground truth. The sampler is the
/// same one synthetic connectors use, so a fit recovering these parameters
/// is checked against an independent generative route.
pub fn generate_recovery_rows(cfg: &RecoveryConfig) -> Vec<DesignRow> {
    assert!(cfg.n_agents >= 2, "need at least two agents");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.n_dilemmas * cfg.rounds as usize * cfg.n_agents);
    let models: Vec<String> = (1..=cfg.n_agents)
        .map(|i| match &cfg.model_label {
            Some(label) => label.clone(),
            None => format!("m{i}"),
        })
        .collect();
    for di in 0..cfg.n_dilemmas {
        let dilemma_id = format!("sim{di:05}");
        let phi: Option<BTreeMap<Verdict, f64>> = if cfg.phi_spread > 0.0 {
            Some(
                Verdict::ALL
                    .iter()
                    .map(|v| (*v, rng.random_range(-cfg.phi_spread..=cfg.phi_spread)))
                    .collect(),
            )
        } else {
            None
        };
        let round_robin = match cfg.format {
            RecoveryFormat::Synchronous => false,
            RecoveryFormat::RoundRobin => true,
            RecoveryFormat::Mixed => di % 2 == 1,
        };
        // history[agent][round-1]; the speaking order rotates across
        // dilemmas so every model gets within-round exposure
        let mut history: Vec<Vec<Verdict>> = vec![Vec::new(); cfg.n_agents];
        for round in 1..=cfg.rounds {
            let mut committed_this_round: Vec<(usize, Verdict)> = Vec::new();
            for pos in 0..cfg.n_agents {
                // di/2 keeps the rotation uncorrelated with the format
                // alternation in Mixed mode
                let a = (pos + di / 2) % cfg.n_agents;
                let prev_own = if round > 1 {
                    Some(history[a][(round - 2) as usize])
                } else {
                    None
                };
                let mut n_prev: BTreeMap<Verdict, u32> = BTreeMap::new();
                for (other, hist) in history.iter().enumerate() {
                    if other == a {
                        continue;
                    }
                    for &v in hist.iter().take((round - 1) as usize) {
                        *n_prev.entry(v).or_default() += 1;
                    }
                }
                let mut n_within: BTreeMap<Verdict, u32> = BTreeMap::new();
                if round_robin {
                    for &(other, v) in &committed_this_round {
                        if other != a {
                            *n_within.entry(v).or_default() += 1;
                        }
                    }
                }
                let y = sample_with_phi(
                    &cfg.params,
                    phi.as_ref(),
                    prev_own,
                    &n_prev,
                    &n_within,
                    &mut rng,
                );
                rows.push(DesignRow {
                    dilemma_id: dilemma_id.clone(),
                    model: models[a].clone(),
                    round,
                    y,
                    prev_own,
                    n_prev,
                    n_within,
                });
                committed_this_round.push((a, y));
            }
            for (a, v) in committed_this_round {
                history[a].push(v);
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{DeliberationConfig, Outcome, Turn};

    fn turn(agent: &str, round: u32, verdict: Verdict, seq: u32) -> Turn {
        Turn {
            agent: agent.into(),
            round,
            verdict,
            explanation: "e".into(),
            raw: format!(
                "I am {agent}. This is Round {round}.\nMy current verdict: {verdict}.\n\nHere's my thinking: e"
            ),
            seq,
            round_mismatch: false,
        }
    }

    fn sync_transcript(id: &str, rounds: &[(Verdict, Verdict)], outcome: Outcome) -> Transcript {
        let mut config = DeliberationConfig::new(
            DeliberationFormat::Synchronous,
            vec!["A".into(), "B".into()],
        );
        config.max_rounds = rounds.len() as u32;
        let mut turns = Vec::new();
        for (r, &(va, vb)) in rounds.iter().enumerate() {
            turns.push(turn("A", (r + 1) as u32, va, 2 * r as u32));
            turns.push(turn("B", (r + 1) as u32, vb, 2 * r as u32 + 1));
        }
        Transcript {
            dilemma_id: id.into(),
            config,
            turns,
            outcome,
        }
    }

    #[test]
    fn design_rows_sync() {
        let t = sync_transcript(
            "d1",
            &[(Verdict::NTA, Verdict::YTA), (Verdict::YTA, Verdict::YTA)],
            Outcome::Consensus {
                verdict: Verdict::YTA,
                round: 2,
            },
        );
        let build = build_design(std::slice::from_ref(&t), &DesignOptions::default());
        assert!(build.errors.is_empty());
        assert_eq!(build.rows.len(), 4);
        let a2 = build
            .rows
            .iter()
            .find(|r| r.model == "A" && r.round == 2)
            .unwrap();
        assert_eq!(a2.prev_own, Some(Verdict::NTA));
        assert_eq!(a2.n_prev, BTreeMap::from([(Verdict::YTA, 1)]));
        assert!(a2.n_within.is_empty());
        let a1 = build
            .rows
            .iter()
            .find(|r| r.model == "A" && r.round == 1)
            .unwrap();
        assert_eq!(a1.prev_own, None);
        assert!(a1.n_prev.is_empty());
    }

    /// Three-agent round robin with the published verdict pattern: first
    /// agent NTA, NTA, ESH, NAH; the other two NAH throughout.
    fn rr_three_way() -> Transcript {
        let order = vec!["Gemini".to_string(), "Claude".into(), "GPT".into()];
        let mut config = DeliberationConfig::new(DeliberationFormat::RoundRobin, order);
        config.max_rounds = 4;
        let gemini = [Verdict::NTA, Verdict::NTA, Verdict::ESH, Verdict::NAH];
        let mut turns = Vec::new();
        let mut seq = 0;
        for r in 1..=4u32 {
            for (agent, v) in [
                ("Gemini", gemini[(r - 1) as usize]),
                ("Claude", Verdict::NAH),
                ("GPT", Verdict::NAH),
            ] {
                turns.push(turn(agent, r, v, seq));
                seq += 1;
            }
        }
        Transcript {
            dilemma_id: "d2".into(),
            config,
            turns,
            outcome: Outcome::Consensus {
                verdict: Verdict::NAH,
                round: 4,
            },
        }
    }

    #[test]
    fn design_rows_round_robin_counts() {
        let t = rr_three_way();
        let build = build_design(std::slice::from_ref(&t), &DesignOptions::default());
        assert!(build.errors.is_empty());
        assert_eq!(build.rows.len(), 12);

        let claude_r1 = build
            .rows
            .iter()
            .find(|r| r.model == "Claude" && r.round == 1)
            .unwrap();
        assert_eq!(claude_r1.prev_own, None);
        assert!(claude_r1.n_prev.is_empty());
        assert_eq!(claude_r1.n_within, BTreeMap::from([(Verdict::NTA, 1)]));

        let gpt_r3 = build
            .rows
            .iter()
            .find(|r| r.model == "GPT" && r.round == 3)
            .unwrap();
        assert_eq!(gpt_r3.prev_own, Some(Verdict::NAH));
        assert_eq!(
            gpt_r3.n_within,
            BTreeMap::from([(Verdict::ESH, 1), (Verdict::NAH, 1)])
        );
        assert_eq!(
            gpt_r3.n_prev,
            BTreeMap::from([(Verdict::NTA, 2), (Verdict::NAH, 2)])
        );

        let with_self = build_design(
            std::slice::from_ref(&t),
            &DesignOptions {
                prev_includes_self: true,
            },
        );
        let gpt_r3 = with_self
            .rows
            .iter()
            .find(|r| r.model == "GPT" && r.round == 3)
            .unwrap();
        assert_eq!(
            gpt_r3.n_prev,
            BTreeMap::from([(Verdict::NTA, 2), (Verdict::NAH, 4)])
        );
    }

    #[test]
    fn design_reports_malformed_transcripts() {
        let good = sync_transcript(
            "ok",
            &[(Verdict::NTA, Verdict::NTA)],
            Outcome::Consensus {
                verdict: Verdict::NTA,
                round: 1,
            },
        );
        let mut bad = good.clone();
        bad.dilemma_id = "broken".into();
        bad.turns[1].agent = "A".into();
        let build = build_design(&[good, bad], &DesignOptions::default());
        assert_eq!(build.rows.len(), 2);
        assert_eq!(build.errors.len(), 1);
        assert!(build.errors[0].contains("broken"));
    }

    fn row(model: &str, y: Verdict) -> DesignRow {
        DesignRow {
            dilemma_id: "d".into(),
            model: model.into(),
            round: 1,
            y,
            prev_own: None,
            n_prev: BTreeMap::new(),
            n_within: BTreeMap::new(),
        }
    }

    #[test]
    fn log_likelihood_known_points() {
        let rows = vec![row("m", Verdict::NTA)];
        let zero = ModelParams::default();
        let ll = log_likelihood(&zero, &rows, 0.0).unwrap();
        assert!((ll - 0.2f64.ln()).abs() < 1e-12);
        // lambda with zero params leaves the value unchanged
        let ll_pen = log_likelihood(&zero, &rows, 0.5).unwrap();
        assert_eq!(ll, ll_pen);

        let mut favoring = ModelParams::default();
        favoring.theta.insert(
            "m".into(),
            BTreeMap::from([(Verdict::NTA, 10.0)]),
        );
        let ll = log_likelihood(&favoring, &rows, 0.0).unwrap();
        assert!(ll > -1e-3, "saturated likelihood, got {ll}");
    }

    #[test]
    fn gradient_matches_central_differences() {
        let cfg = RecoveryConfig {
            n_dilemmas: 4,
            rounds: 3,
            n_agents: 2,
            params: SyntheticParams {
                alpha: 0.8,
                gamma_prev: 0.3,
                gamma_within: 0.9,
                ..Default::default()
            },
            phi_spread: 0.5,
            format: RecoveryFormat::Mixed,
            seed: 31,
            model_label: None,
        };
        let rows = generate_recovery_rows(&cfg);
        let refs: Vec<&DesignRow> = rows.iter().collect();
        let index = ParamIndex::from_rows(&rows, true);
        let problem = Problem::pack(&refs, index.clone()).unwrap();
        let n = index.n_params();
        let lambda = 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(7);

        for _ in 0..5 {
            let point: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            let mut grad = vec![0.0; n];
            problem.loss_and_grad(&point, lambda, &mut grad);
            for _ in 0..6 {
                let i = rng.random_range(0..n);
                let eps = 1e-6;
                let mut hi = point.clone();
                hi[i] += eps;
                let mut lo = point.clone();
                lo[i] -= eps;
                let fd = (problem.loss(&hi, lambda) - problem.loss(&lo, lambda)) / (2.0 * eps);
                let denom = grad[i].abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((grad[i] - fd) / denom).abs() < 1e-5,
                    "param {i}: analytic {} vs fd {fd}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn theta_only_fit_matches_empirical_log_odds() {
        let mut rows = Vec::new();
        for _ in 0..6 {
            rows.push(row("m", Verdict::NTA));
        }
        for _ in 0..3 {
            rows.push(row("m", Verdict::YTA));
        }
        rows.push(row("m", Verdict::ESH));
        let opts = FitOptions {
            lambda: 1e-4,
            include_phi: false,
            ..Default::default()
        };
        let result = fit(&rows, &opts).unwrap();
        assert!(result.converged);
        let theta = &result.params.theta["m"];
        let fitted_gap = theta[&Verdict::NTA] - theta[&Verdict::YTA];
        assert!(
            (fitted_gap - (6.0f64 / 3.0).ln()).abs() < 0.05,
            "gap {fitted_gap}"
        );
        let probs = predict_proba(&result.params, &rows[0]).unwrap();
        assert!((probs[&Verdict::NTA] - 0.6).abs() < 0.03);
        assert!((probs[&Verdict::YTA] - 0.3).abs() < 0.03);
    }

    #[test]
    fn loss_trace_is_strictly_decreasing() {
        let cfg = RecoveryConfig {
            n_dilemmas: 20,
            rounds: 4,
            n_agents: 2,
            params: SyntheticParams {
                alpha: 1.0,
                gamma_prev: 0.2,
                gamma_within: 0.5,
                ..Default::default()
            },
            phi_spread: 0.0,
            format: RecoveryFormat::Mixed,
            seed: 5,
            model_label: None,
        };
        let rows = generate_recovery_rows(&cfg);
        let result = fit(&rows, &FitOptions::default()).unwrap();
        for pair in result.loss_trace.windows(2) {
            assert!(pair[1] < pair[0], "trace must strictly decrease");
        }
        assert!(result.converged);
    }

    #[test]
    fn duplicated_rows_leave_estimates_unchanged_at_zero_lambda() {
        let cfg = RecoveryConfig {
            n_dilemmas: 12,
            rounds: 3,
            n_agents: 2,
            params: SyntheticParams {
                alpha: 1.2,
                ..Default::default()
            },
            phi_spread: 0.0,
            format: RecoveryFormat::Synchronous,
            seed: 13,
            model_label: None,
        };
        let rows = generate_recovery_rows(&cfg);
        let mut doubled = rows.clone();
        doubled.extend(rows.iter().cloned());
        let opts = FitOptions {
            lambda: 0.0,
            include_phi: false,
            ..Default::default()
        };
        let single = fit(&rows, &opts).unwrap();
        let double = fit(&doubled, &opts).unwrap();
        for m in single.params.alpha.keys() {
            assert!(
                (single.params.alpha[m] - double.params.alpha[m]).abs() < 1e-9,
                "alpha changed under duplication"
            );
            assert!(
                (single.params.gamma_prev[m] - double.params.gamma_prev[m]).abs() < 1e-9
            );
        }
    }

    #[test]
    fn theta_rows_sum_to_zero_at_optimum() {
        let cfg = RecoveryConfig {
            n_dilemmas: 30,
            rounds: 3,
            n_agents: 2,
            params: SyntheticParams {
                theta: BTreeMap::from([(Verdict::NTA, 0.8), (Verdict::INFO, -0.5)]),
                alpha: 0.7,
                ..Default::default()
            },
            phi_spread: 0.0,
            format: RecoveryFormat::Mixed,
            seed: 21,
            model_label: None,
        };
        let rows = generate_recovery_rows(&cfg);
        let lambda = 0.1;
        let result = fit(
            &rows,
            &FitOptions {
                lambda,
                include_phi: false,
                ..Default::default()
            },
        )
        .unwrap();
        // At a stationary point the sum of a model's theta gradient
        // components is 2*lambda*sum(theta), so sum(theta) is bounded by
        // K*grad_norm/(2*lambda).
        let bound = 5.0 * result.grad_norm / (2.0 * lambda) + 1e-9;
        for (m, theta) in &result.params.theta {
            let sum: f64 = theta.values().sum();
            assert!(sum.abs() <= bound.max(1e-5), "theta sum for {m}: {sum}");
        }
    }

    #[test]
    fn synchronous_data_pins_gamma_within_at_zero() {
        let cfg = RecoveryConfig {
            n_dilemmas: 25,
            rounds: 3,
            n_agents: 2,
            params: SyntheticParams {
                alpha: 1.0,
                gamma_prev: 0.4,
                ..Default::default()
            },
            phi_spread: 0.0,
            format: RecoveryFormat::Synchronous,
            seed: 3,
            model_label: None,
        };
        let rows = generate_recovery_rows(&cfg);
        assert!(rows.iter().all(|r| r.n_within.is_empty()));
        let result = fit(
            &rows,
            &FitOptions {
                include_phi: false,
                ..Default::default()
            },
        )
        .unwrap();
        for (_, g) in &result.params.gamma_within {
            assert_eq!(*g, 0.0, "gamma_within must stay exactly zero");
        }
    }

    #[test]
    fn predict_proba_known_values() {
        let zero = ModelParams {
            theta: BTreeMap::from([("m".to_string(), BTreeMap::new())]),
            ..Default::default()
        };
        let r = row("m", Verdict::NTA);
        let p = predict_proba(&zero, &r).unwrap();
        for v in Verdict::ALL {
            assert!((p[&v] - 0.2).abs() < 1e-12);
        }
        assert!((p.values().sum::<f64>() - 1.0).abs() < 1e-9);

        let mut inertial = zero.clone();
        inertial.alpha.insert("m".into(), 8.27f64.ln());
        let mut r2 = r.clone();
        r2.prev_own = Some(Verdict::ESH);
        r2.round = 2;
        let p = predict_proba(&inertial, &r2).unwrap();
        assert!((p[&Verdict::ESH] / p[&Verdict::NTA] - 8.27).abs() < 1e-9);

        let mut within = zero.clone();
        within.gamma_within.insert("m".into(), 5.21f64.ln());
        let mut r3 = r.clone();
        r3.n_within = BTreeMap::from([(Verdict::NAH, 1)]);
        let p = predict_proba(&within, &r3).unwrap();
        assert!((p[&Verdict::NAH] / p[&Verdict::INFO] - 5.21).abs() < 1e-9);

        assert!(matches!(
            predict_proba(&zero, &row("other", Verdict::NTA)),
            Err(FitError::UnknownModel(_))
        ));
    }

    #[test]
    fn odds_ratio_is_exp_of_estimate() {
        let cfg = RecoveryConfig {
            n_dilemmas: 10,
            rounds: 2,
            n_agents: 2,
            params: SyntheticParams {
                alpha: 0.5,
                ..Default::default()
            },
            phi_spread: 0.0,
            format: RecoveryFormat::Synchronous,
            seed: 2,
            model_label: None,
        };
        let rows = generate_recovery_rows(&cfg);
        let result = fit(
            &rows,
            &FitOptions {
                include_phi: false,
                ..Default::default()
            },
        )
        .unwrap();
        for effects in result.table.values() {
            for r in [&effects.alpha, &effects.gamma_prev, &effects.gamma_within] {
                assert_eq!(r.odds_ratio, r.estimate.exp());
            }
        }
    }

    #[test]
    fn bootstrap_is_seeded_and_degenerate_at_one_replicate() {
        let cfg = RecoveryConfig {
            n_dilemmas: 15,
            rounds: 2,
            n_agents: 2,
            params: SyntheticParams {
                alpha: 1.0,
                ..Default::default()
            },
            phi_spread: 0.0,
            format: RecoveryFormat::Synchronous,
            seed: 8,
            model_label: None,
        };
        let rows = generate_recovery_rows(&cfg);
        let opts = FitOptions {
            include_phi: false,
            ..Default::default()
        };
        let one = fit_bootstrap_ci(&rows, 1, 4, &opts).unwrap();
        for ci in one.cis.values() {
            assert_eq!(ci.alpha.0, ci.alpha.1);
        }
        let a = fit_bootstrap_ci(&rows, 12, 4, &opts).unwrap();
        let b = fit_bootstrap_ci(&rows, 12, 4, &opts).unwrap();
        assert_eq!(a.cis, b.cis);
        assert_eq!(a.dropped, 0);
    }

    #[test]
    fn recovery_generator_is_deterministic_and_format_aware() {
        let cfg = RecoveryConfig {
            n_dilemmas: 6,
            rounds: 3,
            n_agents: 2,
            params: SyntheticParams {
                gamma_within: 1.0,
                ..Default::default()
            },
            phi_spread: 0.3,
            format: RecoveryFormat::Mixed,
            seed: 42,
            model_label: None,
        };
        let a = generate_recovery_rows(&cfg);
        let b = generate_recovery_rows(&cfg);
        assert_eq!(a, b);
        assert_eq!(a.len(), 6 * 3 * 2);
        // mixed formats: odd dilemmas are round robin and show within-round counts
        assert!(a
            .iter()
            .any(|r| r.dilemma_id == "sim00001" && !r.n_within.is_empty()));
        assert!(a
            .iter()
            .filter(|r| r.dilemma_id == "sim00000")
            .all(|r| r.n_within.is_empty()));
        // round-1 rows never carry prev_own
        assert!(a.iter().all(|r| (r.round == 1) == r.prev_own.is_none()));
    }

    #[test]
    fn small_recovery_smoke() {
        let truth = SyntheticParams {
            alpha: 1.5,
            gamma_prev: 0.3,
            gamma_within: 1.0,
            ..Default::default()
        };
        let cfg = RecoveryConfig {
            n_dilemmas: 120,
            rounds: 4,
            n_agents: 2,
            params: truth.clone(),
            phi_spread: 0.0,
            format: RecoveryFormat::Mixed,
            seed: 77,
            model_label: None,
        };
        let rows = generate_recovery_rows(&cfg);
        let result = fit(
            &rows,
            &FitOptions {
                include_phi: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(result.converged);
        for m in ["m1", "m2"] {
            assert!(
                (result.params.alpha[m] - truth.alpha).abs() < 0.45,
                "alpha[{m}] = {}",
                result.params.alpha[m]
            );
            assert!(
                (result.params.gamma_within[m] - truth.gamma_within).abs() < 0.5,
                "gamma_within[{m}] = {}",
                result.params.gamma_within[m]
            );
        }
    }
}
