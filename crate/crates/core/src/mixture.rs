//! Bernoulli mixture models trained with EM.
//!
//! Log-likelihoods use the factorization
//! `Σ_d log(1 − μ_d) + Σ_{d : x_d = 1} logit(μ_d)`, so the per-sample cost
//! scales with the number of ON bits rather than the dimension.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::BinaryRows;
use crate::math::{clamp_prob, log_sum_exp, softmax_in_place};
use crate::parallel::{ordered_chunks, DEFAULT_CHUNK};

/// Relative share of `N` below which a component counts as dead.
pub const DEAD_COMPONENT_FRACTION: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
    /// Means are clamped to `[eps, 1 − eps]`.
    pub eps: f64,
    pub chunk_size: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iters: 20,
            rel_tol: 1e-4,
            seed: 0,
            eps: 0.01,
            chunk_size: DEFAULT_CHUNK,
        }
    }
}

/// Observed-data log-likelihood after each E-step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub log_likelihoods: Vec<f64>,
    pub converged: bool,
    /// Components re-seeded by the dead-component policy, per iteration.
    pub reseeded: Vec<usize>,
}

impl FitTrace {
    /// True if no step decreased the log-likelihood by more than `rel_tol` (relative).
    pub fn is_monotone(&self, rel_tol: f64) -> bool {
        self.log_likelihoods
            .windows(2)
            .all(|w| w[1] >= w[0] - rel_tol * w[0].abs().max(1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BernoulliMixture {
    pi: Vec<f64>,
    mu: Vec<f64>,
    dim: usize,
    eps: f64,
}

/// Precomputed `log(1 − μ)` row sums and transposed logits.
pub(crate) struct LogTables {
    pub k: usize,
    pub base: Vec<f64>,
    /// `D×K`, row `d` holds `logit(μ_{·,d})`.
    pub logit_t: Vec<f64>,
}

impl LogTables {
    pub fn new(mu: &[f64], k: usize, dim: usize) -> Self {
        let mut base = vec![0.0; k];
        let mut logit_t = vec![0.0; dim * k];
        for c in 0..k {
            let row = &mu[c * dim..(c + 1) * dim];
            let mut acc = 0.0;
            for (d, &m) in row.iter().enumerate() {
                let l0 = (1.0 - m).ln();
                acc += l0;
                logit_t[d * k + c] = m.ln() - l0;
            }
            base[c] = acc;
        }
        LogTables { k, base, logit_t }
    }

    /// Writes `log p(x | component c)` for every component into `out`.
    #[inline]
    pub fn log_likelihoods(&self, on: &[u32], out: &mut [f64]) {
        self.on_sums(on, out);
        for (o, b) in out.iter_mut().zip(&self.base) {
            *o += b;
        }
    }
}

impl LogTables {
    /// Sum of logit rows over the ON indices, starting from zero.
    #[inline]
    pub fn on_sums(&self, on: &[u32], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for &d in on {
            let row = &self.logit_t[d as usize * self.k..(d as usize + 1) * self.k];
            for (o, &l) in out.iter_mut().zip(row) {
                *o += l;
            }
        }
    }
}

impl BernoulliMixture {
    pub fn new(pi: Vec<f64>, mu: Vec<f64>, dim: usize, eps: f64) -> Result<Self> {
        let f = pi.len();
        if f == 0 {
            return Err(Error::InvalidArgument("mixture needs at least one component".into()));
        }
        if mu.len() != f * dim {
            return Err(Error::dim("mixture means", f * dim, mu.len()));
        }
        if pi.iter().any(|&p| !(p >= 0.0)) || (pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "priors must be non-negative and sum to 1".into(),
            ));
        }
        if !(0.0..0.5).contains(&eps) {
            return Err(Error::InvalidArgument(format!("eps must lie in [0, 0.5), got {eps}")));
        }
        let mu = mu.into_iter().map(|m| clamp_prob(m, eps)).collect();
        Ok(BernoulliMixture { pi, mu, dim, eps })
    }

    pub fn components(&self) -> usize {
        self.pi.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn mean(&self, f: usize) -> &[f64] {
        &self.mu[f * self.dim..(f + 1) * self.dim]
    }

    pub(crate) fn tables(&self) -> LogTables {
        LogTables::new(&self.mu, self.components(), self.dim)
    }

    /// Per-component log-likelihoods and the mixture log-likelihood of a dense binary vector.
    pub fn log_likelihood(&self, x: &[u8]) -> Result<(Vec<f64>, f64)> {
        if x.len() != self.dim {
            return Err(Error::dim("sample", self.dim, x.len()));
        }
        let on: Vec<u32> = x
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0)
            .map(|(i, _)| i as u32)
            .collect();
        Ok(self.log_likelihood_sparse(&on))
    }

    pub fn log_likelihood_sparse(&self, on: &[u32]) -> (Vec<f64>, f64) {
        let tables = self.tables();
        let mut comp = vec![0.0; self.components()];
        tables.log_likelihoods(on, &mut comp);
        let weighted: Vec<f64> = comp.iter().zip(&self.pi).map(|(l, p)| l + p.ln()).collect();
        (comp, log_sum_exp(&weighted))
    }
}

pub fn bm_log_likelihood(model: &BernoulliMixture, x: &[u8]) -> Result<(Vec<f64>, f64)> {
    model.log_likelihood(x)
}

/// Sufficient statistics of one pass over data.
#[derive(Debug, Clone)]
pub(crate) struct MixtureStats {
    pub n: usize,
    pub log_likelihood: f64,
    pub resp_sum: Vec<f64>,
    /// `D×F` responsibility-weighted ON counts.
    pub num: Vec<f64>,
    pub data_sum: Vec<f64>,
}

impl MixtureStats {
    fn zeros(f: usize, dim: usize) -> Self {
        MixtureStats {
            n: 0,
            log_likelihood: 0.0,
            resp_sum: vec![0.0; f],
            num: vec![0.0; dim * f],
            data_sum: vec![0.0; dim],
        }
    }

    fn add_sample(&mut self, on: &[u32], gamma: &[f64]) {
        let f = gamma.len();
        self.n += 1;
        for (s, &g) in self.resp_sum.iter_mut().zip(gamma) {
            *s += g;
        }
        for &d in on {
            let d = d as usize;
            self.data_sum[d] += 1.0;
            for (a, &g) in self.num[d * f..(d + 1) * f].iter_mut().zip(gamma) {
                *a += g;
            }
        }
    }

    fn merge(&mut self, other: MixtureStats) {
        self.n += other.n;
        self.log_likelihood += other.log_likelihood;
        for (a, b) in self.resp_sum.iter_mut().zip(&other.resp_sum) {
            *a += b;
        }
        for (a, b) in self.num.iter_mut().zip(&other.num) {
            *a += b;
        }
        for (a, b) in self.data_sum.iter_mut().zip(&other.data_sum) {
            *a += b;
        }
    }
}

fn check_batch(batch: &BinaryRows, dim: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyData("batch"));
    }
    if batch.dim() != dim {
        return Err(Error::dim("batch dimension", dim, batch.dim()));
    }
    Ok(())
}

/// Responsibilities (`N×F`, row-major) and the total log-likelihood.
pub fn bm_e_step(model: &BernoulliMixture, batch: &BinaryRows) -> Result<(Vec<f64>, f64)> {
    check_batch(batch, model.dim)?;
    let f = model.components();
    let tables = model.tables();
    let log_pi: Vec<f64> = model.pi.iter().map(|p| p.ln()).collect();
    let mut resp = vec![0.0; batch.len() * f];
    let mut total = 0.0;
    for (n, row) in resp.chunks_mut(f).enumerate() {
        tables.log_likelihoods(batch.row(n), row);
        for (r, lp) in row.iter_mut().zip(&log_pi) {
            *r += lp;
        }
        total += softmax_in_place(row);
    }
    Ok((resp, total))
}

fn e_pass(model: &BernoulliMixture, tables: &LogTables, batch: &BinaryRows, chunk: usize) -> MixtureStats {
    let f = model.components();
    let log_pi: Vec<f64> = model.pi.iter().map(|p| p.ln()).collect();
    let mut total = MixtureStats::zeros(f, model.dim);
    ordered_chunks(
        batch.len(),
        chunk,
        |range| {
            let mut stats = MixtureStats::zeros(f, model.dim);
            let mut gamma = vec![0.0; f];
            for n in range {
                let on = batch.row(n);
                tables.log_likelihoods(on, &mut gamma);
                for (g, lp) in gamma.iter_mut().zip(&log_pi) {
                    *g += lp;
                }
                stats.log_likelihood += softmax_in_place(&mut gamma);
                stats.add_sample(on, &gamma);
            }
            stats
        },
        |s| total.merge(s),
    );
    total
}

fn stats_from_resp(batch: &BinaryRows, resp: &[f64], f: usize, chunk: usize) -> MixtureStats {
    let mut total = MixtureStats::zeros(f, batch.dim());
    ordered_chunks(
        batch.len(),
        chunk,
        |range| {
            let mut stats = MixtureStats::zeros(f, batch.dim());
            for n in range {
                stats.add_sample(batch.row(n), &resp[n * f..(n + 1) * f]);
            }
            stats
        },
        |s| total.merge(s),
    );
    total
}

/// M-step from accumulated statistics, re-seeding dead components.
fn m_step_from_stats<R: Rng>(
    stats: &MixtureStats,
    batch: &BinaryRows,
    eps: f64,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let f = stats.resp_sum.len();
    let dim = batch.dim();
    let n = stats.n as f64;
    let mut pi: Vec<f64> = stats.resp_sum.iter().map(|s| s / n).collect();
    let mut mu = vec![0.0; f * dim];
    let mut dead = Vec::new();
    for c in 0..f {
        let denom = stats.resp_sum[c];
        if denom < DEAD_COMPONENT_FRACTION * n {
            dead.push(c);
            let pick = batch.to_dense(rng.random_range(0..batch.len()));
            for d in 0..dim {
                let mean = stats.data_sum[d] / n;
                mu[c * dim + d] = clamp_prob(0.75 * pick[d] as f64 + 0.25 * mean, eps);
            }
            continue;
        }
        for d in 0..dim {
            mu[c * dim + d] = clamp_prob(stats.num[d * f + c] / denom, eps);
        }
    }
    if !dead.is_empty() {
        for &c in &dead {
            pi[c] = 1.0 / f as f64;
        }
        let s: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= s);
    }
    (pi, mu, dead)
}

/// `π_f = mean_n γ_{n,f}`, `μ_{f,d} = Σ_n γ_{n,f} x_{n,d} / Σ_n γ_{n,f}`, clamped.
pub fn bm_m_step<R: Rng>(
    batch: &BinaryRows,
    responsibilities: &[f64],
    components: usize,
    eps: f64,
    rng: &mut R,
) -> Result<BernoulliMixture> {
    if batch.is_empty() {
        return Err(Error::EmptyData("batch"));
    }
    if responsibilities.len() != batch.len() * components {
        return Err(Error::dim(
            "responsibilities",
            batch.len() * components,
            responsibilities.len(),
        ));
    }
    let stats = stats_from_resp(batch, responsibilities, components, DEFAULT_CHUNK);
    let (pi, mu, _) = m_step_from_stats(&stats, batch, eps, rng);
    BernoulliMixture::new(pi, mu, batch.dim(), eps)
}

/// Symmetric Dirichlet(1) draws, `n` rows of width `k`.
pub(crate) fn dirichlet_rows<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * k);
    for _ in 0..n {
        let start = out.len();
        for _ in 0..k {
            let e: f64 = rng.sample(Exp1);
            out.push(e);
        }
        let s: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= s);
    }
    out
}

pub(crate) fn has_converged(prev: f64, cur: f64, rel_tol: f64) -> bool {
    (cur - prev) / prev.abs().max(f64::MIN_POSITIVE) < rel_tol
}

pub fn bm_fit(data: &BinaryRows, components: usize, opts: &EmOptions) -> Result<(BernoulliMixture, FitTrace)> {
    if components == 0 {
        return Err(Error::InvalidArgument("component count must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyData("training data"));
    }
    if data.len() < components {
        return Err(Error::InsufficientSamples(format!(
            "{} samples for {components} components",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let init = dirichlet_rows(&mut rng, data.len(), components);
    let stats = stats_from_resp(data, &init, components, opts.chunk_size);
    let (pi, mu, _) = m_step_from_stats(&stats, data, opts.eps, &mut rng);
    let mut model = BernoulliMixture::new(pi, mu, data.dim(), opts.eps)?;
    let mut trace = FitTrace::default();
    for iter in 0..opts.max_iters.max(1) {
        let tables = model.tables();
        let stats = e_pass(&model, &tables, data, opts.chunk_size);
        let ll = stats.log_likelihood;
        let prev = trace.log_likelihoods.last().copied();
        trace.log_likelihoods.push(ll);
        log::debug!("bm_fit iter {iter}: log-likelihood {ll:.6}");
        if prev.is_some_and(|p| has_converged(p, ll, opts.rel_tol)) {
            trace.converged = true;
            break;
        }
        if iter + 1 == opts.max_iters {
            break;
        }
        let (pi, mu, dead) = m_step_from_stats(&stats, data, opts.eps, &mut rng);
        trace.reseeded.push(dead.len());
        model = BernoulliMixture { pi, mu, ..model };
    }
    Ok((model, trace))
}
