//! Permutation EM: Bernoulli mixtures with a joint latent (component,
//! transformation) over complete samples.
//!
//! A complete sample stacks the `P` group transforms of one patch. Under the
//! latent transformation `w`, block `A(w, w')` is drawn from `μ_{z,w'}`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::{flatten_index, unflatten_index, GroupElement, GroupSpec, PermTable};
use crate::map::{CompleteBatch, FeatureMap};
use crate::math::{clamp_prob, softmax_in_place};
use crate::mixture::{
    dirichlet_rows, has_converged, BernoulliMixture, EmOptions, FitTrace, LogTables, DEAD_COMPONENT_FRACTION,
};
use crate::parallel::{ordered_chunks, DEFAULT_CHUNK};
use crate::transforms::complete_sample;

/// Source of one dictionary row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartMeta {
    pub component: usize,
    pub transform: usize,
}

/// Flat list of part means used for coding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartsDictionary {
    dim: usize,
    parts: Vec<f64>,
    meta: Vec<PartMeta>,
    priors: Vec<f64>,
    spec: GroupSpec,
}

impl PartsDictionary {
    /// Dictionary of untransformed parts with uniform priors.
    pub fn plain(rows: Vec<Vec<f64>>, eps: f64) -> Result<Self> {
        let k = rows.len();
        if k == 0 {
            return Err(Error::EmptyData("dictionary"));
        }
        let dim = rows[0].len();
        let mut parts = Vec::with_capacity(k * dim);
        for r in &rows {
            if r.len() != dim {
                return Err(Error::dim("dictionary row", dim, r.len()));
            }
            parts.extend(r.iter().map(|&m| clamp_prob(m, eps)));
        }
        Ok(PartsDictionary {
            dim,
            parts,
            meta: (0..k)
                .map(|component| PartMeta {
                    component,
                    transform: 0,
                })
                .collect(),
            priors: vec![1.0 / k as f64; k],
            spec: GroupSpec::trivial(),
        })
    }

    /// Rebuilds a dictionary of `F·P` rows ordered by `(component, transform)`.
    pub fn from_raw(dim: usize, parts: Vec<f64>, priors: Vec<f64>, spec: GroupSpec) -> Result<Self> {
        let p = spec.order();
        let k = priors.len();
        if dim == 0 || k == 0 || !k.is_multiple_of(p) {
            return Err(Error::Format(format!("{k} parts do not fit group order {p}")));
        }
        if parts.len() != k * dim {
            return Err(Error::dim("dictionary parts", k * dim, parts.len()));
        }
        Ok(PartsDictionary {
            dim,
            parts,
            meta: (0..k)
                .map(|i| PartMeta {
                    component: i / p,
                    transform: i % p,
                })
                .collect(),
            priors,
            spec,
        })
    }

    pub fn from_mixture(model: &BernoulliMixture) -> Self {
        let k = model.components();
        PartsDictionary {
            dim: model.dim(),
            parts: model.mu().to_vec(),
            meta: (0..k)
                .map(|component| PartMeta {
                    component,
                    transform: 0,
                })
                .collect(),
            priors: model.pi().to_vec(),
            spec: GroupSpec::trivial(),
        }
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn part(&self, k: usize) -> &[f64] {
        &self.parts[k * self.dim..(k + 1) * self.dim]
    }

    pub fn parts(&self) -> &[f64] {
        &self.parts
    }

    pub fn meta(&self) -> &[PartMeta] {
        &self.meta
    }

    /// Prior weight paired with each part when prior-weighted coding is enabled.
    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn spec(&self) -> &GroupSpec {
        &self.spec
    }

    /// Row holding part `(component, transform)`.
    pub fn index_of(&self, component: usize, transform: usize) -> usize {
        component * self.spec.order() + transform
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationMixture {
    spec: GroupSpec,
    components: usize,
    dim: usize,
    eps: f64,
    pi: Vec<f64>,
    mu: Vec<f64>,
}

impl PermutationMixture {
    pub fn new(spec: GroupSpec, components: usize, dim: usize, pi: Vec<f64>, mu: Vec<f64>, eps: f64) -> Result<Self> {
        let p = spec.order();
        if components == 0 {
            return Err(Error::InvalidArgument("component count must be at least 1".into()));
        }
        if pi.len() != components * p {
            return Err(Error::dim("joint priors", components * p, pi.len()));
        }
        if mu.len() != components * p * dim {
            return Err(Error::dim("block means", components * p * dim, mu.len()));
        }
        if pi.iter().any(|&v| !(v >= 0.0)) || (pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "joint priors must be non-negative and sum to 1".into(),
            ));
        }
        let mu = mu.into_iter().map(|m| clamp_prob(m, eps)).collect();
        Ok(PermutationMixture {
            spec,
            components,
            dim,
            eps,
            pi,
            mu,
        })
    }

    pub fn spec(&self) -> &GroupSpec {
        &self.spec
    }

    pub fn table(&self) -> PermTable {
        PermTable::new(&self.spec)
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn order(&self) -> usize {
        self.spec.order()
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

    pub fn prior(&self, f: usize, w: usize) -> f64 {
        self.pi[f * self.order() + w]
    }

    pub fn block(&self, f: usize, w: usize) -> &[f64] {
        let k = f * self.order() + w;
        &self.mu[k * self.dim..(k + 1) * self.dim]
    }

    pub(crate) fn tables(&self) -> LogTables {
        LogTables::new(&self.mu, self.components * self.order(), self.dim)
    }

    /// Cyclically relabels transformations so that `shift` becomes index 0:
    /// `μ'_u = μ_{A(shift,u)}` and `π'_w = π_{A(shift⁻¹,w)}`. Likelihoods of
    /// complete samples are unchanged.
    pub fn relabel(&self, shift: usize) -> Result<PermutationMixture> {
        let p = self.order();
        if shift >= p {
            return Err(Error::IndexOutOfRange {
                what: "transformation",
                value: shift,
                limit: p,
            });
        }
        let table = self.table();
        let inv = table.inverse(shift);
        let mut pi = vec![0.0; self.pi.len()];
        let mut mu = vec![0.0; self.mu.len()];
        for f in 0..self.components {
            for u in 0..p {
                let src = table.get(shift, u);
                let dst = f * p + u;
                mu[dst * self.dim..(dst + 1) * self.dim].copy_from_slice(self.block(f, src));
                pi[dst] = self.prior(f, table.get(inv, u));
            }
        }
        Ok(PermutationMixture { pi, mu, ..self.clone() })
    }

    /// Joint scores `log π_{z,w} + log p(X | z, w)` for one complete sample.
    pub(crate) fn joint_scores(
        &self,
        tables: &LogTables,
        sched: &Schedule,
        blocks: &[&[u32]],
        scratch: &mut Vec<f64>,
        out: &mut [f64],
    ) {
        let p = self.order();
        let k = self.components * p;
        scratch.resize(sched.l_blocks.len() * k, 0.0);
        for (i, &b) in sched.l_blocks.iter().enumerate() {
            tables.on_sums(blocks[b], &mut scratch[i * k..(i + 1) * k]);
        }
        for f in 0..self.components {
            let mut base = 0.0;
            for w2 in 0..p {
                base += tables.base[f * p + w2];
            }
            for w in 0..p {
                let mut acc = 0.0;
                for &(row, col) in &sched.comb[w * p..(w + 1) * p] {
                    acc += scratch[row as usize * k + f * p + col as usize];
                }
                out[f * p + w] = (acc + base) + self.pi[f * p + w].ln();
            }
        }
    }

    /// Per-sample log-likelihood `log Σ_{z,w} π_{z,w} p(X | z, w)` of complete samples.
    pub fn sample_log_likelihoods(&self, batch: &CompleteBatch) -> Result<Vec<f64>> {
        check_batch(self.order(), self.dim, batch)?;
        let tables = self.tables();
        let sched = Schedule::general(&self.table());
        let mut scratch = Vec::new();
        let mut scores = vec![0.0; self.components * self.order()];
        Ok((0..batch.len())
            .map(|n| {
                self.joint_scores(&tables, &sched, &sample_blocks(batch, n), &mut scratch, &mut scores);
                crate::math::log_sum_exp(&scores)
            })
            .collect())
    }
}

/// Which log-likelihood blocks an E-step evaluates and how they combine.
///
/// The general schedule evaluates every block. With quarter-turn tied
/// parts on exactly closed data, block `σ(b)` against part `σ(w')` equals
/// block `b` against part `w'`, so only a quarter of the blocks are needed
/// and only a quarter of the part columns are accumulated in the M-step.
#[derive(Debug, Clone)]
pub(crate) struct Schedule {
    p: usize,
    /// Blocks whose logit sums are computed.
    l_blocks: Vec<usize>,
    /// `comb[w·P + w'] = (row, col)`: the term for `(w, w')` is `L[row][z, col]`.
    comb: Vec<(u32, u32)>,
    /// Part columns accumulated by the M-step.
    cols: Vec<usize>,
    /// `pairing[b·|cols| + i] = A(cols[i]⁻¹, b)`.
    pairing: Vec<usize>,
    tie: Option<TieMaps>,
}

#[derive(Debug, Clone)]
struct TieMaps {
    perm: Vec<u32>,
    /// `prev[w]` = the element one quarter turn before `w`, for non-representatives.
    prev: Vec<Option<usize>>,
}

impl Schedule {
    fn pairing_for(table: &PermTable, cols: &[usize]) -> Vec<usize> {
        let p = table.order();
        let mut out = Vec::with_capacity(p * cols.len());
        for b in 0..p {
            for &w in cols {
                out.push(table.get(table.inverse(w), b));
            }
        }
        out
    }

    pub fn general(table: &PermTable) -> Self {
        let p = table.order();
        let mut comb = Vec::with_capacity(p * p);
        for w in 0..p {
            for w2 in 0..p {
                comb.push((table.get(w, w2) as u32, w2 as u32));
            }
        }
        let cols: Vec<usize> = (0..p).collect();
        Schedule {
            p,
            l_blocks: cols.clone(),
            comb,
            pairing: Self::pairing_for(table, &cols),
            cols,
            tie: None,
        }
    }

    fn tied(spec: &GroupSpec, table: &PermTable, tie: &QuarterTie) -> Self {
        let (rr, tt) = (spec.rotations(), spec.polarities());
        let p = spec.order();
        let q = rr / 4;
        let split = |w: usize| unflatten_index(w, rr, tt).expect("valid index");
        let join = |r: usize, t: usize| flatten_index(r % rr, t, rr, tt).expect("valid index");
        let reps: Vec<usize> = (0..p).filter(|&w| split(w).0 < q).collect();
        let mut pos = vec![usize::MAX; p];
        for (i, &w) in reps.iter().enumerate() {
            pos[w] = i;
        }
        let mut comb = Vec::with_capacity(p * p);
        for w in 0..p {
            for w2 in 0..p {
                let (rb, tb) = split(table.get(w, w2));
                let j = rb / q;
                let b0 = join(rb - j * q, tb);
                let (r2, t2) = split(w2);
                let col = join(r2 + rr - j * q, t2);
                comb.push((pos[b0] as u32, col as u32));
            }
        }
        let prev = (0..p)
            .map(|w| {
                let (r, t) = split(w);
                (r >= q).then(|| join(r - q, t))
            })
            .collect();
        Schedule {
            p,
            l_blocks: reps.clone(),
            comb,
            pairing: Self::pairing_for(table, &reps),
            cols: reps,
            tie: Some(TieMaps {
                perm: tie.permutation.clone(),
                prev,
            }),
        }
    }
}

fn check_batch(model_blocks: usize, dim: usize, batch: &CompleteBatch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyData("batch"));
    }
    if batch.blocks() != model_blocks {
        return Err(Error::dim("complete sample blocks", model_blocks, batch.blocks()));
    }
    if batch.block_dim() != dim {
        return Err(Error::dim("block dimension", dim, batch.block_dim()));
    }
    Ok(())
}

fn sample_blocks(batch: &CompleteBatch, n: usize) -> Vec<&[u32]> {
    (0..batch.blocks()).map(|b| batch.block(n, b)).collect()
}

/// Responsibilities `N×F×P` and the total log-likelihood.
pub fn pem_responsibilities(model: &PermutationMixture, batch: &CompleteBatch) -> Result<(Vec<f64>, f64)> {
    check_batch(model.order(), model.dim, batch)?;
    let k = model.components * model.order();
    let tables = model.tables();
    let sched = Schedule::general(&model.table());
    let mut resp = vec![0.0; batch.len() * k];
    let mut total = 0.0;
    let mut scratch = Vec::new();
    for (n, row) in resp.chunks_mut(k).enumerate() {
        model.joint_scores(&tables, &sched, &sample_blocks(batch, n), &mut scratch, row);
        total += softmax_in_place(row);
    }
    Ok((resp, total))
}

#[derive(Debug, Clone)]
struct PemStats {
    n: usize,
    log_likelihood: f64,
    resp_sum: Vec<f64>,
    /// `D × (F·|cols|)` responsibility-weighted ON counts.
    num: Vec<f64>,
    /// `P×D` ON counts per block.
    block_sum: Vec<f64>,
}

impl PemStats {
    fn zeros(components: usize, sched: &Schedule, dim: usize) -> Self {
        PemStats {
            n: 0,
            log_likelihood: 0.0,
            resp_sum: vec![0.0; components * sched.p],
            num: vec![0.0; dim * components * sched.cols.len()],
            block_sum: vec![0.0; sched.p * dim],
        }
    }

    fn add_sample(
        &mut self,
        sched: &Schedule,
        components: usize,
        blocks: &[&[u32]],
        gamma: &[f64],
        coeff: &mut Vec<f64>,
    ) {
        let p = sched.p;
        let nc = sched.cols.len();
        let width = components * nc;
        let dim = self.block_sum.len() / p;
        self.n += 1;
        for (s, &g) in self.resp_sum.iter_mut().zip(gamma) {
            *s += g;
        }
        coeff.resize(width, 0.0);
        for (b, on) in blocks.iter().enumerate() {
            // block b is drawn from μ_{f,w} when the latent is A(w⁻¹, b)
            let pair = &sched.pairing[b * nc..(b + 1) * nc];
            for f in 0..components {
                for (i, &src) in pair.iter().enumerate() {
                    coeff[f * nc + i] = gamma[f * p + src];
                }
            }
            for &d in on.iter() {
                let d = d as usize;
                self.block_sum[b * dim + d] += 1.0;
                for (a, &c) in self.num[d * width..(d + 1) * width].iter_mut().zip(coeff.iter()) {
                    *a += c;
                }
            }
        }
    }

    fn merge(&mut self, other: PemStats) {
        self.n += other.n;
        self.log_likelihood += other.log_likelihood;
        for (a, b) in self.resp_sum.iter_mut().zip(&other.resp_sum) {
            *a += b;
        }
        for (a, b) in self.num.iter_mut().zip(&other.num) {
            *a += b;
        }
        for (a, b) in self.block_sum.iter_mut().zip(&other.block_sum) {
            *a += b;
        }
    }
}

fn stats_from_resp(batch: &CompleteBatch, resp: &[f64], components: usize, sched: &Schedule, chunk: usize) -> PemStats {
    let k = components * sched.p;
    let mut total = PemStats::zeros(components, sched, batch.block_dim());
    ordered_chunks(
        batch.len(),
        chunk,
        |range| {
            let mut stats = PemStats::zeros(components, sched, batch.block_dim());
            let mut coeff = Vec::new();
            for n in range {
                stats.add_sample(
                    sched,
                    components,
                    &sample_blocks(batch, n),
                    &resp[n * k..(n + 1) * k],
                    &mut coeff,
                );
            }
            stats
        },
        |s| total.merge(s),
    );
    total
}

fn e_pass(model: &PermutationMixture, sched: &Schedule, batch: &CompleteBatch, chunk: usize) -> PemStats {
    let k = model.components * model.order();
    let tables = model.tables();
    let mut total = PemStats::zeros(model.components, sched, model.dim);
    ordered_chunks(
        batch.len(),
        chunk,
        |range| {
            let mut stats = PemStats::zeros(model.components, sched, model.dim);
            let (mut scratch, mut coeff, mut gamma) = (Vec::new(), Vec::new(), vec![0.0; k]);
            for n in range {
                let blocks = sample_blocks(batch, n);
                model.joint_scores(&tables, sched, &blocks, &mut scratch, &mut gamma);
                stats.log_likelihood += softmax_in_place(&mut gamma);
                stats.add_sample(sched, model.components, &blocks, &gamma, &mut coeff);
            }
            stats
        },
        |s| total.merge(s),
    );
    total
}

/// Quarter-turn weight sharing: `μ_{z,(r+R/4,t)}` is the quarter turn of
/// `μ_{z,(r,t)}`, applied as a constrained M-step. Requires complete samples
/// that are exactly closed under quarter turns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarterTie {
    /// Flat index each patch bit moves to under one quarter turn.
    pub permutation: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PemOptions {
    pub em: EmOptions,
    pub quarter_tie: Option<QuarterTie>,
}

impl PemOptions {
    pub fn new(em: EmOptions) -> Self {
        PemOptions { em, quarter_tie: None }
    }
}

fn check_tie(tie: &QuarterTie, spec: &GroupSpec, batch: &CompleteBatch) -> Result<()> {
    let dim = batch.block_dim();
    if !spec.rotations().is_multiple_of(4) {
        return Err(Error::InvalidArgument(format!(
            "quarter-turn tying needs R divisible by 4, got R={}",
            spec.rotations()
        )));
    }
    if tie.permutation.len() != dim {
        return Err(Error::dim("quarter-turn permutation", dim, tie.permutation.len()));
    }
    let mut seen = vec![false; dim];
    for &t in &tie.permutation {
        if t as usize >= dim || std::mem::replace(&mut seen[t as usize], true) {
            return Err(Error::InvalidArgument("quarter-turn map is not a permutation".into()));
        }
    }
    let (rr, tt) = (spec.rotations(), spec.polarities());
    let q = rr / 4;
    let mut turned = Vec::new();
    for n in 0..batch.len() {
        for b in 0..spec.order() {
            let (r, t) = unflatten_index(b, rr, tt)?;
            let next = flatten_index((r + q) % rr, t, rr, tt)?;
            turned.clear();
            turned.extend(batch.block(n, b).iter().map(|&d| tie.permutation[d as usize]));
            turned.sort_unstable();
            if turned.as_slice() != batch.block(n, next) {
                return Err(Error::InvalidArgument(format!(
                    "complete sample {n} is not closed under quarter turns (block {b})"
                )));
            }
        }
    }
    Ok(())
}

/// Averages each quarter-turn orbit of blocks and writes the shared pattern back.
fn apply_tie(mu: &mut [f64], components: usize, spec: &GroupSpec, dim: usize, perm: &[u32]) {
    let (r_count, t_count) = (spec.rotations(), spec.polarities());
    let p = spec.order();
    let q = r_count / 4;
    let mut shared = vec![0.0; dim];
    let mut turned = vec![0.0; dim];
    for f in 0..components {
        for t in 0..t_count {
            for r in 0..q {
                // pull every orbit member back to orientation r and average
                shared.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..4 {
                    let w = flatten_index(r + j * q, t, r_count, t_count).expect("valid index");
                    let mut cur: Vec<f64> = mu[(f * p + w) * dim..(f * p + w + 1) * dim].to_vec();
                    for _ in 0..(4 - j) % 4 {
                        for (d, &v) in cur.iter().enumerate() {
                            turned[perm[d] as usize] = v;
                        }
                        std::mem::swap(&mut cur, &mut turned);
                    }
                    for (s, v) in shared.iter_mut().zip(&cur) {
                        *s += v;
                    }
                }
                shared.iter_mut().for_each(|v| *v /= 4.0);
                let mut cur = shared.clone();
                for j in 0..4 {
                    let w = flatten_index(r + j * q, t, r_count, t_count).expect("valid index");
                    mu[(f * p + w) * dim..(f * p + w + 1) * dim].copy_from_slice(&cur);
                    for (d, &v) in cur.iter().enumerate() {
                        turned[perm[d] as usize] = v;
                    }
                    std::mem::swap(&mut cur, &mut turned);
                }
            }
        }
    }
}

fn m_step_from_stats<R: Rng>(
    stats: &PemStats,
    batch: &CompleteBatch,
    components: usize,
    spec: &GroupSpec,
    sched: &Schedule,
    eps: f64,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let p = spec.order();
    let k = components * p;
    let nc = sched.cols.len();
    let width = components * nc;
    let dim = batch.block_dim();
    let n = stats.n as f64;
    let mut pi: Vec<f64> = stats.resp_sum.iter().map(|s| s / n).collect();
    let mut mu = vec![0.0; k * dim];
    let mut dead = Vec::new();
    for f in 0..components {
        let mut denom = 0.0;
        for w in 0..p {
            denom += stats.resp_sum[f * p + w];
        }
        if denom < DEAD_COMPONENT_FRACTION * n {
            dead.push(f);
            let pick = rng.random_range(0..batch.len());
            for w in 0..p {
                let mut dense = vec![0u8; dim];
                for &d in batch.block(pick, w) {
                    dense[d as usize] = 1;
                }
                for d in 0..dim {
                    let mean = stats.block_sum[w * dim + d] / n;
                    mu[(f * p + w) * dim + d] = clamp_prob(0.75 * dense[d] as f64 + 0.25 * mean, eps);
                }
            }
            continue;
        }
        for (i, &w) in sched.cols.iter().enumerate() {
            let kk = f * p + w;
            for d in 0..dim {
                mu[kk * dim + d] = clamp_prob(stats.num[d * width + f * nc + i] / denom, eps);
            }
        }
        if let Some(tie) = &sched.tie {
            for w in 0..p {
                if let Some(src) = tie.prev[w] {
                    for d in 0..dim {
                        mu[(f * p + w) * dim + tie.perm[d] as usize] = mu[(f * p + src) * dim + d];
                    }
                }
            }
        }
    }
    if !dead.is_empty() {
        for &f in &dead {
            for w in 0..p {
                pi[f * p + w] = 1.0 / k as f64;
            }
        }
        let s: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|v| *v /= s);
        if let Some(tie) = &sched.tie {
            apply_tie(&mut mu, components, spec, dim, &tie.perm);
        }
    }
    (pi, mu, dead)
}

/// `π_{z,w} = Σ_n γ_{z,w} / N`,
/// `μ_{f,w,d} = Σ_{n,w'} γ_{f,w'} X_{A(w,w'),d} / Σ_{n,w'} γ_{f,w'}`, clamped.
pub fn pem_m_step<R: Rng>(
    batch: &CompleteBatch,
    responsibilities: &[f64],
    spec: &GroupSpec,
    components: usize,
    eps: f64,
    rng: &mut R,
) -> Result<PermutationMixture> {
    let p = spec.order();
    if batch.is_empty() {
        return Err(Error::EmptyData("batch"));
    }
    if batch.blocks() != p {
        return Err(Error::dim("complete sample blocks", p, batch.blocks()));
    }
    if responsibilities.len() != batch.len() * components * p {
        return Err(Error::dim(
            "responsibilities",
            batch.len() * components * p,
            responsibilities.len(),
        ));
    }
    let sched = Schedule::general(&PermTable::new(spec));
    let stats = stats_from_resp(batch, responsibilities, components, &sched, DEFAULT_CHUNK);
    let (pi, mu, _) = m_step_from_stats(&stats, batch, components, spec, &sched, eps, rng);
    PermutationMixture::new(*spec, components, batch.block_dim(), pi, mu, eps)
}

/// Fits on ready-made complete samples.
pub fn pem_fit_complete(
    batch: &CompleteBatch,
    spec: &GroupSpec,
    components: usize,
    opts: &PemOptions,
) -> Result<(PermutationMixture, FitTrace)> {
    let em = &opts.em;
    let p = spec.order();
    if components == 0 {
        return Err(Error::InvalidArgument("component count must be at least 1".into()));
    }
    if batch.is_empty() {
        return Err(Error::EmptyData("training data"));
    }
    if batch.blocks() != p {
        return Err(Error::dim("complete sample blocks", p, batch.blocks()));
    }
    if batch.len() < components {
        return Err(Error::InsufficientSamples(format!(
            "{} samples for {components} components",
            batch.len()
        )));
    }
    let dim = batch.block_dim();
    let table = PermTable::new(spec);
    let general = Schedule::general(&table);
    let sched = match &opts.quarter_tie {
        Some(tie) => {
            check_tie(tie, spec, batch)?;
            Schedule::tied(spec, &table, tie)
        }
        None => general.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(em.seed);
    let init = dirichlet_rows(&mut rng, batch.len(), components * p);
    let stats = stats_from_resp(batch, &init, components, &general, em.chunk_size);
    let (pi, mut mu, _) = m_step_from_stats(&stats, batch, components, spec, &general, em.eps, &mut rng);
    if p > 1 {
        // break the rotational symmetry: each component starts near one training sample
        for f in 0..components {
            let pick = rng.random_range(0..batch.len());
            for w in 0..p {
                let block = &mut mu[(f * p + w) * dim..(f * p + w + 1) * dim];
                let mut dense = vec![0.0; dim];
                for &d in batch.block(pick, w) {
                    dense[d as usize] = 1.0;
                }
                for (m, x) in block.iter_mut().zip(&dense) {
                    *m = clamp_prob(0.5 * x + 0.5 * *m, em.eps);
                }
            }
        }
        if let Some(tie) = &opts.quarter_tie {
            apply_tie(&mut mu, components, spec, dim, &tie.permutation);
        }
    }
    let mut model = PermutationMixture::new(*spec, components, dim, pi, mu, em.eps)?;
    let mut trace = FitTrace::default();
    for iter in 0..em.max_iters.max(1) {
        let stats = e_pass(&model, &sched, batch, em.chunk_size);
        let ll = stats.log_likelihood;
        let prev = trace.log_likelihoods.last().copied();
        trace.log_likelihoods.push(ll);
        log::debug!("pem_fit iter {iter}: log-likelihood {ll:.6}");
        if prev.is_some_and(|p| has_converged(p, ll, em.rel_tol)) {
            trace.converged = true;
            break;
        }
        if iter + 1 == em.max_iters {
            break;
        }
        let (pi, mu, dead) = m_step_from_stats(&stats, batch, components, spec, &sched, em.eps, &mut rng);
        trace.reseeded.push(dead.len());
        model = PermutationMixture { pi, mu, ..model };
    }
    Ok((model, trace))
}

/// Builds complete samples with `transform` and fits a permutation mixture.
pub fn pem_fit<T>(
    patches: &[FeatureMap],
    spec: &GroupSpec,
    components: usize,
    mut transform: T,
    opts: &PemOptions,
) -> Result<(PermutationMixture, FitTrace)>
where
    T: FnMut(GroupElement, &FeatureMap) -> Result<FeatureMap>,
{
    let first = patches.first().ok_or(Error::EmptyData("patches"))?;
    let mut batch = CompleteBatch::new(spec.order(), first.len());
    for patch in patches {
        batch.push(&complete_sample(patch, spec, &mut transform)?)?;
    }
    pem_fit_complete(&batch, spec, components, opts)
}

/// Flattens the model into `F·P` coding parts, row `(f, w)` = `μ_{f,w}`.
///
/// Part `(f, u)` is the pattern the original patch shows when the latent
/// transformation is `u⁻¹`, so it is paired with prior `π_{f,u⁻¹}`.
pub fn pem_flatten(model: &PermutationMixture) -> PartsDictionary {
    let p = model.order();
    let table = model.table();
    let mut meta = Vec::with_capacity(model.components * p);
    let mut priors = Vec::with_capacity(model.components * p);
    for f in 0..model.components {
        for w in 0..p {
            meta.push(PartMeta {
                component: f,
                transform: w,
            });
            priors.push(model.prior(f, table.inverse(w)));
        }
    }
    PartsDictionary {
        dim: model.dim,
        parts: model.mu.clone(),
        meta,
        priors,
        spec: model.spec,
    }
}

/// Index of `(rotation, polarity)` for a model's group, convenience for callers.
pub fn transform_index(spec: &GroupSpec, rotation: usize, polarity: usize) -> Result<usize> {
    flatten_index(rotation, polarity, spec.rotations(), spec.polarities())
}

/// `(rotation, polarity)` of a flat transformation index.
pub fn transform_pair(spec: &GroupSpec, index: usize) -> Result<(usize, usize)> {
    unflatten_index(index, spec.rotations(), spec.polarities())
}
