//! Two-covariance PLDA back-end.
//!
//! Generative model: a speaker's latent mean `m ~ N(μ, B)`, each utterance
//! `y = m + ε` with `ε ~ N(0, W)`. Parameters are fitted by EM and trials
//! are scored by the same-speaker / different-speaker log-likelihood ratio.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Cholesky, Gaussian, Matrix, Vector};

pub const DEFAULT_EM_ITERS: usize = 10;

/// Relative size of the diagonal load added when `W` is not positive definite.
const FLOOR_FRACTION: f64 = 1e-6;

/// How embeddings are conditioned before PLDA modeling and scoring.
///
/// The training-set mean is always recorded; it is subtracted only when
/// `center` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub center: bool,
    pub length_norm: bool,
    pub mean: Vector,
}

impl Preprocessing {
    pub fn identity(dim: usize) -> Self {
        Preprocessing {
            center: false,
            length_norm: false,
            mean: Vector::zeros(dim),
        }
    }

    /// Records the mean of `embeddings` under the given switches.
    pub fn fit<'a>(
        embeddings: impl IntoIterator<Item = &'a [f64]>,
        center: bool,
        length_norm: bool,
    ) -> Result<Self> {
        let mut it = embeddings.into_iter().peekable();
        let dim = it
            .peek()
            .map(|v| v.len())
            .ok_or_else(|| Error::EmptyInput("no embeddings to fit preprocessing".into()))?;
        let mut mean = Vector::zeros(dim);
        let mut n = 0usize;
        for v in it {
            if v.len() != dim {
                return shape_err(format!("embedding dim {} vs {dim}", v.len()));
            }
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
            n += 1;
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        Ok(Preprocessing {
            center,
            length_norm,
            mean,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }

    pub fn apply(&self, key: &str, v: &[f64]) -> Result<Vector> {
        if v.len() != self.dim() {
            return shape_err(format!(
                "embedding `{key}` has dim {}, preprocessing expects {}",
                v.len(),
                self.dim()
            ));
        }
        let mut out: Vec<f64> = if self.center {
            v.iter().zip(self.mean.iter()).map(|(a, m)| a - m).collect()
        } else {
            v.to_vec()
        };
        if self.length_norm {
            let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroVector(key.to_string()));
            }
            out.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(Vector(out))
    }
}

pub fn preprocess(embeddings: &[Embedding], fingerprint: &Preprocessing) -> Result<Vec<Embedding>> {
    embeddings
        .iter()
        .map(|e| {
            Ok(Embedding::new(
                e.key.clone(),
                fingerprint.apply(&e.key, &e.vector)?,
            ))
        })
        .collect()
}

/// Embeddings grouped by speaker, in speaker-label order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddingSet {
    speakers: Vec<(String, Vec<Vector>)>,
    dim: usize,
}

impl LabeledEmbeddingSet {
    pub fn from_labeled<I, S>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vector)>,
        S: Into<String>,
    {
        let mut map: BTreeMap<String, Vec<Vector>> = BTreeMap::new();
        let mut dim = None;
        for (spk, v) in items {
            let d = *dim.get_or_insert(v.dim());
            if v.dim() != d {
                return shape_err(format!("embedding dim {} vs {d}", v.dim()));
            }
            map.entry(spk.into()).or_default().push(v);
        }
        let set = LabeledEmbeddingSet {
            speakers: map.into_iter().collect(),
            dim: dim.unwrap_or(0),
        };
        set.check_identifiable()?;
        Ok(set)
    }

    fn check_identifiable(&self) -> Result<()> {
        if self.speakers.len() < 2 {
            return Err(Error::Identifiability(format!(
                "PLDA needs at least 2 speakers, got {}",
                self.speakers.len()
            )));
        }
        if self.speakers.iter().all(|(_, u)| u.len() < 2) {
            return Err(Error::Identifiability(
                "every speaker has a single utterance; within-speaker covariance is unidentifiable"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn n_utterances(&self) -> usize {
        self.speakers.iter().map(|(_, u)| u.len()).sum()
    }

    pub fn speakers(&self) -> &[(String, Vec<Vector>)] {
        &self.speakers
    }
}

/// Sufficient statistics per speaker.
struct SpeakerStats {
    count: usize,
    mean: Vector,
}

struct Stats {
    dim: usize,
    speakers: Vec<SpeakerStats>,
    /// `Σ_i Σ_j (y_ij − ȳ_i)(y_ij − ȳ_i)ᵀ`.
    within_scatter: Matrix,
    total: usize,
}

impl Stats {
    fn new(data: &LabeledEmbeddingSet) -> Self {
        let d = data.dim;
        let mut within_scatter = Matrix::zeros(d, d);
        let mut speakers = Vec::with_capacity(data.speakers.len());
        for (_, utts) in &data.speakers {
            let mut mean = Vector::zeros(d);
            for u in utts {
                for (m, x) in mean.iter_mut().zip(u.iter()) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= utts.len() as f64);
            for u in utts {
                let c: Vec<f64> = u.iter().zip(mean.iter()).map(|(a, b)| a - b).collect();
                within_scatter.add_outer(1.0, &c);
            }
            speakers.push(SpeakerStats {
                count: utts.len(),
                mean,
            });
        }
        Stats {
            dim: d,
            speakers,
            within_scatter,
            total: data.n_utterances(),
        }
    }
}

/// Mean and covariances of the two-covariance model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PldaParams {
    pub mu: Vector,
    pub between: Matrix,
    pub within: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    pub params: PldaParams,
    pub preprocessing: Preprocessing,
}

impl PldaModel {
    pub fn new(params: PldaParams, preprocessing: Preprocessing) -> Result<Self> {
        let d = params.mu.dim();
        if params.between.shape() != (d, d) || params.within.shape() != (d, d) {
            return shape_err(format!(
                "PLDA covariances {:?}/{:?} vs mean dim {d}",
                params.between.shape(),
                params.within.shape()
            ));
        }
        if preprocessing.dim() != d {
            return shape_err(format!(
                "preprocessing dim {} vs model dim {d}",
                preprocessing.dim()
            ));
        }
        Ok(PldaModel {
            params,
            preprocessing,
        })
    }

    pub fn dim(&self) -> usize {
        self.params.mu.dim()
    }

    pub fn scorer(&self) -> Result<PldaScorer> {
        PldaScorer::new(&self.params)
    }
}

/// Adds `ε·I` with `ε = 1e-6·trace(W)/d` until `W` factors.
pub fn floor_within(w: &Matrix) -> Result<(Matrix, Cholesky)> {
    let mut w = w.symmetrized();
    let d = w.rows().max(1) as f64;
    let eps = {
        let t = FLOOR_FRACTION * w.trace() / d;
        if t > 0.0 && t.is_finite() {
            t
        } else {
            FLOOR_FRACTION
        }
    };
    for attempt in 0..60 {
        match Cholesky::factor(&w) {
            Ok(c) => return Ok((w, c)),
            Err(Error::NotPositiveDefinite { .. }) => {
                log::warn!("within-speaker covariance not positive definite; flooring with {eps:e}·I (attempt {attempt})");
                w.add_diag(eps * f64::from(1u32 << attempt.min(30)));
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::NotPositiveDefinite {
        pivot: 0,
        value: f64::NAN,
    })
}

/// Moment-based starting point.
///
/// `μ` is the mean of speaker means, `W` the pooled within-speaker
/// covariance and `B = Cov(ȳ) − α·mean(W/nᵢ)` with the largest `α ∈ [0, 1]`
/// (found by bisection) that keeps `B` positive definite.
pub fn init_params(data: &LabeledEmbeddingSet) -> Result<PldaParams> {
    let st = Stats::new(data);
    let d = st.dim;
    let s = st.speakers.len() as f64;
    let mut mu = Vector::zeros(d);
    for sp in &st.speakers {
        for (m, x) in mu.iter_mut().zip(sp.mean.iter()) {
            *m += x;
        }
    }
    mu.iter_mut().for_each(|m| *m /= s);

    let dof = (st.total - st.speakers.len()).max(1) as f64;
    let (within, _) = floor_within(&st.within_scatter.scale(1.0 / dof))?;

    let mut cov_means = Matrix::zeros(d, d);
    let mut inv_n = 0.0;
    for sp in &st.speakers {
        let c: Vec<f64> = sp.mean.iter().zip(mu.iter()).map(|(a, b)| a - b).collect();
        cov_means.add_outer(1.0 / s, &c);
        inv_n += 1.0 / (sp.count as f64 * s);
    }
    let ridge = FLOOR_FRACTION * within.trace() / d as f64;
    let candidate = |alpha: f64| {
        let mut b = cov_means
            .sub(&within.scale(alpha * inv_n))
            .expect("same shape");
        b.add_diag(ridge);
        b
    };
    let between = if Cholesky::factor(&candidate(1.0)).is_ok() {
        candidate(1.0)
    } else {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if Cholesky::factor(&candidate(mid)).is_ok() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        candidate(lo)
    };
    Ok(PldaParams {
        mu,
        between,
        within,
    })
}

/// Per-speaker posterior of the latent mean given `ȳ` and `n`:
/// `K = B (B + W/n)⁻¹`, `m̂ = μ + K(ȳ − μ)`, `C = B − K B`.
struct Posterior {
    mean: Vector,
    cov: Matrix,
}

fn posteriors(st: &Stats, p: &PldaParams) -> Result<Vec<Posterior>> {
    let mut gains: BTreeMap<usize, (Matrix, Matrix)> = BTreeMap::new();
    let mut out = Vec::with_capacity(st.speakers.len());
    for sp in &st.speakers {
        if !gains.contains_key(&sp.count) {
            let sn = p.between.add(&p.within.scale(1.0 / sp.count as f64))?;
            let inv = Cholesky::factor(&sn)?.inverse();
            let gain = p.between.matmul(&inv)?;
            let cov = p.between.sub(&gain.matmul(&p.between)?)?.symmetrized();
            gains.insert(sp.count, (gain, cov));
        }
        let (gain, cov) = &gains[&sp.count];
        let diff: Vec<f64> = sp
            .mean
            .iter()
            .zip(p.mu.iter())
            .map(|(a, b)| a - b)
            .collect();
        let shift = gain.matvec(&diff)?;
        let mean = Vector(p.mu.iter().zip(shift.iter()).map(|(a, b)| a + b).collect());
        out.push(Posterior {
            mean,
            cov: cov.clone(),
        });
    }
    Ok(out)
}

/// Exact marginal log-likelihood of the data under `p`.
pub fn log_likelihood(data: &LabeledEmbeddingSet, p: &PldaParams) -> Result<f64> {
    log_likelihood_stats(&Stats::new(data), p)
}

fn log_likelihood_stats(st: &Stats, p: &PldaParams) -> Result<f64> {
    let d = st.dim as f64;
    let w_chol = Cholesky::factor(&p.within)?;
    let w_inv = w_chol.inverse();
    let w_logdet = w_chol.log_det();
    let ln2pi = (2.0 * PI).ln();
    // tr(W⁻¹ S_within)
    let mut trace_term = 0.0;
    for i in 0..st.dim {
        for j in 0..st.dim {
            trace_term += w_inv[(i, j)] * st.within_scatter[(j, i)];
        }
    }
    let mut total = -0.5 * trace_term;
    let mut marg: BTreeMap<usize, Gaussian> = BTreeMap::new();
    for sp in &st.speakers {
        let n = sp.count as f64;
        total += -0.5 * (n - 1.0) * (d * ln2pi + w_logdet) - 0.5 * d * n.ln();
        if !marg.contains_key(&sp.count) {
            let cov = p.between.add(&p.within.scale(1.0 / n))?;
            marg.insert(sp.count, Gaussian::new(p.mu.clone(), &cov)?);
        }
        total += marg[&sp.count].log_pdf(&sp.mean)?;
    }
    Ok(total)
}

/// One EM iteration.
pub fn em_step(data: &LabeledEmbeddingSet, p: &PldaParams) -> Result<PldaParams> {
    em_step_stats(&Stats::new(data), p)
}

fn em_step_stats(st: &Stats, p: &PldaParams) -> Result<PldaParams> {
    let d = st.dim;
    let post = posteriors(st, p)?;
    let s = post.len() as f64;
    let mut mu = Vector::zeros(d);
    for q in &post {
        for (m, x) in mu.iter_mut().zip(q.mean.iter()) {
            *m += x;
        }
    }
    mu.iter_mut().for_each(|m| *m /= s);

    let mut between = Matrix::zeros(d, d);
    let mut within = st.within_scatter.clone();
    for (q, sp) in post.iter().zip(&st.speakers) {
        let n = sp.count as f64;
        let c: Vec<f64> = q.mean.iter().zip(mu.iter()).map(|(a, b)| a - b).collect();
        between.add_outer(1.0, &c);
        between = between.add(&q.cov)?;
        let r: Vec<f64> = sp
            .mean
            .iter()
            .zip(q.mean.iter())
            .map(|(a, b)| a - b)
            .collect();
        within.add_outer(n, &r);
        within = within.add(&q.cov.scale(n))?;
    }
    let between = between.scale(1.0 / s).symmetrized();
    let (within, _) = floor_within(&within.scale(1.0 / st.total as f64))?;
    Ok(PldaParams {
        mu,
        between,
        within,
    })
}

/// Runs EM from the moment-based start.
///
/// The returned history holds `iters + 1` log-likelihoods: the starting
/// point followed by the value after each iteration. The model carries an
/// identity preprocessing; see [`train_plda`] for the full recipe.
pub fn plda_train_em(data: &LabeledEmbeddingSet, iters: usize) -> Result<(PldaModel, Vec<f64>)> {
    let st = Stats::new(data);
    let mut p = init_params(data)?;
    let mut history = Vec::with_capacity(iters + 1);
    history.push(log_likelihood_stats(&st, &p)?);
    for it in 0..iters {
        p = em_step_stats(&st, &p)?;
        let ll = log_likelihood_stats(&st, &p)?;
        log::debug!("PLDA EM iteration {}: log-likelihood {ll:.6}", it + 1);
        history.push(ll);
    }
    let pre = Preprocessing::identity(data.dim());
    Ok((PldaModel::new(p, pre)?, history))
}

/// Fits preprocessing on the training embeddings, applies it, then runs EM.
pub fn train_plda(
    labeled: &[(String, Embedding)],
    center: bool,
    length_norm: bool,
    iters: usize,
) -> Result<(PldaModel, Vec<f64>)> {
    let pre = Preprocessing::fit(
        labeled.iter().map(|(_, e)| &e.vector[..]),
        center,
        length_norm,
    )?;
    let items = labeled
        .iter()
        .map(|(spk, e)| Ok((spk.clone(), pre.apply(&e.key, &e.vector)?)))
        .collect::<Result<Vec<_>>>()?;
    let data = LabeledEmbeddingSet::from_labeled(items)?;
    let (mut model, history) = plda_train_em(&data, iters)?;
    model.preprocessing = pre;
    Ok((model, history))
}

/// Factored same/different-speaker densities for fast repeated scoring.
#[derive(Debug, Clone)]
pub struct PldaScorer {
    mu: Vector,
    same: Gaussian,
    diff: Gaussian,
}

impl PldaScorer {
    pub fn new(p: &PldaParams) -> Result<Self> {
        let d = p.mu.dim();
        let total = p.between.add(&p.within)?;
        let mut same = Matrix::zeros(2 * d, 2 * d);
        let mut diff = Matrix::zeros(2 * d, 2 * d);
        for i in 0..d {
            for j in 0..d {
                same[(i, j)] = total[(i, j)];
                same[(d + i, d + j)] = total[(i, j)];
                same[(i, d + j)] = p.between[(i, j)];
                same[(d + i, j)] = p.between[(i, j)];
                diff[(i, j)] = total[(i, j)];
                diff[(d + i, d + j)] = total[(i, j)];
            }
        }
        let zero = Vector::zeros(2 * d);
        Ok(PldaScorer {
            mu: p.mu.clone(),
            same: Gaussian::new(zero.clone(), &same)?,
            diff: Gaussian::new(zero, &diff)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }

    /// Log-likelihood ratio for already preprocessed vectors.
    pub fn score(&self, enroll: &[f64], test: &[f64]) -> Result<f64> {
        let d = self.dim();
        if enroll.len() != d || test.len() != d {
            return shape_err(format!(
                "PLDA score dims ({}, {}) vs model {d}",
                enroll.len(),
                test.len()
            ));
        }
        let joint: Vec<f64> = enroll
            .iter()
            .chain(test)
            .zip(self.mu.iter().chain(self.mu.iter()))
            .map(|(x, m)| x - m)
            .collect();
        Ok(self.same.log_pdf(&joint)? - self.diff.log_pdf(&joint)?)
    }
}

pub fn plda_score(model: &PldaModel, enroll: &[f64], test: &[f64]) -> Result<f64> {
    model.scorer()?.score(enroll, test)
}

/// `eᵀt / (‖e‖·‖t‖)`.
pub fn cosine_score(e: &[f64], t: &[f64]) -> Result<f64> {
    if e.len() != t.len() {
        return shape_err(format!("cosine of dims {} and {}", e.len(), t.len()));
    }
    let ne = e.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nt = t.iter().map(|x| x * x).sum::<f64>().sqrt();
    if ne == 0.0 {
        return Err(Error::ZeroVector("enroll".into()));
    }
    if nt == 0.0 {
        return Err(Error::ZeroVector("test".into()));
    }
    let dot: f64 = e.iter().zip(t).map(|(a, b)| a * b).sum();
    Ok((dot / (ne * nt)).clamp(-1.0, 1.0))
}
