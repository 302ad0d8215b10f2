//! Linear-chain CRF over `K` labels: forward algorithm, forward–backward
//! marginals, the negative log-likelihood as a tape op, and Viterbi.

use metapico_core::tape::logsumexp_slice;
use metapico_core::{Error, Real, Result, Tape, Tensor, Var};

use crate::scheme::TagScheme;

/// Transition, start and end scores. `transitions[i * k + j]` scores label `j` after label `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transitions<T> {
    pub k: usize,
    pub transitions: Vec<T>,
    pub start: Vec<T>,
    pub end: Vec<T>,
}

impl<T: Real> Transitions<T> {
    pub fn zeros(k: usize) -> Self {
        Self { k, transitions: vec![T::zero(); k * k], start: vec![T::zero(); k], end: vec![T::zero(); k] }
    }

    pub fn new(k: usize, transitions: Vec<T>, start: Vec<T>, end: Vec<T>) -> Result<Self> {
        let t = Self { k, transitions, start, end };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k;
        if k == 0 || self.transitions.len() != k * k || self.start.len() != k || self.end.len() != k {
            return Err(Error::Shape(format!(
                "transition scores for K={k}: got {} transitions, {} start, {} end",
                self.transitions.len(),
                self.start.len(),
                self.end.len()
            )));
        }
        if self.transitions.iter().chain(&self.start).chain(&self.end).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite CRF score".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn trans(&self, i: usize, j: usize) -> T {
        self.transitions[i * self.k + j]
    }

    pub fn cast<U: Real>(&self) -> Transitions<U> {
        let c = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect();
        Transitions { k: self.k, transitions: c(&self.transitions), start: c(&self.start), end: c(&self.end) }
    }
}

/// Emission projection plus chain scores of one tagging head.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfParams<T> {
    /// `d_model × K`.
    pub emission: Tensor<T>,
    pub chain: Transitions<T>,
}

fn check_emissions<T: Real>(em: &Tensor<T>, k: usize) -> Result<usize> {
    match em.shape() {
        [t, kk] if *t >= 1 && *kk == k => Ok(*t),
        s => Err(Error::Shape(format!("emissions must be [T ≥ 1, {k}], got {s:?}"))),
    }
}

fn check_labels(labels: &[usize], len: usize, k: usize) -> Result<()> {
    if labels.len() != len {
        return Err(Error::Shape(format!("{} labels for {len} positions", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Index(format!("label {bad} outside 0..{k}")));
    }
    Ok(())
}

/// `start[y₁] + Σ emissions[t][y_t] + Σ transitions[y_{t−1}][y_t] + end[y_T]`.
pub fn path_score<T: Real>(em: &Tensor<T>, chain: &Transitions<T>, labels: &[usize]) -> Result<T> {
    let len = check_emissions(em, chain.k)?;
    check_labels(labels, len, chain.k)?;
    let mut s = chain.start[labels[0]] + chain.end[labels[len - 1]];
    for (t, &y) in labels.iter().enumerate() {
        s += em.row(t)[y];
        if t > 0 {
            s += chain.trans(labels[t - 1], y);
        }
    }
    Ok(s)
}

/// Forward log-potentials `α[t][j]`, flattened `T × K`.
fn forward<T: Real>(em: &Tensor<T>, chain: &Transitions<T>) -> Vec<T> {
    let (len, k) = (em.shape()[0], chain.k);
    let mut alpha = vec![T::zero(); len * k];
    for j in 0..k {
        alpha[j] = chain.start[j] + em.row(0)[j];
    }
    let mut buf = vec![T::zero(); k];
    for t in 1..len {
        for j in 0..k {
            for i in 0..k {
                buf[i] = alpha[(t - 1) * k + i] + chain.trans(i, j);
            }
            alpha[t * k + j] = logsumexp_slice(&buf) + em.row(t)[j];
        }
    }
    alpha
}

fn backward_potentials<T: Real>(em: &Tensor<T>, chain: &Transitions<T>) -> Vec<T> {
    let (len, k) = (em.shape()[0], chain.k);
    let mut beta = vec![T::zero(); len * k];
    beta[(len - 1) * k..].copy_from_slice(&chain.end);
    let mut buf = vec![T::zero(); k];
    for t in (0..len - 1).rev() {
        for i in 0..k {
            for j in 0..k {
                buf[j] = chain.trans(i, j) + em.row(t + 1)[j] + beta[(t + 1) * k + j];
            }
            beta[t * k + i] = logsumexp_slice(&buf);
        }
    }
    beta
}

fn log_z_from_alpha<T: Real>(alpha: &[T], chain: &Transitions<T>, len: usize) -> T {
    let k = chain.k;
    let last: Vec<T> = (0..k).map(|j| alpha[(len - 1) * k + j] + chain.end[j]).collect();
    logsumexp_slice(&last)
}

/// Log of the summed exponentiated score over all `K^T` label paths.
pub fn log_partition<T: Real>(em: &Tensor<T>, chain: &Transitions<T>) -> Result<T> {
    let len = check_emissions(em, chain.k)?;
    chain.validate()?;
    Ok(log_z_from_alpha(&forward(em, chain), chain, len))
}

/// Posterior label probabilities from forward–backward.
#[derive(Clone, Debug)]
pub struct Posteriors<T> {
    pub log_z: T,
    /// `P(y_t = j)`, flattened `T × K`.
    pub unary: Vec<T>,
    /// `P(y_{t−1} = i, y_t = j)` for `t ≥ 1`, flattened `(T−1) × K × K`.
    pub pairwise: Vec<T>,
}

pub fn posteriors<T: Real>(em: &Tensor<T>, chain: &Transitions<T>) -> Result<Posteriors<T>> {
    let len = check_emissions(em, chain.k)?;
    chain.validate()?;
    let k = chain.k;
    let alpha = forward(em, chain);
    let beta = backward_potentials(em, chain);
    let log_z = log_z_from_alpha(&alpha, chain, len);
    let unary = (0..len * k).map(|i| (alpha[i] + beta[i] - log_z).exp()).collect();
    let mut pairwise = Vec::with_capacity((len - 1) * k * k);
    for t in 1..len {
        for i in 0..k {
            for j in 0..k {
                let s = alpha[(t - 1) * k + i] + chain.trans(i, j) + em.row(t)[j] + beta[t * k + j];
                pairwise.push((s - log_z).exp());
            }
        }
    }
    Ok(Posteriors { log_z, unary, pairwise })
}

/// Per-position marginals `[T × K]`; each row sums to one.
pub fn marginals<T: Real>(em: &Tensor<T>, chain: &Transitions<T>) -> Result<Tensor<T>> {
    let p = posteriors(em, chain)?;
    Tensor::new(vec![em.shape()[0], chain.k], p.unary)
}

/// `log_partition − path_score(gold)` on the tape, differentiable with
/// respect to the emissions `[T × K]`, transitions `[K × K]`, start `[K]`
/// and end `[K]`.
pub fn crf_nll<T: Real>(
    tape: &mut Tape<T>,
    em: Var,
    transitions: Var,
    start: Var,
    end: Var,
    gold: &[usize],
) -> Result<Var> {
    let k = match tape.shape(start) {
        [k] => *k,
        s => return Err(Error::Shape(format!("start scores must be a vector, got {s:?}"))),
    };
    if tape.shape(transitions) != [k, k] || tape.shape(end) != [k] {
        return Err(Error::Shape(format!(
            "transitions {:?} and end {:?} do not match K={k}",
            tape.shape(transitions),
            tape.shape(end)
        )));
    }
    let emissions = tape.tensor(em);
    let len = check_emissions(&emissions, k)?;
    check_labels(gold, len, k)?;
    let chain = Transitions {
        k,
        transitions: tape.value(transitions).to_vec(),
        start: tape.value(start).to_vec(),
        end: tape.value(end).to_vec(),
    };
    let post = posteriors(&emissions, &chain)?;
    let nll = post.log_z - path_score(&emissions, &chain, gold)?;

    // Expected minus observed feature counts.
    let mut g_em = post.unary.clone();
    for (t, &y) in gold.iter().enumerate() {
        g_em[t * k + y] -= T::one();
    }
    let mut g_tr = vec![T::zero(); k * k];
    for t in 1..len {
        for (a, &p) in g_tr.iter_mut().zip(&post.pairwise[(t - 1) * k * k..t * k * k]) {
            *a += p;
        }
        g_tr[gold[t - 1] * k + gold[t]] -= T::one();
    }
    let mut g_start = post.unary[..k].to_vec();
    g_start[gold[0]] -= T::one();
    let mut g_end = post.unary[(len - 1) * k..].to_vec();
    g_end[gold[len - 1]] -= T::one();

    let grads = [g_em, g_tr, g_start, g_end];
    Ok(tape.custom(&[em, transitions, start, end], Tensor::scalar(nll), move |up| {
        grads.iter().map(|g| g.iter().map(|&v| v * up[0]).collect()).collect()
    }))
}

/// Highest-scoring label path. Among equal scores the lowest label index
/// wins, both for the final label and at every backtrack step. With a
/// scheme, transitions that violate IOB2 (including a sentence-initial
/// `I-X`) are excluded.
pub fn viterbi_decode<T: Real>(
    em: &Tensor<T>,
    chain: &Transitions<T>,
    constraint: Option<&TagScheme>,
) -> Result<Vec<usize>> {
    let len = check_emissions(em, chain.k)?;
    chain.validate()?;
    let k = chain.k;
    if let Some(s) = constraint {
        if s.len() != k {
            return Err(Error::Config(format!("tag scheme of {} labels for a {k}-label CRF", s.len())));
        }
    }
    let allowed = |prev: Option<usize>, next: usize| constraint.is_none_or(|s| s.allowed(prev, next));
    let ninf = T::neg_infinity();
    let mut delta: Vec<T> =
        (0..k).map(|j| if allowed(None, j) { chain.start[j] + em.row(0)[j] } else { ninf }).collect();
    let mut back = vec![0usize; len * k];
    for t in 1..len {
        let mut next = vec![ninf; k];
        for j in 0..k {
            let mut best = ninf;
            let mut arg = 0;
            for i in 0..k {
                if !allowed(Some(i), j) {
                    continue;
                }
                let s = delta[i] + chain.trans(i, j);
                if s > best {
                    best = s;
                    arg = i;
                }
            }
            next[j] = best + em.row(t)[j];
            back[t * k + j] = arg;
        }
        delta = next;
    }
    let mut best = ninf;
    let mut last = 0;
    for j in 0..k {
        let s = delta[j] + chain.end[j];
        if s > best {
            best = s;
            last = j;
        }
    }
    let mut path = vec![last; len];
    for t in (1..len).rev() {
        path[t - 1] = back[t * k + path[t]];
    }
    Ok(path)
}
