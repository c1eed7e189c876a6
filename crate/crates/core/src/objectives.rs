//! Training losses: next-item cross entropy, pairwise NCE between path
//! representations, similarity-weighted alignment and the λ schedule.

use crate::backbone::score_items;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// How the alignment pairs are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    Uniform,
    Similarity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub weighting: Weighting,
    /// L2-normalize representations before the dot products.
    pub normalize: bool,
}

impl ContrastiveConfig {
    pub fn new(tau: f64, weighting: Weighting) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("temperature {tau} must be positive")));
        }
        Ok(Self {
            tau,
            weighting,
            normalize: false,
        })
    }
}

/// Mean negative log-likelihood of `targets` under a full softmax over the
/// real items of `item_table`.
pub fn rec_loss<S: Scalar>(
    tape: &mut Tape<S>,
    h: Var,
    item_table: Var,
    targets: &[u32],
) -> Result<Var> {
    if targets.contains(&0) {
        return Err(Error::Contract("padding id used as a target".into()));
    }
    let scores = score_items(tape, h, item_table)?;
    let t: Vec<Option<usize>> = targets.iter().map(|&g| Some(g as usize - 1)).collect();
    tape.cross_entropy(scores, &t)
}

fn nce_direction<S: Scalar>(tape: &mut Tape<S>, hp: Var, hq: Var, tau: f64) -> Result<Var> {
    let b = tape.value(hp).rows();
    let logits = tape.matmul(hp, hq, true)?;
    let logits = tape.scale(logits, S::from_f64_lossy(1.0 / tau));
    let diag: Vec<Option<usize>> = (0..b).map(Some).collect();
    tape.cross_entropy(logits, &diag)
}

/// In-batch NCE between two views of the same users, averaged over both
/// directions.
pub fn nce_loss<S: Scalar>(tape: &mut Tape<S>, hp: Var, hq: Var, tau: f64) -> Result<Var> {
    let (sp, sq) = (tape.value(hp).shape(), tape.value(hq).shape());
    if sp != sq || sp.len() != 2 {
        return Err(Error::shape("nce_loss", format!("{sp:?} vs {sq:?}")));
    }
    if sp[0] < 2 {
        return Err(Error::Contract(format!(
            "in-batch negatives need at least 2 users, got {}",
            sp[0]
        )));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let pq = nce_direction(tape, hp, hq, tau)?;
    let qp = nce_direction(tape, hq, hp, tau)?;
    let half = S::from_f64_lossy(0.5);
    tape.weighted_sum(&[(pq, half), (qp, half)])
}

/// Unordered index pairs `(i, j)`, `i < j`, in lexicographic order.
pub fn unordered_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect()
}

/// Batch mean of per-row dot products.
pub fn pair_similarity<S: Scalar>(hp: &Tensor<S>, hq: &Tensor<S>) -> Result<f64> {
    if hp.shape() != hq.shape() || hp.shape().len() != 2 {
        return Err(Error::shape(
            "pair_similarity",
            format!("{:?} vs {:?}", hp.shape(), hq.shape()),
        ));
    }
    let b = hp.rows();
    if b == 0 {
        return Err(Error::EmptyDataset);
    }
    let total: f64 = (0..b)
        .map(|u| {
            hp.row(u)
                .iter()
                .zip(hq.row(u))
                .map(|(x, y)| x.as_f64() * y.as_f64())
                .sum::<f64>()
        })
        .sum();
    Ok(total / b as f64)
}

/// Softmax of negated similarities.
pub fn pair_weights(sims: &[f64]) -> Result<Vec<f64>> {
    if sims.is_empty() {
        return Err(Error::Contract("no pairs to weight".into()));
    }
    if let Some(bad) = sims.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("pair similarity {bad}")));
    }
    let neg_max = sims.iter().map(|s| -s).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = sims.iter().map(|s| (-s - neg_max).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairWeightTable {
    pub pairs: Vec<(usize, usize)>,
    pub sims: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PairWeightTable {
    /// Weights for the representations currently held on `tape`.
    pub fn compute<S: Scalar>(
        tape: &Tape<S>,
        reps: &[Var],
        weighting: Weighting,
        normalize: bool,
    ) -> Result<Self> {
        if reps.len() < 2 {
            return Err(Error::Contract(format!(
                "{} representations, need at least 2",
                reps.len()
            )));
        }
        let pairs = unordered_pairs(reps.len());
        let values: Vec<Tensor<S>> = reps
            .iter()
            .map(|&v| {
                let t = tape.value(v);
                if normalize {
                    normalized(t)
                } else {
                    t.clone()
                }
            })
            .collect();
        let sims = pairs
            .iter()
            .map(|&(i, j)| pair_similarity(&values[i], &values[j]))
            .collect::<Result<Vec<_>>>()?;
        let weights = match weighting {
            Weighting::Similarity => pair_weights(&sims)?,
            Weighting::Uniform => vec![1.0 / pairs.len() as f64; pairs.len()],
        };
        Ok(Self {
            pairs,
            sims,
            weights,
        })
    }
}

fn normalized<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let mut out = t.clone();
    let eps = S::from_f64_lossy(crate::numerics::LOG_EPS);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|&x| x * x).sum::<S>().sqrt().max(eps);
        row.iter_mut().for_each(|x| *x = *x / n);
    }
    out
}

/// `Σ w_pq · nce(p, q)` with the weights held constant.
pub fn mkt_loss_with_weights<S: Scalar>(
    tape: &mut Tape<S>,
    reps: &[Var],
    table: &PairWeightTable,
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    if table.pairs.len() != table.weights.len() {
        return Err(Error::Contract("pair table length mismatch".into()));
    }
    let views: Vec<Var> = if cfg.normalize {
        reps.iter().map(|&v| tape.normalize_rows(v)).collect()
    } else {
        reps.to_vec()
    };
    let mut terms = Vec::with_capacity(table.pairs.len());
    for (&(i, j), &w) in table.pairs.iter().zip(&table.weights) {
        let (p, q) = (
            *views
                .get(i)
                .ok_or_else(|| Error::Index(format!("path {i}")))?,
            *views
                .get(j)
                .ok_or_else(|| Error::Index(format!("path {j}")))?,
        );
        terms.push((nce_loss(tape, p, q, cfg.tau)?, S::from_f64_lossy(w)));
    }
    tape.weighted_sum(&terms)
}

/// Weighted pairwise NCE over every pair of path representations.
pub fn mkt_loss<S: Scalar>(
    tape: &mut Tape<S>,
    reps: &[Var],
    cfg: &ContrastiveConfig,
) -> Result<(Var, PairWeightTable)> {
    let table = PairWeightTable::compute(tape, reps, cfg.weighting, cfg.normalize)?;
    let loss = mkt_loss_with_weights(tape, reps, &table, cfg)?;
    Ok((loss, table))
}

/// Unweighted sum of pairwise NCE.
pub fn cl_loss<S: Scalar>(tape: &mut Tape<S>, reps: &[Var], tau: f64) -> Result<Var> {
    if reps.len() < 2 {
        return Err(Error::Contract(format!(
            "{} representations, need at least 2",
            reps.len()
        )));
    }
    let mut terms = Vec::new();
    for (i, j) in unordered_pairs(reps.len()) {
        terms.push((nce_loss(tape, reps[i], reps[j], tau)?, S::one()));
    }
    tape.weighted_sum(&terms)
}

/// Pairwise transfer among whole networks (no path mixing).
pub fn conventional_mkt<S: Scalar>(tape: &mut Tape<S>, reps: &[Var], tau: f64) -> Result<Var> {
    if reps.len() < 2 {
        return Err(Error::Config(format!(
            "mutual transfer needs at least 2 networks, got {}",
            reps.len()
        )));
    }
    cl_loss(tape, reps, tau)
}

/// `rec + λ·mkt`; without an alignment term this is `rec` itself.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    rec: Var,
    mkt: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Config(format!("negative weight {lambda}")));
    }
    match mkt {
        None => Ok(rec),
        Some(m) => tape.weighted_sum(&[(rec, S::one()), (m, S::from_f64_lossy(lambda))]),
    }
}

/// Geometric decay of λ from `lambda0` to `lambda_r` over `epochs`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub lambda0: f64,
    pub lambda_r: f64,
    pub epochs: usize,
}

impl AnnealSchedule {
    /// Both endpoints positive, or both zero (alignment disabled).
    pub fn new(lambda0: f64, lambda_r: f64, epochs: usize) -> Result<Self> {
        let both_zero = lambda0 == 0.0 && lambda_r == 0.0;
        let both_positive = lambda0 > 0.0 && lambda_r > 0.0;
        if !(both_zero || both_positive) || !lambda0.is_finite() || !lambda_r.is_finite() {
            return Err(Error::Config(format!(
                "λ endpoints {lambda0}, {lambda_r} must both be positive or both zero"
            )));
        }
        if epochs == 0 {
            return Err(Error::Config("annealing horizon must be at least 1".into()));
        }
        Ok(Self {
            lambda0,
            lambda_r,
            epochs,
        })
    }

    pub fn is_disabled(&self) -> bool {
        self.lambda0 == 0.0
    }

    /// λ at epoch `r`; `r ≥ epochs` clamps to `lambda_r`.
    pub fn at(&self, r: f64) -> f64 {
        if r <= 0.0 || self.lambda0 == self.lambda_r {
            return self.lambda0;
        }
        let big_r = self.epochs as f64;
        if r >= big_r {
            return self.lambda_r;
        }
        self.lambda0 * (self.lambda_r / self.lambda0).powf(r / big_r)
    }
}

/// λ(r) for a schedule.
pub fn anneal(r: f64, sched: &AnnealSchedule) -> f64 {
    sched.at(r)
}
