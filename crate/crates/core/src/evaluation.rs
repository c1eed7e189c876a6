//! Full-ranking next-item evaluation, HR/NDCG and exclusive-hit ratios.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::NetworkParams;
use crate::data::{eval_batches, Batch, SequenceDataset, Split};
use crate::ensemble::{EnsembleState, Owner, Path};
use crate::error::{Error, Result};
use crate::numerics::{softmax, Scalar, Tensor};

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];
/// Cutoff used for hit sets and PER.
pub const PER_K: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub batch_size: usize,
    /// Push already-seen items (other than the target) to the bottom.
    pub mask_history: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            batch_size: 256,
            mask_history: false,
        }
    }
}

/// `h · I[1..]ᵀ`: one column per real item.
pub fn raw_scores<S: Scalar>(h: &Tensor<S>, item_table: &Tensor<S>) -> Result<Tensor<S>> {
    let d = item_table.cols();
    if h.shape().len() != 2 || h.cols() != d || item_table.rows() < 2 {
        return Err(Error::shape(
            "raw_scores",
            format!("{:?} against table {:?}", h.shape(), item_table.shape()),
        ));
    }
    let (b, n) = (h.rows(), item_table.rows() - 1);
    let mut out = Tensor::zeros(&[b, n]);
    S::gemm(
        b,
        d,
        n,
        S::one(),
        h.data(),
        (d as isize, 1),
        &item_table.data()[d..],
        (1, d as isize),
        S::zero(),
        out.data_mut(),
        (n as isize, 1),
    );
    Ok(out)
}

/// Softmax probabilities over all real items.
pub fn score_all_items<S: Scalar>(h: &Tensor<S>, item_table: &Tensor<S>) -> Result<Tensor<S>> {
    softmax(&raw_scores(h, item_table)?, 1)
}

/// 1-based rank of `target` (an item id) among `scores` (index `i` is item
/// `i + 1`); ties go to the smaller id.
pub fn rank_of_target<S: Scalar>(scores: &[S], target: u32) -> usize {
    let t = target as usize - 1;
    let s = scores[t];
    let above = scores
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x > s || (x == s && i < t))
        .count();
    1 + above
}

pub fn hr_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn ndcg_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks
        .iter()
        .map(|&r| {
            if r <= k {
                1.0 / ((r + 1) as f64).log2()
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / ranks.len() as f64
}

/// Users whose target ranks within the top K.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HitSet(pub BTreeSet<usize>);

impl HitSet {
    pub fn from_ranks(users: &[usize], ranks: &[usize], k: usize) -> Self {
        HitSet(
            users
                .iter()
                .zip(ranks)
                .filter(|&(_, &r)| r <= k)
                .map(|(&u, _)| u)
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `|Hi − Hj| / |Hi|`; `None` when `Hi` is empty.
pub fn per(hi: &HitSet, hj: &HitSet) -> Option<f64> {
    if hi.is_empty() {
        return None;
    }
    Some(hi.0.difference(&hj.0).count() as f64 / hi.len() as f64)
}

/// `m[i][j] = per(hits[i], hits[j])`.
pub fn per_matrix(hits: &[HitSet]) -> Vec<Vec<Option<f64>>> {
    hits.iter()
        .map(|hi| hits.iter().map(|hj| per(hi, hj)).collect())
        .collect()
}

/// Square CSV with a label header row and column; undefined cells are `NA`.
pub fn per_matrix_csv(labels: &[String], m: &[Vec<Option<f64>>]) -> String {
    let mut out = String::from("source");
    for l in labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (l, row) in labels.iter().zip(m) {
        out.push_str(l);
        for v in row {
            match v {
                Some(x) => write!(out, ",{x}").expect("string write"),
                None => out.push_str(",NA"),
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub ks: Vec<usize>,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
    /// Dataset user index per evaluated row.
    pub users: Vec<usize>,
    pub ranks: Vec<usize>,
}

impl MetricReport {
    pub fn from_ranks(users: Vec<usize>, ranks: Vec<usize>, ks: &[usize]) -> Self {
        Self {
            ks: ks.to_vec(),
            hr: ks.iter().map(|&k| hr_at_k(&ranks, k)).collect(),
            ndcg: ks.iter().map(|&k| ndcg_at_k(&ranks, k)).collect(),
            users,
            ranks,
        }
    }

    pub fn count(&self) -> usize {
        self.ranks.len()
    }

    pub fn hr(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.hr[i])
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }

    pub fn hits(&self, k: usize) -> HitSet {
        HitSet::from_ranks(&self.users, &self.ranks, k)
    }

    /// `metric,k,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,k,value\n");
        for (i, k) in self.ks.iter().enumerate() {
            writeln!(out, "HR,{k},{}", self.hr[i]).expect("string write");
        }
        for (i, k) in self.ks.iter().enumerate() {
            writeln!(out, "NDCG,{k},{}", self.ndcg[i]).expect("string write");
        }
        out
    }
}

fn check_options(opts: &EvalOptions) -> Result<()> {
    if opts.ks.is_empty() || opts.ks.contains(&0) {
        return Err(Error::Config(format!("invalid cutoffs {:?}", opts.ks)));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("evaluation batch size 0".into()));
    }
    Ok(())
}

fn rank_batch<S: Scalar>(
    scores: &mut Tensor<S>,
    batch: &Batch,
    dataset: &SequenceDataset,
    split: Split,
    mask_history: bool,
) -> Vec<usize> {
    (0..batch.len())
        .map(|r| {
            let target = batch.targets[r];
            let row = scores.row_mut(r);
            if mask_history {
                let (history, _) = dataset.example(batch.users[r], split);
                for i in history {
                    if i != target {
                        row[i as usize - 1] = S::neg_infinity();
                    }
                }
            }
            rank_of_target(row, target)
        })
        .collect()
}

/// Single-network inference over every user of `split`.
pub fn evaluate_network<S: Scalar>(
    net: &NetworkParams<S>,
    dataset: &SequenceDataset,
    split: Split,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    check_options(opts)?;
    if split == Split::Train {
        return Err(Error::Contract(
            "evaluation needs the valid or test split".into(),
        ));
    }
    // Evaluation mode draws no randomness; the generator only satisfies the signature.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut users, mut ranks) = (Vec::new(), Vec::new());
    for batch in eval_batches(dataset, split, opts.batch_size)? {
        let h = net.represent(&batch, false, &mut rng)?;
        let mut scores = raw_scores(&h, &net.item_table)?;
        scores.check_finite("item scores")?;
        ranks.extend(rank_batch(
            &mut scores,
            &batch,
            dataset,
            split,
            opts.mask_history,
        ));
        users.extend_from_slice(&batch.users);
    }
    Ok(MetricReport::from_ranks(users, ranks, &opts.ks))
}

/// Per-path reports plus the PER matrix at K = 20.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEvaluation {
    pub paths: Vec<Path>,
    pub reports: Vec<MetricReport>,
    pub per: Vec<Vec<Option<f64>>>,
}

impl PathEvaluation {
    pub fn labels(&self) -> Vec<String> {
        self.paths.iter().map(Path::label).collect()
    }

    pub fn per_csv(&self) -> String {
        per_matrix_csv(&self.labels(), &self.per)
    }
}

/// Every decision path evaluated as its own recommender. A path scores
/// against the item table of the network that owns its embedding stage.
pub fn evaluate_paths<S: Scalar>(
    state: &EnsembleState<S>,
    dataset: &SequenceDataset,
    split: Split,
    opts: &EvalOptions,
) -> Result<PathEvaluation> {
    check_options(opts)?;
    let paths = state.paths();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut users = Vec::new();
    let mut ranks: Vec<Vec<usize>> = vec![Vec::new(); paths.len()];
    for batch in eval_batches(dataset, split, opts.batch_size)? {
        let reps = state.represent_all(&batch, false, &mut rng)?;
        for (i, (path, h)) in reps.iter().enumerate() {
            let table = match path.0[0] {
                Owner::Frozen => &state.frozen.item_table,
                Owner::Learnable => &state.learnable.item_table,
            };
            let mut scores = raw_scores(h, table)?;
            scores.check_finite("item scores")?;
            ranks[i].extend(rank_batch(
                &mut scores,
                &batch,
                dataset,
                split,
                opts.mask_history,
            ));
        }
        users.extend_from_slice(&batch.users);
    }
    let reports: Vec<MetricReport> = ranks
        .into_iter()
        .map(|r| MetricReport::from_ranks(users.clone(), r, &opts.ks))
        .collect();
    let hits: Vec<HitSet> = reports.iter().map(|r| r.hits(PER_K)).collect();
    Ok(PathEvaluation {
        paths,
        per: per_matrix(&hits),
        reports,
    })
}

/// PER between two single-network reports at K = 20, both directions.
pub fn per_between(a: &MetricReport, b: &MetricReport) -> (Option<f64>, Option<f64>) {
    let (ha, hb) = (a.hits(PER_K), b.hits(PER_K));
    (per(&ha, &hb), per(&hb, &ha))
}

/// Ranks every user's target by training-set item popularity.
pub fn popularity_report(
    dataset: &SequenceDataset,
    split: Split,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    check_options(opts)?;
    let counts: Vec<f64> = dataset
        .train_item_counts()
        .into_iter()
        .map(|c| c as f64)
        .collect();
    let (mut users, mut ranks) = (Vec::new(), Vec::new());
    for batch in eval_batches(dataset, split, opts.batch_size)? {
        let mut scores =
            Tensor::from_fn(&[batch.len(), counts.len()], |i| counts[i % counts.len()]);
        ranks.extend(rank_batch(
            &mut scores,
            &batch,
            dataset,
            split,
            opts.mask_history,
        ));
        users.extend_from_slice(&batch.users);
    }
    Ok(MetricReport::from_ranks(users, ranks, &opts.ks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelHyper;
    use crate::data::UserSplit;
    use proptest::prelude::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of_target(&[0.5f64, 0.9, 0.1], 1), 2);
        assert_eq!(rank_of_target(&[0.5f64, 0.9, 0.1], 2), 1);
        assert_eq!(rank_of_target(&[1.0f64; 5], 1), 1);
        assert_eq!(rank_of_target(&[1.0f64; 5], 4), 4);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(hr_at_k(&[1, 1, 1], 5), 1.0);
        assert_eq!(ndcg_at_k(&[1, 1, 1], 5), 1.0);
        assert_eq!(hr_at_k(&[3], 5), 1.0);
        assert_eq!(ndcg_at_k(&[3], 5), 0.5);
        assert_eq!(hr_at_k(&[6], 5), 0.0);
        assert_eq!(ndcg_at_k(&[6], 5), 0.0);
    }

    #[test]
    fn per_examples() {
        let h = |v: &[usize]| HitSet(v.iter().copied().collect());
        assert_eq!(per(&h(&[1, 2]), &h(&[1, 2])), Some(0.0));
        assert_eq!(per(&h(&[1, 2]), &h(&[3])), Some(1.0));
        assert_eq!(per(&h(&[1, 2, 3, 4]), &h(&[3, 4, 5])), Some(0.5));
        assert_eq!(per(&h(&[3, 4, 5]), &h(&[1, 2, 3, 4])), Some(1.0 / 3.0));
        assert_eq!(per(&h(&[]), &h(&[1])), None);
        let m = per_matrix(&[h(&[1]), h(&[]), h(&[1, 2])]);
        assert_eq!(m[0][0], Some(0.0));
        assert_eq!(m[1][1], None);
        let csv = per_matrix_csv(&["a".into(), "b".into(), "c".into()], &m);
        assert_eq!(csv.lines().nth(2).unwrap(), "b,NA,NA,NA");
    }

    #[test]
    fn scoring_examples() {
        let table = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
        ])
        .unwrap();
        let p = score_all_items(&Tensor::<f64>::zeros(&[1, 2]), &table).unwrap();
        assert!(p.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let h = Tensor::from_rows(&[vec![0.0, 1.0], vec![3.0, -2.0]]).unwrap();
        let s = raw_scores(&h, &table).unwrap();
        assert_eq!(s.data(), &[0.0, 1.0, 0.0, 3.0, -2.0, -3.0]);
        assert_eq!(rank_of_target(s.row(0), 2), 1);
        let p = score_all_items(&h, &table).unwrap();
        for r in 0..2 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            // monotone transform keeps every rank
            for t in 1..=3 {
                assert_eq!(rank_of_target(p.row(r), t), rank_of_target(s.row(r), t));
            }
        }
    }

    fn toy_dataset() -> SequenceDataset {
        let users = vec![
            UserSplit {
                train: vec![1, 2, 3],
                valid: 4,
                test: 5,
            },
            UserSplit {
                train: vec![2, 3, 4],
                valid: 5,
                test: 6,
            },
            UserSplit {
                train: vec![6, 5],
                valid: 4,
                test: 3,
            },
        ];
        SequenceDataset::new(
            (0..3).map(|u| format!("u{u}")).collect(),
            (1..=6).map(|i| format!("i{i}")).collect(),
            users,
            4,
        )
        .unwrap()
    }

    #[test]
    fn three_user_model_matches_brute_force() {
        let ds = toy_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net =
            NetworkParams::<f64>::init(&ModelHyper::new(6, 4, 4, 1, 2, 0.0), &mut rng).unwrap();
        for split in [Split::Valid, Split::Test] {
            let opts = EvalOptions {
                batch_size: 2,
                ..Default::default()
            };
            let report = evaluate_network(&net, &ds, split, &opts).unwrap();
            for u in 0..3 {
                let (history, target) = ds.example(u, split);
                let b = Batch::from_histories(&[history], &[target], 4).unwrap();
                let h = net.represent(&b, false, &mut rng).unwrap();
                // sort ids by (score desc, id asc) and find the target
                let mut ids: Vec<(f64, u32)> = (1..=6u32)
                    .map(|i| {
                        let row = net.item_table.row(i as usize);
                        (h.row(0).iter().zip(row).map(|(a, b)| a * b).sum(), i)
                    })
                    .collect();
                ids.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                let rank = ids.iter().position(|&(_, i)| i == target).unwrap() + 1;
                assert_eq!(report.ranks[u], rank);
            }
            assert_eq!(report.users, vec![0, 1, 2]);
            let hr = report.hr.clone();
            assert!(hr[0] <= hr[1] && hr[1] <= hr[2]);
        }
    }

    #[test]
    fn mask_history_never_worsens_rank() {
        let ds = toy_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net =
            NetworkParams::<f32>::init(&ModelHyper::new(6, 4, 4, 1, 2, 0.0), &mut rng).unwrap();
        let plain = evaluate_network(&net, &ds, Split::Test, &EvalOptions::default()).unwrap();
        let masked = evaluate_network(
            &net,
            &ds,
            Split::Test,
            &EvalOptions {
                mask_history: true,
                ..Default::default()
            },
        )
        .unwrap();
        for (a, b) in plain.ranks.iter().zip(&masked.ranks) {
            assert!(b <= a);
        }
    }

    #[test]
    fn popularity_ranks_by_training_counts() {
        let ds = toy_dataset();
        // counts: 1:1 2:2 3:2 4:1 5:1 6:1
        let r = popularity_report(&ds, Split::Valid, &EvalOptions::default()).unwrap();
        assert_eq!(r.ranks, vec![4, 5, 4]);
    }

    #[test]
    fn path_evaluation_shapes() {
        let ds = toy_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hyper = ModelHyper::new(6, 4, 4, 2, 2, 0.0);
        let f = NetworkParams::<f32>::init(&hyper, &mut rng).unwrap();
        let l = NetworkParams::<f32>::init(&hyper, &mut rng).unwrap();
        let st = EnsembleState::new(f.clone(), l.clone(), 3).unwrap();
        let ev = evaluate_paths(&st, &ds, Split::Test, &EvalOptions::default()).unwrap();
        assert_eq!(ev.reports.len(), 8);
        assert_eq!(ev.per.len(), 8);
        for i in 0..8 {
            assert!(ev.per[i][i].is_none_or(|x| x == 0.0));
        }
        let opts = EvalOptions::default();
        assert_eq!(
            ev.reports[0],
            evaluate_network(&f, &ds, Split::Test, &opts).unwrap()
        );
        assert_eq!(
            ev.reports[7],
            evaluate_network(&l, &ds, Split::Test, &opts).unwrap()
        );
        assert_eq!(ev.per_csv().lines().count(), 9);
    }

    proptest! {
        #[test]
        fn partition_consistency(ranks in prop::collection::vec(1usize..30, 1..40), cut in 0usize..40) {
            let cut = cut.min(ranks.len());
            let (a, b) = ranks.split_at(cut);
            for k in [5, 10, 20] {
                let whole = hr_at_k(&ranks, k) * ranks.len() as f64;
                let parts = hr_at_k(a, k) * a.len() as f64 + hr_at_k(b, k) * b.len() as f64;
                prop_assert!((whole - parts).abs() < 1e-9);
                let whole = ndcg_at_k(&ranks, k) * ranks.len() as f64;
                let parts = ndcg_at_k(a, k) * a.len() as f64 + ndcg_at_k(b, k) * b.len() as f64;
                prop_assert!((whole - parts).abs() < 1e-9);
            }
        }

        #[test]
        fn metrics_bounded_and_monotone(ranks in prop::collection::vec(1usize..50, 1..40)) {
            let r = MetricReport::from_ranks((0..ranks.len()).collect(), ranks, &DEFAULT_KS);
            prop_assert!(r.hr[0] <= r.hr[1] && r.hr[1] <= r.hr[2]);
            for v in r.hr.iter().chain(&r.ndcg) {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }

        #[test]
        fn rank_invariant_under_increasing_transform(scores in prop::collection::vec(-5.0f64..5.0, 1..20), t in 0usize..20) {
            let t = (t % scores.len()) as u32 + 1;
            let mapped: Vec<f64> = scores.iter().map(|x| 3.0 * x.exp() + 1.0).collect();
            prop_assert_eq!(rank_of_target(&scores, t), rank_of_target(&mapped, t));
        }
    }
}
