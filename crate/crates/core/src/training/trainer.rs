//! Epoch loops for every training mode.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{embed, encode, final_representation, BoundNetwork, NetworkParams};
use crate::data::{make_batches, Batch, SequenceDataset};
use crate::ensemble::{forward_paths, BoundEnsemble, EnsembleState, Owner, Path};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_network, EvalOptions, MetricReport, DEFAULT_KS};
use crate::numerics::{Scalar, Tape, Var};
use crate::objectives::{
    conventional_mkt, mkt_loss, mkt_loss_with_weights, rec_loss, total_loss, ContrastiveConfig,
    PairWeightTable,
};
use crate::training::adam::Adam;
use crate::training::checkpoint::{Checkpoint, CheckpointMeta};
use crate::training::config::{Mode, TrainConfig};

/// Independent generators for initialization, batch order and dropout.
#[derive(Clone, Debug)]
pub struct RngStreams {
    pub init: ChaCha8Rng,
    pub shuffle: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            init: stream(0),
            shuffle: stream(1),
            dropout: stream(2),
        }
    }

    pub fn words(&self) -> [u128; 3] {
        [
            self.init.get_word_pos(),
            self.shuffle.get_word_pos(),
            self.dropout.get_word_pos(),
        ]
    }
}

/// Validation HR and NDCG at 5, 10 and 20.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ValMetrics {
    pub hr: [f64; 3],
    pub ndcg: [f64; 3],
}

impl ValMetrics {
    fn from_report(r: &MetricReport) -> Self {
        let mut m = ValMetrics::default();
        for (i, &k) in DEFAULT_KS.iter().enumerate() {
            m.hr[i] = r.hr(k).unwrap_or(0.0);
            m.ndcg[i] = r.ndcg(k).unwrap_or(0.0);
        }
        m
    }

    pub fn ndcg20(&self) -> f64 {
        self.ndcg[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lambda: f64,
    pub train_loss: f64,
    pub rec_loss: f64,
    pub mkt_loss: f64,
    pub val: ValMetrics,
    pub wall_seconds: f64,
    /// Second network's validation metrics in the two-network baselines.
    pub partner: Option<ValMetrics>,
}

const METRIC_COLUMNS: &str = "val_HR@5,val_HR@10,val_HR@20,val_NDCG@5,val_NDCG@10,val_NDCG@20";

fn push_metrics(out: &mut String, m: &ValMetrics) {
    for v in m.hr.iter().chain(&m.ndcg) {
        write!(out, ",{v}").expect("string write");
    }
}

pub fn trace_header() -> String {
    format!("epoch,lambda,train_loss,rec_loss,mkt_loss,{METRIC_COLUMNS},wall_seconds")
}

pub fn trace_row(r: &EpochRecord) -> String {
    let mut s = format!(
        "{},{},{},{},{}",
        r.epoch, r.lambda, r.train_loss, r.rec_loss, r.mkt_loss
    );
    push_metrics(&mut s, &r.val);
    write!(s, ",{}", r.wall_seconds).expect("string write");
    s
}

/// Per-epoch metrics CSV for the trained network.
pub fn trace_csv(records: &[EpochRecord]) -> String {
    let mut out = trace_header();
    out.push('\n');
    for r in records {
        out.push_str(&trace_row(r));
        out.push('\n');
    }
    out
}

/// Per-epoch validation metrics of the partner network, if any.
pub fn partner_trace_csv(records: &[EpochRecord]) -> Option<String> {
    if records.iter().all(|r| r.partner.is_none()) {
        return None;
    }
    let mut out = format!("epoch,{METRIC_COLUMNS}\n");
    for r in records {
        write!(out, "{}", r.epoch).expect("string write");
        push_metrics(&mut out, &r.partner.unwrap_or_default());
        out.push('\n');
    }
    Some(out)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub mode: Mode,
    /// Learnable network at its best validation epoch.
    pub best: Checkpoint,
    /// Learnable network after the last epoch run.
    pub last: NetworkParams<f32>,
    /// Second trained network (ensemble from scratch) at the best epoch.
    pub partner: Option<NetworkParams<f32>>,
    pub trace: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_epoch(&self) -> usize {
        self.best.meta.epoch as usize
    }

    pub fn best_val(&self) -> ValMetrics {
        self.trace[self.best_epoch() - 1].val
    }
}

/// Loss terms of one batch.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub rec: Var,
    pub mkt: Option<Var>,
    pub weights: Option<PairWeightTable>,
}

/// Paths whose representations a flame step needs: only the learnable
/// network when alignment is off, so no dropout is drawn for mixed paths.
pub fn flame_paths(m: usize, lambda: f64) -> Vec<Path> {
    if lambda == 0.0 {
        vec![Path::uniform(Owner::Learnable, m)]
    } else {
        crate::ensemble::enumerate_paths(m)
    }
}

/// `rec + λ·mkt` for one batch over the ensemble. `weights` pins the pair
/// weights instead of computing them from the batch.
#[allow(clippy::too_many_arguments)]
pub fn flame_batch_loss<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    ens: &BoundEnsemble,
    batch: &Batch,
    lambda: f64,
    contrastive: &ContrastiveConfig,
    weights: Option<&PairWeightTable>,
    training: bool,
    rng: &mut R,
) -> Result<BatchLoss> {
    let paths = flame_paths(ens.boundary.count(), lambda);
    let bundle = forward_paths(tape, ens, &paths, batch, training, rng)?;
    let h = bundle.all_learnable().expect("all-learnable path present");
    let rec = rec_loss(tape, h, ens.learnable.item_table, &batch.targets)?;
    let (mkt, weights) = if lambda > 0.0 && batch.len() >= 2 {
        let (m, w) = match weights {
            Some(w) => (
                mkt_loss_with_weights(tape, &bundle.reps, w, contrastive)?,
                w.clone(),
            ),
            None => mkt_loss(tape, &bundle.reps, contrastive)?,
        };
        (Some(m), Some(w))
    } else {
        (None, None)
    };
    let total = total_loss(tape, rec, mkt, lambda)?;
    Ok(BatchLoss {
        total,
        rec,
        mkt,
        weights,
    })
}

fn network_rep<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    net: &BoundNetwork,
    batch: &Batch,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let e = embed(tape, net, batch, training, rng)?;
    let h = encode(tape, net, e, batch, training, rng)?;
    final_representation(tape, h, batch.len(), batch.max_len)
}

fn adam_for(net: &NetworkParams<f32>, lr: f64) -> Adam<f32> {
    Adam::for_tensors(&net.tensors(), lr)
}

fn apply_grads(
    opt: &mut Adam<f32>,
    net: &mut NetworkParams<f32>,
    tape: &Tape<f32>,
    bound: &BoundNetwork,
) -> Result<()> {
    let grads: Vec<Option<&[f32]>> = bound.vars().into_iter().map(|v| tape.grad(v)).collect();
    let mut skip = vec![0; grads.len()];
    skip[0] = net.hyper.dim;
    opt.apply(net.tensors_mut(), &grads, &skip)
}

fn scalar(tape: &Tape<f32>, v: Var) -> Result<f64> {
    Ok(tape.value(v).item()? as f64)
}

struct StepLosses {
    total: f64,
    rec: f64,
    mkt: f64,
}

/// Mutable training state shared by the epoch loop.
struct Learners {
    mode: Mode,
    /// Pretrained frozen network (guide and flame).
    frozen: Option<NetworkParams<f32>>,
    main: NetworkParams<f32>,
    main_opt: Adam<f32>,
    /// Second learnable network (ensemble from scratch).
    second: Option<(NetworkParams<f32>, Adam<f32>)>,
    submodules: usize,
    contrastive: ContrastiveConfig,
}

impl Learners {
    fn step(&mut self, batch: &Batch, lambda: f64, rng: &mut ChaCha8Rng) -> Result<StepLosses> {
        let mut tape = Tape::<f32>::new();
        let loss = match self.mode {
            Mode::Single => {
                let bound = self.main.bind(&mut tape, true);
                let h = network_rep(&mut tape, &bound, batch, true, rng)?;
                let rec = rec_loss(&mut tape, h, bound.item_table, &batch.targets)?;
                tape.backward(rec)?;
                apply_grads(&mut self.main_opt, &mut self.main, &tape, &bound)?;
                BatchLoss {
                    total: rec,
                    rec,
                    mkt: None,
                    weights: None,
                }
            }
            Mode::Flame => {
                let frozen = self.frozen.as_ref().expect("flame has a frozen network");
                let ens = EnsembleState::new(frozen.clone(), self.main.clone(), self.submodules)?;
                let bound = ens.bind(&mut tape, true);
                let loss = flame_batch_loss(
                    &mut tape,
                    &bound,
                    batch,
                    lambda,
                    &self.contrastive,
                    None,
                    true,
                    rng,
                )?;
                tape.backward(loss.total)?;
                apply_grads(&mut self.main_opt, &mut self.main, &tape, &bound.learnable)?;
                loss
            }
            Mode::EnsembleGuide => {
                let frozen = self.frozen.as_ref().expect("guide has a frozen network");
                let fb = frozen.bind(&mut tape, false);
                let lb = self.main.bind(&mut tape, true);
                let hf = network_rep(&mut tape, &fb, batch, false, rng)?;
                let hl = network_rep(&mut tape, &lb, batch, true, rng)?;
                let rec = rec_loss(&mut tape, hl, lb.item_table, &batch.targets)?;
                let mkt = if lambda > 0.0 && batch.len() >= 2 {
                    Some(conventional_mkt(
                        &mut tape,
                        &[hf, hl],
                        self.contrastive.tau,
                    )?)
                } else {
                    None
                };
                let total = total_loss(&mut tape, rec, mkt, lambda)?;
                tape.backward(total)?;
                apply_grads(&mut self.main_opt, &mut self.main, &tape, &lb)?;
                BatchLoss {
                    total,
                    rec,
                    mkt,
                    weights: None,
                }
            }
            Mode::EnsembleScratch => {
                let (second, second_opt) = self.second.as_mut().expect("scratch has two networks");
                let ab = self.main.bind(&mut tape, true);
                let bb = second.bind(&mut tape, true);
                let ha = network_rep(&mut tape, &ab, batch, true, rng)?;
                let hb = network_rep(&mut tape, &bb, batch, true, rng)?;
                let ra = rec_loss(&mut tape, ha, ab.item_table, &batch.targets)?;
                let rb = rec_loss(&mut tape, hb, bb.item_table, &batch.targets)?;
                let rec = tape.weighted_sum(&[(ra, 1.0), (rb, 1.0)])?;
                let mkt = if lambda > 0.0 && batch.len() >= 2 {
                    Some(conventional_mkt(
                        &mut tape,
                        &[ha, hb],
                        self.contrastive.tau,
                    )?)
                } else {
                    None
                };
                let total = total_loss(&mut tape, rec, mkt, lambda)?;
                tape.backward(total)?;
                apply_grads(&mut self.main_opt, &mut self.main, &tape, &ab)?;
                apply_grads(second_opt, second, &tape, &bb)?;
                BatchLoss {
                    total,
                    rec,
                    mkt,
                    weights: None,
                }
            }
        };
        Ok(StepLosses {
            total: scalar(&tape, loss.total)?,
            rec: scalar(&tape, loss.rec)?,
            mkt: loss
                .mkt
                .map(|m| scalar(&tape, m))
                .transpose()?
                .unwrap_or(0.0),
        })
    }

    fn partner(&self) -> Option<&NetworkParams<f32>> {
        match self.mode {
            Mode::EnsembleScratch => self.second.as_ref().map(|(n, _)| n),
            Mode::EnsembleGuide => self.frozen.as_ref(),
            _ => None,
        }
    }
}

fn check_frozen(cfg: &TrainConfig, dataset: &SequenceDataset, frozen: &Checkpoint) -> Result<()> {
    let expected = cfg.model_hyper(dataset.num_items());
    frozen.check_compatible(&expected)?;
    let h = frozen.hyper();
    if (h.num_items, h.max_len, h.heads) != (expected.num_items, expected.max_len, expected.heads) {
        return Err(Error::Config(format!(
            "frozen checkpoint {h:?} does not match configured model {expected:?}"
        )));
    }
    Ok(())
}

/// Validation NDCG@20, epoch, learnable network, partner and RNG positions
/// at the best epoch so far.
type BestSoFar = (
    f64,
    usize,
    NetworkParams<f32>,
    Option<NetworkParams<f32>>,
    [u128; 3],
);

/// Runs `cfg.mode` to completion with early stopping on validation NDCG@20,
/// calling `on_epoch` after every epoch.
pub fn train_observed(
    cfg: &TrainConfig,
    dataset: &SequenceDataset,
    frozen: Option<&Checkpoint>,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.num_users() == 0 {
        return Err(Error::EmptyDataset);
    }
    if dataset.max_len() != cfg.max_len {
        return Err(Error::Config(format!(
            "dataset windows are {} long, config says max_len = {}",
            dataset.max_len(),
            cfg.max_len
        )));
    }
    let frozen = match (cfg.mode.needs_frozen(), frozen) {
        (true, Some(f)) => {
            check_frozen(cfg, dataset, f)?;
            Some(f.params.clone())
        }
        (true, None) => {
            return Err(Error::Config(format!(
                "mode {} needs a frozen checkpoint",
                cfg.mode
            )))
        }
        (false, _) => None,
    };
    let hyper = cfg.model_hyper(dataset.num_items());
    let mut rngs = RngStreams::new(cfg.seed);
    let main = NetworkParams::<f32>::init(&hyper, &mut rngs.init)?;
    let second = if cfg.mode == Mode::EnsembleScratch {
        let n = NetworkParams::<f32>::init(&hyper, &mut rngs.init)?;
        let opt = adam_for(&n, cfg.lr);
        Some((n, opt))
    } else {
        None
    };
    let mut learners = Learners {
        mode: cfg.mode,
        frozen,
        main_opt: adam_for(&main, cfg.lr),
        main,
        second,
        submodules: cfg.submodules,
        contrastive: cfg.contrastive()?,
    };
    let schedule = cfg.schedule()?;
    let eval_opts = EvalOptions {
        ks: DEFAULT_KS.to_vec(),
        batch_size: cfg.eval_batch_size,
        mask_history: cfg.mask_history,
    };
    let contrastive_batches = cfg.mode != Mode::Single;
    let frozen_val = match (&learners.frozen, cfg.mode) {
        (Some(f), Mode::EnsembleGuide) => Some(ValMetrics::from_report(&evaluate_network(
            f,
            dataset,
            crate::data::Split::Valid,
            &eval_opts,
        )?)),
        _ => None,
    };

    let mut trace = Vec::new();
    let mut best: Option<BestSoFar> = None;
    let mut since_best = 0;
    for r in 0..cfg.epochs {
        let started = Instant::now();
        // A single network has no alignment term to weight.
        let lambda = if cfg.mode == Mode::Single {
            0.0
        } else {
            schedule.at(r as f64)
        };
        let order_seed = rngs.shuffle.next_u64();
        let batches = make_batches(
            dataset,
            cfg.batch_size,
            true,
            order_seed,
            contrastive_batches,
        )?;
        let (mut total, mut rec, mut mkt) = (0.0, 0.0, 0.0);
        for batch in &batches {
            let s = learners.step(batch, lambda, &mut rngs.dropout)?;
            total += s.total;
            rec += s.rec;
            mkt += s.mkt;
        }
        let n = batches.len() as f64;
        let val = ValMetrics::from_report(&evaluate_network(
            &learners.main,
            dataset,
            crate::data::Split::Valid,
            &eval_opts,
        )?);
        let partner = match cfg.mode {
            Mode::EnsembleGuide => frozen_val,
            Mode::EnsembleScratch => Some(ValMetrics::from_report(&evaluate_network(
                learners.partner().expect("second network"),
                dataset,
                crate::data::Split::Valid,
                &eval_opts,
            )?)),
            _ => None,
        };
        let record = EpochRecord {
            epoch: r + 1,
            lambda,
            train_loss: total / n,
            rec_loss: rec / n,
            mkt_loss: mkt / n,
            val,
            wall_seconds: started.elapsed().as_secs_f64(),
            partner,
        };
        if !record.train_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at epoch {}",
                r + 1
            )));
        }
        on_epoch(&record)?;
        trace.push(record);
        let improved = best.as_ref().is_none_or(|b| val.ndcg20() > b.0);
        if improved {
            let partner_params = match cfg.mode {
                Mode::EnsembleScratch => learners.partner().cloned(),
                _ => None,
            };
            best = Some((
                val.ndcg20(),
                r + 1,
                learners.main.clone(),
                partner_params,
                rngs.words(),
            ));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (score, epoch, params, partner, words) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        mode: cfg.mode,
        best: Checkpoint {
            params,
            meta: CheckpointMeta {
                epoch: epoch as u32,
                best_val_ndcg20: score,
                seed: cfg.seed,
                rng_words: words,
            },
        },
        last: learners.main,
        partner,
        trace,
    })
}

pub fn train(
    cfg: &TrainConfig,
    dataset: &SequenceDataset,
    frozen: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    train_observed(cfg, dataset, frozen, &mut |_| Ok(()))
}

/// Trains the network that later serves as the frozen anchor: a single
/// network under the recommendation loss alone.
pub fn pretrain_frozen(cfg: &TrainConfig, dataset: &SequenceDataset) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        mode: Mode::Single,
        ..cfg.clone()
    };
    train(&cfg, dataset, None)
}

pub fn train_flame(
    cfg: &TrainConfig,
    dataset: &SequenceDataset,
    frozen: &Checkpoint,
) -> Result<TrainOutcome> {
    if cfg.mode != Mode::Flame {
        return Err(Error::Config(format!(
            "train_flame called with mode {}",
            cfg.mode
        )));
    }
    train(cfg, dataset, Some(frozen))
}

pub fn train_baseline(
    cfg: &TrainConfig,
    dataset: &SequenceDataset,
    frozen: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    if cfg.mode == Mode::Flame {
        return Err(Error::Config("flame is not a baseline mode".into()));
    }
    train(cfg, dataset, frozen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_sequences;
    use crate::data::synthetic::MarkovConfig;

    fn toy() -> SequenceDataset {
        let cfg = MarkovConfig {
            num_items: 30,
            num_users: 40,
            min_len: 8,
            max_len: 12,
            ..Default::default()
        };
        build_sequences(&cfg.log(3), 5, 8).unwrap()
    }

    fn small(mode: Mode, epochs: usize) -> TrainConfig {
        TrainConfig {
            mode,
            dim: 8,
            layers: 2,
            heads: 2,
            max_len: 8,
            dropout: 0.2,
            batch_size: 16,
            epochs,
            patience: epochs,
            lr: 5e-3,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn streams_are_independent() {
        let mut a = RngStreams::new(1);
        let mut b = RngStreams::new(1);
        for _ in 0..5 {
            a.dropout.next_u64();
        }
        assert_eq!(a.shuffle.next_u64(), b.shuffle.next_u64());
        assert_ne!(a.init.next_u64(), a.shuffle.next_u64());
    }

    #[test]
    fn pretrain_smoke_and_determinism() {
        let ds = toy();
        let a = pretrain_frozen(&small(Mode::Single, 1), &ds).unwrap();
        assert_eq!(a.best.meta.epoch, 1);
        assert_eq!(a.trace.len(), 1);
        let b = pretrain_frozen(&small(Mode::Single, 1), &ds).unwrap();
        assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
    }

    #[test]
    fn loss_descends() {
        let ds = toy();
        let out = train(&small(Mode::Single, 5), &ds, None).unwrap();
        assert!(out.trace[4].train_loss < out.trace[0].train_loss);
    }

    #[test]
    fn flame_requires_frozen_and_freezes_it() {
        let ds = toy();
        let cfg = small(Mode::Flame, 3);
        assert!(matches!(train(&cfg, &ds, None), Err(Error::Config(_))));
        let frozen = pretrain_frozen(&cfg, &ds).unwrap().best;
        let before = frozen.to_bytes().unwrap();
        let out = train_flame(&cfg, &ds, &frozen).unwrap();
        assert_eq!(frozen.to_bytes().unwrap(), before);
        assert_eq!(out.trace[0].lambda, cfg.lambda0);
        assert_eq!(out.trace[2].lambda, cfg.lambda_r);
        assert!(out.trace.iter().all(|r| r.mkt_loss > 0.0));
    }

    #[test]
    fn frozen_shape_mismatch_is_config_error() {
        let ds = toy();
        let frozen = pretrain_frozen(&small(Mode::Single, 1), &ds).unwrap().best;
        let mut cfg = small(Mode::Flame, 1);
        cfg.dim = 16;
        assert!(matches!(
            train_flame(&cfg, &ds, &frozen),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn disabled_alignment_reduces_to_single() {
        let ds = toy();
        let single = train(&small(Mode::Single, 3), &ds, None).unwrap();
        let mut cfg = small(Mode::Flame, 3);
        cfg.lambda0 = 0.0;
        cfg.lambda_r = 0.0;
        let frozen = pretrain_frozen(&small(Mode::Single, 1), &ds).unwrap().best;
        let flame = train_flame(&cfg, &ds, &frozen).unwrap();
        for (a, b) in single.trace.iter().zip(&flame.trace) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val, b.val);
        }
        assert!(single.last.bits_eq(&flame.last));
    }

    #[test]
    fn baselines_log_partner_series() {
        let ds = toy();
        let scratch = train_baseline(&small(Mode::EnsembleScratch, 2), &ds, None).unwrap();
        assert!(scratch.trace.iter().all(|r| r.partner.is_some()));
        assert!(scratch.partner.is_some());
        let frozen = pretrain_frozen(&small(Mode::Single, 2), &ds).unwrap().best;
        let guide = train_baseline(&small(Mode::EnsembleGuide, 3), &ds, Some(&frozen)).unwrap();
        let first = guide.trace[0].partner.unwrap();
        assert!(guide.trace.iter().all(|r| r.partner == Some(first)));
        assert!(partner_trace_csv(&guide.trace).is_some());
        assert!(
            partner_trace_csv(&train(&small(Mode::Single, 1), &ds, None).unwrap().trace).is_none()
        );
    }

    #[test]
    fn early_stopping_returns_best_epoch() {
        let ds = toy();
        let mut cfg = small(Mode::Single, 30);
        cfg.patience = 2;
        cfg.lr = 0.2;
        let out = train(&cfg, &ds, None).unwrap();
        let best = out.best_epoch();
        assert!(out.trace.len() <= best + cfg.patience);
        let top = out
            .trace
            .iter()
            .map(|r| r.val.ndcg20())
            .fold(f64::MIN, f64::max);
        assert_eq!(out.best_val().ndcg20(), top);
        assert_eq!(out.best.meta.best_val_ndcg20, top);
    }

    #[test]
    fn csv_shape() {
        let ds = toy();
        let out = train(&small(Mode::Single, 2), &ds, None).unwrap();
        let csv = trace_csv(&out.trace);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].split(',').count(), 12);
        assert!(lines[1].starts_with("1,"));
    }
}
