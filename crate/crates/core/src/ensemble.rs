//! Frozen + learnable network pair and the `2^M` decision paths through
//! their stages.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;

use crate::backbone::{
    final_representation, run_stage, split_into_submodules, BoundNetwork, ModelHyper,
    NetworkParams, Stage, SubModuleBoundary,
};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Owner {
    Frozen,
    Learnable,
}

impl Owner {
    pub fn label(self) -> &'static str {
        match self {
            Owner::Frozen => "frz",
            Owner::Learnable => "lrn",
        }
    }
}

/// One owner per stage.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Path(pub Vec<Owner>);

impl Path {
    pub fn uniform(owner: Owner, m: usize) -> Self {
        Path(vec![owner; m])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_all(&self, owner: Owner) -> bool {
        self.0.iter().all(|&o| o == owner)
    }

    /// `frz-lrn-…` style label.
    pub fn label(&self) -> String {
        self.0
            .iter()
            .map(|o| o.label())
            .collect::<Vec<_>>()
            .join("-")
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// All `2^m` paths in lexicographic order, frozen before learnable.
pub fn enumerate_paths(m: usize) -> Vec<Path> {
    (0..1usize << m)
        .map(|code| {
            Path(
                (0..m)
                    .map(|i| {
                        if code >> (m - 1 - i) & 1 == 1 {
                            Owner::Learnable
                        } else {
                            Owner::Frozen
                        }
                    })
                    .collect(),
            )
        })
        .collect()
}

impl SubModuleBoundary {
    /// The whole network as one stage.
    pub fn monolithic(layers: usize) -> Self {
        SubModuleBoundary {
            stages: vec![Stage {
                embedding: true,
                layers: 0..layers,
            }],
        }
    }
}

fn same_architecture(a: &ModelHyper, b: &ModelHyper) -> bool {
    a.num_items == b.num_items
        && a.max_len == b.max_len
        && a.dim == b.dim
        && a.layers == b.layers
        && a.heads == b.heads
        && a.ff_dim == b.ff_dim
}

#[derive(Clone, Debug)]
pub struct EnsembleState<S: Scalar = f32> {
    pub frozen: NetworkParams<S>,
    pub learnable: NetworkParams<S>,
    pub boundary: SubModuleBoundary,
}

impl<S: Scalar> EnsembleState<S> {
    /// Pairs two networks of the same architecture, split into `m` stages
    /// (`m = 1` keeps each network whole).
    pub fn new(frozen: NetworkParams<S>, learnable: NetworkParams<S>, m: usize) -> Result<Self> {
        if !same_architecture(&frozen.hyper, &learnable.hyper) {
            return Err(Error::Config(format!(
                "frozen network {:?} differs from learnable {:?}",
                frozen.hyper, learnable.hyper
            )));
        }
        let boundary = if m == 1 {
            SubModuleBoundary::monolithic(frozen.hyper.layers)
        } else {
            split_into_submodules(frozen.hyper.layers, m)?
        };
        Ok(Self {
            frozen,
            learnable,
            boundary,
        })
    }

    pub fn m(&self) -> usize {
        self.boundary.count()
    }

    pub fn paths(&self) -> Vec<Path> {
        enumerate_paths(self.m())
    }

    /// Frozen tensors go on as constants; learnable ones as parameters when
    /// `trainable`.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> BoundEnsemble {
        BoundEnsemble {
            frozen: self.frozen.bind(tape, false),
            learnable: self.learnable.bind(tape, trainable),
            boundary: self.boundary.clone(),
        }
    }

    /// Every path's final representation, computed off-tape.
    pub fn represent_all<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<(Path, Tensor<S>)>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let bundle = forward_all(&mut tape, &bound, batch, training, rng)?;
        Ok(bundle
            .paths
            .into_iter()
            .zip(bundle.reps)
            .map(|(p, v)| (p, tape.value(v).clone()))
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct BoundEnsemble {
    pub frozen: BoundNetwork,
    pub learnable: BoundNetwork,
    pub boundary: SubModuleBoundary,
}

impl BoundEnsemble {
    fn network(&self, owner: Owner) -> &BoundNetwork {
        match owner {
            Owner::Frozen => &self.frozen,
            Owner::Learnable => &self.learnable,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn execute<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    ens: &BoundEnsemble,
    stage: &Stage,
    owner: Owner,
    input: Option<Var>,
    batch: &Batch,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    // Frozen stages always run in evaluation mode.
    let training = training && owner == Owner::Learnable;
    run_stage(tape, ens.network(owner), stage, input, batch, training, rng)
}

/// Final representation along one path, with no sharing.
pub fn forward_path<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    ens: &BoundEnsemble,
    path: &Path,
    batch: &Batch,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if path.len() != ens.boundary.count() {
        return Err(Error::Contract(format!(
            "path of length {} for {} stages",
            path.len(),
            ens.boundary.count()
        )));
    }
    let mut x = None;
    for (stage, &owner) in ens.boundary.stages.iter().zip(&path.0) {
        x = Some(execute(tape, ens, stage, owner, x, batch, training, rng)?);
    }
    final_representation(
        tape,
        x.expect("at least one stage"),
        batch.len(),
        batch.max_len,
    )
}

/// Final representations of a set of paths.
#[derive(Clone, Debug)]
pub struct RepresentationBundle {
    pub paths: Vec<Path>,
    pub reps: Vec<Var>,
    /// Stage executions actually performed to build the bundle.
    pub stage_executions: usize,
}

impl RepresentationBundle {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn get(&self, path: &Path) -> Option<Var> {
        self.paths
            .iter()
            .position(|p| p == path)
            .map(|i| self.reps[i])
    }

    pub fn all_learnable(&self) -> Option<Var> {
        self.paths
            .iter()
            .position(|p| p.is_all(Owner::Learnable))
            .map(|i| self.reps[i])
    }
}

/// Runs `paths`, executing each (stage, owner, input) combination once.
pub fn forward_paths<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    ens: &BoundEnsemble,
    paths: &[Path],
    batch: &Batch,
    training: bool,
    rng: &mut R,
) -> Result<RepresentationBundle> {
    let m = ens.boundary.count();
    let mut cache: HashMap<(usize, Owner, Option<usize>), Var> = HashMap::new();
    let mut reps = Vec::with_capacity(paths.len());
    for path in paths {
        if path.len() != m {
            return Err(Error::Contract(format!(
                "path of length {} for {m} stages",
                path.len()
            )));
        }
        let mut x: Option<Var> = None;
        for (i, (stage, &owner)) in ens.boundary.stages.iter().zip(&path.0).enumerate() {
            let key = (i, owner, x.map(Var::index));
            let out = match cache.get(&key) {
                Some(&v) => v,
                None => {
                    let v = execute(tape, ens, stage, owner, x, batch, training, rng)?;
                    cache.insert(key, v);
                    v
                }
            };
            x = Some(out);
        }
        reps.push(final_representation(
            tape,
            x.expect("at least one stage"),
            batch.len(),
            batch.max_len,
        )?);
    }
    Ok(RepresentationBundle {
        paths: paths.to_vec(),
        reps,
        stage_executions: cache.len(),
    })
}

/// All `2^M` paths with shared stage executions.
pub fn forward_all<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    ens: &BoundEnsemble,
    batch: &Batch,
    training: bool,
    rng: &mut R,
) -> Result<RepresentationBundle> {
    let paths = enumerate_paths(ens.boundary.count());
    forward_paths(tape, ens, &paths, batch, training, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{embed, encode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn state(layers: usize, m: usize, seed: u64) -> (EnsembleState<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hyper = ModelHyper::new(12, 6, 4, layers, 2, 0.3);
        let f = NetworkParams::init(&hyper, &mut rng).unwrap();
        let l = NetworkParams::init(&hyper, &mut rng).unwrap();
        (EnsembleState::new(f, l, m).unwrap(), rng)
    }

    fn batch() -> Batch {
        Batch::from_histories(
            &[vec![1, 2, 3], vec![4, 5, 6, 7, 8], vec![9]],
            &[4, 9, 1],
            6,
        )
        .unwrap()
    }

    #[test]
    fn enumeration() {
        assert_eq!(
            enumerate_paths(1),
            vec![Path(vec![Owner::Frozen]), Path(vec![Owner::Learnable])]
        );
        for m in 1..=4 {
            let paths = enumerate_paths(m);
            assert_eq!(paths.len(), 1 << m);
            assert_eq!(paths.iter().collect::<HashSet<_>>().len(), 1 << m);
            assert!(paths.windows(2).all(|w| w[0] < w[1]));
            assert!(paths[0].is_all(Owner::Frozen));
            assert!(paths.last().unwrap().is_all(Owner::Learnable));
        }
        assert_eq!(enumerate_paths(2)[1].label(), "frz-lrn");
    }

    #[test]
    fn rejects_mismatched_networks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a =
            NetworkParams::<f64>::init(&ModelHyper::new(12, 6, 4, 1, 2, 0.0), &mut rng).unwrap();
        let b =
            NetworkParams::<f64>::init(&ModelHyper::new(12, 6, 8, 1, 2, 0.0), &mut rng).unwrap();
        assert!(matches!(EnsembleState::new(a, b, 2), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_paths_match_monolithic_networks() {
        for (layers, m) in [(2, 1), (2, 2), (2, 3), (3, 3)] {
            let (st, mut rng) = state(layers, m, 5);
            let b = batch();
            let frz = st.frozen.represent(&b, false, &mut rng).unwrap();
            let lrn = st.learnable.represent(&b, false, &mut rng).unwrap();
            let reps = st.represent_all(&b, false, &mut rng).unwrap();
            assert!(reps[0].1.bits_eq(&frz));
            assert!(reps.last().unwrap().1.bits_eq(&lrn));
        }
    }

    #[test]
    fn cache_matches_per_path_recomputation() {
        for m in 1..=3 {
            let (st, mut rng) = state(2, m, 9);
            let b = batch();
            let mut tape = Tape::new();
            let bound = st.bind(&mut tape, true);
            let bundle = forward_all(&mut tape, &bound, &b, false, &mut rng).unwrap();
            assert_eq!(bundle.len(), 1 << m);
            assert_eq!(bundle.stage_executions, (1 << (m + 1)) - 2);
            for (p, &v) in bundle.paths.iter().zip(&bundle.reps) {
                let naive = forward_path(&mut tape, &bound, p, &b, false, &mut rng).unwrap();
                assert!(tape.value(naive).bits_eq(tape.value(v)), "path {p}");
            }
        }
    }

    #[test]
    fn mixed_path_matches_two_stage_oracle() {
        let (st, mut rng) = state(2, 2, 13);
        let b = batch();
        // Frozen embedding fed to the learnable encoder by hand.
        let mut tape = Tape::new();
        let frz = st.frozen.bind(&mut tape, false);
        let lrn = st.learnable.bind(&mut tape, false);
        let e = embed(&mut tape, &frz, &b, false, &mut rng).unwrap();
        let h = encode(&mut tape, &lrn, e, &b, false, &mut rng).unwrap();
        let expected = tape.value(h).clone();
        let reps = st.represent_all(&b, false, &mut rng).unwrap();
        let got = &reps[1];
        assert_eq!(got.0.label(), "frz-lrn");
        for r in 0..3 {
            let last = expected.row(r * 6 + 5);
            for (x, y) in got.1.row(r).iter().zip(last) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batch_rows_identical_across_batch_sizes() {
        let (st, mut rng) = state(2, 3, 21);
        let one = Batch::from_histories(&[vec![1, 2, 3]], &[4], 6).unwrap();
        let two = Batch::from_histories(&[vec![1, 2, 3], vec![7, 7]], &[4, 1], 6).unwrap();
        let a = st.represent_all(&one, false, &mut rng).unwrap();
        let b = st.represent_all(&two, false, &mut rng).unwrap();
        for ((_, x), (_, y)) in a.iter().zip(&b) {
            assert_eq!(x.row(0), y.row(0));
        }
    }

    #[test]
    fn frozen_network_receives_no_gradient() {
        let (st, mut rng) = state(2, 2, 3);
        let b = batch();
        let mut tape = Tape::new();
        let bound = st.bind(&mut tape, true);
        let bundle = forward_all(&mut tape, &bound, &b, true, &mut rng).unwrap();
        let terms: Vec<_> = bundle.reps.iter().map(|&v| (tape.sum(v), 1.0)).collect();
        let loss = tape.weighted_sum(&terms).unwrap();
        tape.backward(loss).unwrap();
        for v in bound.frozen.vars() {
            assert!(tape.grad(v).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
        }
        assert!(bound
            .learnable
            .vars()
            .iter()
            .any(|&v| tape.grad(v).is_some()));
    }

    #[test]
    fn frozen_stages_ignore_training_mode() {
        let (st, mut rng) = state(2, 2, 4);
        let b = batch();
        let eval = st.represent_all(&b, false, &mut rng).unwrap();
        let train = st.represent_all(&b, true, &mut rng).unwrap();
        assert!(eval[0].1.bits_eq(&train[0].1));
        assert!(!eval[3].1.bits_eq(&train[3].1));
    }
}
