//! Self-attentive sequence encoder: item + position embedding followed by
//! `L` post-norm causal Transformer layers, split into contiguous stages.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var, LAYER_NORM_EPS};

/// Architecture hyperparameters shared by the frozen and learnable networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelHyper {
    pub num_items: usize,
    pub max_len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl ModelHyper {
    pub fn new(
        num_items: usize,
        max_len: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        dropout: f64,
    ) -> Self {
        Self {
            num_items,
            max_len,
            dim,
            layers,
            heads,
            ff_dim: dim,
            dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_items == 0 || self.max_len == 0 || self.dim == 0 || self.ff_dim == 0 {
            return Err(Error::Config(format!("degenerate model size {self:?}")));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<S: Scalar = f32> {
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
    pub ln1_gain: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    pub ff1_w: Tensor<S>,
    pub ff1_b: Tensor<S>,
    pub ff2_w: Tensor<S>,
    pub ff2_b: Tensor<S>,
    pub ln2_gain: Tensor<S>,
    pub ln2_bias: Tensor<S>,
}

const LAYER_TENSORS: [&str; 16] = [
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln1.gain", "ln1.bias", "ff1.w", "ff1.b", "ff2.w", "ff2.b", "ln2.gain", "ln2.bias",
];

impl<S: Scalar> LayerParams<S> {
    fn tensors(&self) -> [&Tensor<S>; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ff1_w,
            &self.ff1_b,
            &self.ff2_w,
            &self.ff2_b,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<S>; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ff1_w,
            &mut self.ff1_b,
            &mut self.ff2_w,
            &mut self.ff2_b,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }

    fn shapes(h: &ModelHyper) -> [Vec<usize>; 16] {
        let (d, f) = (h.dim, h.ff_dim);
        [
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
            vec![d],
            vec![d],
        ]
    }
}

/// Parameters of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<S: Scalar = f32> {
    pub hyper: ModelHyper,
    /// `[num_items + 1, dim]`; row 0 is padding and stays zero.
    pub item_table: Tensor<S>,
    /// `[max_len, dim]`.
    pub position_table: Tensor<S>,
    pub layers: Vec<LayerParams<S>>,
}

fn xavier<S: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<S> {
    let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| S::from_f64_lossy(normal.sample(rng)))
}

impl<S: Scalar> NetworkParams<S> {
    /// Xavier-normal matrices, zero biases, unit layer-norm gains.
    pub fn init<R: Rng + ?Sized>(hyper: &ModelHyper, rng: &mut R) -> Result<Self> {
        hyper.validate()?;
        let mut item_table = xavier(&[hyper.num_items + 1, hyper.dim], rng);
        item_table.row_mut(0).fill(S::zero());
        let position_table = xavier(&[hyper.max_len, hyper.dim], rng);
        let layers = (0..hyper.layers)
            .map(|_| {
                let shapes = LayerParams::<S>::shapes(hyper);
                let mut make = |i: usize| -> Tensor<S> {
                    let shape = &shapes[i];
                    if shape.len() == 2 {
                        xavier(shape, rng)
                    } else if LAYER_TENSORS[i].ends_with("gain") {
                        Tensor::filled(shape, S::one())
                    } else {
                        Tensor::zeros(shape)
                    }
                };
                LayerParams {
                    wq: make(0),
                    bq: make(1),
                    wk: make(2),
                    bk: make(3),
                    wv: make(4),
                    bv: make(5),
                    wo: make(6),
                    bo: make(7),
                    ln1_gain: make(8),
                    ln1_bias: make(9),
                    ff1_w: make(10),
                    ff1_b: make(11),
                    ff2_w: make(12),
                    ff2_b: make(13),
                    ln2_gain: make(14),
                    ln2_bias: make(15),
                }
            })
            .collect();
        Ok(Self {
            hyper: hyper.clone(),
            item_table,
            position_table,
            layers,
        })
    }

    /// Tensor names in canonical order.
    pub fn names(hyper: &ModelHyper) -> Vec<String> {
        let mut names = vec!["item_table".to_string(), "position_table".to_string()];
        for l in 0..hyper.layers {
            names.extend(LAYER_TENSORS.iter().map(|t| format!("layers.{l}.{t}")));
        }
        names
    }

    /// Expected shapes in canonical order.
    pub fn shapes(hyper: &ModelHyper) -> Vec<Vec<usize>> {
        let mut shapes = vec![
            vec![hyper.num_items + 1, hyper.dim],
            vec![hyper.max_len, hyper.dim],
        ];
        for _ in 0..hyper.layers {
            shapes.extend(LayerParams::<S>::shapes(hyper));
        }
        shapes
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = vec![&self.item_table, &self.position_table];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.item_table, &mut self.position_table];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out
    }

    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        Self::names(&self.hyper)
            .into_iter()
            .zip(self.tensors())
            .collect()
    }

    /// Assembles a network from canonical-order tensors, checking every shape.
    pub fn from_tensors(hyper: &ModelHyper, tensors: Vec<(String, Tensor<S>)>) -> Result<Self> {
        hyper.validate()?;
        let names = Self::names(hyper);
        let shapes = Self::shapes(hyper);
        if tensors.len() != names.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, found {}",
                names.len(),
                tensors.len()
            )));
        }
        let mut net = Self::init_zeros(hyper);
        for (((name, t), (expected_name, shape)), slot) in tensors
            .into_iter()
            .zip(names.iter().zip(&shapes))
            .zip(net.tensors_mut())
        {
            if &name != expected_name {
                return Err(Error::Config(format!(
                    "expected tensor {expected_name}, found {name}"
                )));
            }
            if t.shape() != &shape[..] {
                return Err(Error::Config(format!(
                    "tensor {name}: shape {:?} does not match model shape {shape:?}",
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(net)
    }

    fn init_zeros(hyper: &ModelHyper) -> Self {
        let shapes = Self::shapes(hyper);
        let mut it = shapes.iter().map(|s| Tensor::zeros(s));
        let item_table = it.next().expect("item table");
        let position_table = it.next().expect("position table");
        let mut layers = Vec::new();
        for _ in 0..hyper.layers {
            let mut n = || it.next().expect("layer tensor");
            layers.push(LayerParams {
                wq: n(),
                bq: n(),
                wk: n(),
                bk: n(),
                wv: n(),
                bv: n(),
                wo: n(),
                bo: n(),
                ln1_gain: n(),
                ln1_bias: n(),
                ff1_w: n(),
                ff1_b: n(),
                ff2_w: n(),
                ff2_b: n(),
                ln2_gain: n(),
                ln2_bias: n(),
            });
        }
        Self {
            hyper: hyper.clone(),
            item_table,
            position_table,
            layers,
        }
    }

    pub fn cast<T: Scalar>(&self) -> NetworkParams<T> {
        let mut out = NetworkParams::<T>::init_zeros(&self.hyper);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.hyper == other.hyper
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.bits_eq(b))
    }

    /// Registers every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> BoundNetwork {
        let mut vars = self.tensors().into_iter().map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        });
        let item_table = vars.next().expect("item table");
        let position_table = vars.next().expect("position table");
        let layers = (0..self.hyper.layers)
            .map(|_| BoundLayer {
                vars: std::array::from_fn(|_| vars.next().expect("layer tensor")),
            })
            .collect();
        BoundNetwork {
            hyper: self.hyper.clone(),
            item_table,
            position_table,
            layers,
        }
    }

    /// Final representation of every sequence in `batch` (`[B, dim]`).
    pub fn represent<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, false);
        let e = embed(&mut tape, &net, batch, training, rng)?;
        let h = encode(&mut tape, &net, e, batch, training, rng)?;
        let f = final_representation(&mut tape, h, batch.len(), batch.max_len)?;
        Ok(tape.value(f).clone())
    }

    /// Hidden states of the last layer at every position (`[B·T, dim]`).
    pub fn hidden_states<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, false);
        let e = embed(&mut tape, &net, batch, training, rng)?;
        let h = encode(&mut tape, &net, e, batch, training, rng)?;
        Ok(tape.value(h).clone())
    }
}

/// Per-layer tape handles, in the same order as the layer's tensor names.
#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub vars: [Var; 16],
}

/// A network whose tensors live on a tape.
#[derive(Clone, Debug)]
pub struct BoundNetwork {
    pub hyper: ModelHyper,
    pub item_table: Var,
    pub position_table: Var,
    pub layers: Vec<BoundLayer>,
}

impl BoundNetwork {
    /// All handles in canonical tensor order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.item_table, self.position_table];
        for l in &self.layers {
            out.extend(l.vars);
        }
        out
    }

    /// Gradients of every tensor, zero-filled where no gradient arrived.
    pub fn grads<S: Scalar>(&self, tape: &Tape<S>) -> Vec<Vec<S>> {
        self.vars()
            .into_iter()
            .map(|v| {
                tape.grad(v)
                    .map(<[S]>::to_vec)
                    .unwrap_or_else(|| vec![S::zero(); tape.value(v).numel()])
            })
            .collect()
    }
}

/// `I[item] + P[t]` at every position, zeroed at padding, then dropout.
pub fn embed<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    net: &BoundNetwork,
    batch: &Batch,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let t = batch.max_len;
    if t != net.hyper.max_len {
        return Err(Error::shape(
            "embed",
            format!("batch window {t} vs model max_len {}", net.hyper.max_len),
        ));
    }
    let ids: Vec<usize> = batch.padded_ids.iter().map(|&i| i as usize).collect();
    if let Some(&bad) = ids.iter().find(|&&i| i > net.hyper.num_items) {
        return Err(Error::Index(format!(
            "item id {bad} with {} items",
            net.hyper.num_items
        )));
    }
    let items = tape.gather_rows(net.item_table, &ids)?;
    let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..t).collect();
    let pos = tape.gather_rows(net.position_table, &positions)?;
    let e = tape.add(items, pos)?;
    let e = tape.mask_rows(e, &batch.valid_mask)?;
    tape.dropout(e, net.hyper.dropout, training, rng)
}

fn linear<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w, false)?;
    tape.add_bias(y, b)
}

/// One post-norm Transformer layer with causal and key-padding masking.
pub fn encode_layer<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    layer: &BoundLayer,
    hyper: &ModelHyper,
    x: Var,
    batch: &Batch,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let [wq, bq, wk, bk, wv, bv, wo, bo, g1, b1, fw1, fb1, fw2, fb2, g2, b2] = layer.vars;
    let q = linear(tape, x, wq, bq)?;
    let k = linear(tape, x, wk, bk)?;
    let v = linear(tape, x, wv, bv)?;
    let a = tape.attention(q, k, v, hyper.heads, batch.max_len, &batch.valid_mask)?;
    let o = linear(tape, a, wo, bo)?;
    let o = tape.dropout(o, hyper.dropout, training, rng)?;
    let r = tape.add(x, o)?;
    let x1 = tape.layer_norm(r, g1, b1, LAYER_NORM_EPS)?;
    let f = linear(tape, x1, fw1, fb1)?;
    let f = tape.relu(f);
    let f = linear(tape, f, fw2, fb2)?;
    let f = tape.dropout(f, hyper.dropout, training, rng)?;
    let r = tape.add(x1, f)?;
    let x2 = tape.layer_norm(r, g2, b2, LAYER_NORM_EPS)?;
    tape.mask_rows(x2, &batch.valid_mask)
}

/// Applies `layers` of `net` in order.
pub fn encode_range<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    net: &BoundNetwork,
    layers: Range<usize>,
    x: Var,
    batch: &Batch,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let mut h = x;
    for l in layers {
        h = encode_layer(tape, &net.layers[l], &net.hyper, h, batch, training, rng)?;
    }
    Ok(h)
}

/// Applies every layer of `net`.
pub fn encode<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    net: &BoundNetwork,
    x: Var,
    batch: &Batch,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    encode_range(tape, net, 0..net.hyper.layers, x, batch, training, rng)
}

/// Hidden state at the last position of each sequence.
pub fn final_representation<S: Scalar>(
    tape: &mut Tape<S>,
    h: Var,
    batch: usize,
    max_len: usize,
) -> Result<Var> {
    if max_len == 0 {
        return Err(Error::Config("max_len 0".into()));
    }
    let rows: Vec<usize> = (0..batch).map(|b| b * max_len + max_len - 1).collect();
    tape.gather_rows(h, &rows)
}

/// Raw scores `h · I[1..]ᵀ` against every real item (padding row excluded).
pub fn score_items<S: Scalar>(tape: &mut Tape<S>, h: Var, item_table: Var) -> Result<Var> {
    let n = tape.value(item_table).rows();
    let real: Vec<usize> = (1..n).collect();
    let items = tape.gather_rows(item_table, &real)?;
    tape.matmul(h, items, true)
}

/// One contiguous stage of a network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage {
    pub embedding: bool,
    pub layers: Range<usize>,
}

/// Partition of `[embedding, layer_1, …, layer_L]` into `M` contiguous stages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubModuleBoundary {
    pub stages: Vec<Stage>,
}

impl SubModuleBoundary {
    pub fn count(&self) -> usize {
        self.stages.len()
    }
}

/// Embedding alone, then the layers in `M - 1` near-equal groups with the
/// remainder going to the earliest groups.
pub fn split_into_submodules(layers: usize, m: usize) -> Result<SubModuleBoundary> {
    if m < 2 || m > layers + 1 {
        return Err(Error::Config(format!(
            "{m} sub-modules requested for {layers} layers (need 2..={})",
            layers + 1
        )));
    }
    let groups = m - 1;
    let (base, extra) = (layers / groups, layers % groups);
    let mut stages = vec![Stage {
        embedding: true,
        layers: 0..0,
    }];
    let mut start = 0;
    for g in 0..groups {
        let len = base + usize::from(g < extra);
        stages.push(Stage {
            embedding: false,
            layers: start..start + len,
        });
        start += len;
    }
    Ok(SubModuleBoundary { stages })
}

/// Runs one stage; the embedding stage ignores `input`, others require it.
pub fn run_stage<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    net: &BoundNetwork,
    stage: &Stage,
    input: Option<Var>,
    batch: &Batch,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let x = if stage.embedding {
        embed(tape, net, batch, training, rng)?
    } else {
        input.ok_or_else(|| Error::Contract("encoder stage without input".into()))?
    };
    encode_range(tape, net, stage.layers.clone(), x, batch, training, rng)
}
