//! Reverse-mode differentiation over feature matrices.
//!
//! A [`Tape`] records every forward operation together with what its backward
//! rule needs. Parameters enter as leaves tied to a [`ParamId`], so gradients
//! come back keyed by parameter. Sparse tensors travel as [`SparseVar`]: a shared
//! coordinate layout plus the tape node holding the feature rows.

mod backward;
mod ops;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::conv::{build_rulebook, KernelSpec, Rulebook};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;
use crate::rng::mix64;
use crate::store::{ParamId, ParamStore};
use crate::tensor::{Layout, SparseTensor};

pub use ops::PoolKind;

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Sparse tensor on the tape: shared active set plus feature node.
#[derive(Clone, Debug)]
pub struct SparseVar {
    pub layout: Arc<Layout>,
    pub var: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics over the active rows; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Pending running-statistics update produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
    pub momentum: f64,
}

impl<T: Real> StatUpdate<T> {
    pub fn apply(&self, store: &mut ParamStore<T>) {
        let m = T::from_f64(self.momentum);
        let keep = T::ONE - m;
        for (r, &b) in store
            .value_mut(self.running_mean)
            .as_mut_slice()
            .iter_mut()
            .zip(&self.batch_mean)
        {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store
            .value_mut(self.running_var)
            .as_mut_slice()
            .iter_mut()
            .zip(&self.batch_var)
        {
            *r = keep * *r + m * b;
        }
    }
}

pub(crate) enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        rb: Arc<Rulebook>,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        rb: Arc<Rulebook>,
    },
    MatMul {
        x: Var,
        w: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scatter {
        parts: Vec<(Var, Vec<u32>)>,
    },
    Pool {
        x: Var,
        offsets: Arc<Vec<usize>>,
        kind: PoolKind,
        arg_max: Vec<u32>,
        arg_min: Vec<u32>,
    },
    /// Scalar output with precomputed partial derivatives per input.
    Scalar {
        inputs: Vec<(Var, Matrix<T>)>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Matrix<T>,
    pub(crate) op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    mode: NormMode,
    stat_updates: Vec<StatUpdate<T>>,
    kinks: u64,
    rulebooks: HashMap<(u64, KernelSpec), Arc<Rulebook>>,
}

impl<T: Real> Tape<T> {
    pub fn new(mode: NormMode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            stat_updates: Vec::new(),
            kinks: 0,
            rulebooks: HashMap::new(),
        }
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Leaf holding the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id) })
    }

    pub fn sparse_input(&mut self, t: &SparseTensor<T>) -> SparseVar {
        let var = self.constant(t.features().clone());
        SparseVar {
            layout: Arc::clone(t.layout()),
            var,
        }
    }

    /// Sparse tensor whose features are a stored parameter (used to check input gradients).
    pub fn sparse_param(&mut self, layout: &Arc<Layout>, store: &ParamStore<T>, id: ParamId) -> SparseVar {
        let var = self.param(store, id);
        SparseVar {
            layout: Arc::clone(layout),
            var,
        }
    }

    pub fn tensor(&self, x: &SparseVar) -> SparseTensor<T> {
        SparseTensor::from_layout(Arc::clone(&x.layout), self.value(x.var).clone())
            .expect("tape values are row-aligned with their layout")
    }

    /// Rulebook for `spec` on `layout`, built once per tape.
    pub fn rulebook(&mut self, layout: &Arc<Layout>, spec: &KernelSpec) -> Result<Arc<Rulebook>> {
        let key = (layout.id(), *spec);
        if let Some(rb) = self.rulebooks.get(&key) {
            return Ok(Arc::clone(rb));
        }
        let rb = Arc::new(build_rulebook(layout, spec)?);
        self.rulebooks.insert(key, Arc::clone(&rb));
        Ok(rb)
    }

    pub fn push_stat_update(&mut self, u: StatUpdate<T>) {
        self.stat_updates.push(u);
    }

    pub fn stat_updates(&self) -> &[StatUpdate<T>] {
        &self.stat_updates
    }

    /// Apply every recorded running-statistics update to `store`.
    pub fn commit_stats(&self, store: &mut ParamStore<T>) {
        for u in &self.stat_updates {
            u.apply(store);
        }
    }

    /// Fingerprint of every branch decision taken so far (ReLU signs, pooling
    /// winners, absolute-value signs). Two evaluations with equal fingerprints
    /// used the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    pub(crate) fn record_kink(&mut self, word: u64) {
        self.kinks = mix64(self.kinks ^ word);
    }

    pub fn record_branches(&mut self, bits: impl IntoIterator<Item = bool>) {
        let mut word = 0u64;
        let mut n = 0;
        for b in bits {
            word = (word << 1) | b as u64;
            n += 1;
            if n == 64 {
                self.record_kink(word);
                word = 0;
                n = 0;
            }
        }
        self.record_kink(word ^ ((n as u64) << 56));
    }

    /// Propagate `d root = 1` backwards. `root` must be a 1x1 value.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let v = self.value(root);
        if v.rows() != 1 || v.cols() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward root is {}x{}, expected a scalar",
                v.rows(),
                v.cols()
            )));
        }
        self.backward_with(root, Matrix::scalar(T::ONE))
    }

    /// Propagate an arbitrary output cotangent.
    pub fn backward_with(&self, root: Var, seed: Matrix<T>) -> Result<Gradients<T>> {
        let v = self.value(root);
        if (v.rows(), v.cols()) != (seed.rows(), seed.cols()) {
            return Err(Error::ShapeMismatch("seed gradient shape".into()));
        }
        backward::run(self, root, seed)
    }
}

pub struct Gradients<T> {
    nodes: Vec<Option<Matrix<T>>>,
    params: BTreeMap<ParamId, Matrix<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf node (constants and parameters). Interior node
    /// gradients are released during the backward sweep.
    pub fn of(&self, v: Var) -> Option<&Matrix<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter, summed over every leaf that read it.
    pub fn param(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Matrix<T>> {
        &self.params
    }
}
