//! Stage models: anything that maps an input tensor to class probabilities.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::netdef::NetworkDef;
use crate::network::{forward, Weights};
use crate::ops::Mode;
use crate::prob::ProbVector;
use crate::tensor::Tensor;

pub trait StageModel: Send + Sync {
    fn class_count(&self) -> usize;

    /// Expected (channels, height, width) of a single input.
    fn input_dims(&self) -> [usize; 3];

    /// Classifies one CHW (or 1×C×H×W) input.
    fn predict(&self, input: &Tensor) -> Result<ProbVector>;
}

impl<M: StageModel + ?Sized> StageModel for Arc<M> {
    fn class_count(&self) -> usize {
        (**self).class_count()
    }
    fn input_dims(&self) -> [usize; 3] {
        (**self).input_dims()
    }
    fn predict(&self, input: &Tensor) -> Result<ProbVector> {
        (**self).predict(input)
    }
}

impl<M: StageModel + ?Sized> StageModel for &M {
    fn class_count(&self) -> usize {
        (**self).class_count()
    }
    fn input_dims(&self) -> [usize; 3] {
        (**self).input_dims()
    }
    fn predict(&self, input: &Tensor) -> Result<ProbVector> {
        (**self).predict(input)
    }
}

/// In-process network with loaded weights.
#[derive(Clone, Debug)]
pub struct LocalStage {
    def: Arc<NetworkDef>,
    weights: Arc<Weights>,
}

impl LocalStage {
    pub fn new(def: NetworkDef, weights: Weights) -> Result<Self> {
        weights.check_against(&def)?;
        Ok(LocalStage {
            def: Arc::new(def),
            weights: Arc::new(weights),
        })
    }

    pub fn def(&self) -> &NetworkDef {
        &self.def
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }
}

impl StageModel for LocalStage {
    fn class_count(&self) -> usize {
        self.def.class_count
    }

    fn input_dims(&self) -> [usize; 3] {
        self.def.input_dims
    }

    fn predict(&self, input: &Tensor) -> Result<ProbVector> {
        let [n, ..] = input.nchw()?;
        if n != 1 {
            return Err(Error::shape(format!("stage input must be a single item, got batch {n}")));
        }
        let out = forward(&self.def, &self.weights, input, Mode::Infer)?;
        ProbVector::new(out.into_data())
    }
}

/// Wraps a model and counts `predict` calls.
#[derive(Debug, Default)]
pub struct CountingStage<M> {
    inner: M,
    calls: AtomicUsize,
}

impl<M> CountingStage<M> {
    pub fn new(inner: M) -> Self {
        CountingStage { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<M: StageModel> StageModel for CountingStage<M> {
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }
    fn input_dims(&self) -> [usize; 3] {
        self.inner.input_dims()
    }
    fn predict(&self, input: &Tensor) -> Result<ProbVector> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict(input)
    }
}

/// A stage backed by a closure; handy for synthetic oracles.
pub struct FnStage<F> {
    class_count: usize,
    input_dims: [usize; 3],
    f: F,
}

impl<F> FnStage<F>
where
    F: Fn(&Tensor) -> Result<ProbVector> + Send + Sync,
{
    pub fn new(class_count: usize, input_dims: [usize; 3], f: F) -> Self {
        FnStage { class_count, input_dims, f }
    }
}

impl<F> fmt::Debug for FnStage<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnStage")
            .field("class_count", &self.class_count)
            .field("input_dims", &self.input_dims)
            .finish_non_exhaustive()
    }
}

impl<F> StageModel for FnStage<F>
where
    F: Fn(&Tensor) -> Result<ProbVector> + Send + Sync,
{
    fn class_count(&self) -> usize {
        self.class_count
    }
    fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }
    fn predict(&self, input: &Tensor) -> Result<ProbVector> {
        let p = (self.f)(input)?;
        if p.len() != self.class_count {
            return Err(Error::shape(format!("stage returned {} classes, expected {}", p.len(), self.class_count)));
        }
        Ok(p)
    }
}
