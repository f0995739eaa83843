//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation whose inputs require a gradient. Values
//! are reference-counted, so on a tape with recording disabled intermediate
//! activations are released as soon as the last [`Var`] holding them drops.
//! Gradients accumulate: [`Gradients::accumulate_into`] adds into
//! [`Parameter::grad`], and callers zero between optimizer steps.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

/// A named model weight with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    id: ParamId,
    name: String,
    value: Arc<Tensor>,
    grad: Tensor,
    trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Parameter {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value: Arc::new(value),
            grad,
            trainable,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shared_value(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    /// Copy-on-write if a tape still holds the old value.
    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "Parameter::set_value",
                left: self.value.shape(),
                right: value.shape(),
            });
        }
        self.value = Arc::new(value);
        Ok(())
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }
}

pub fn zero_grads<'a>(params: impl IntoIterator<Item = &'a mut Parameter>) {
    for p in params {
        p.zero_grad();
    }
}

/// What a backward rule sees for one recorded node.
pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: &'a [Arc<Tensor>],
    pub output: &'a Tensor,
    /// `needs[i]` is false when input `i` is a constant; rules may skip it.
    pub needs: &'a [bool],
}

pub(crate) trait BackwardOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>>;
}

enum Leaf {
    Interior,
    Input,
    Param(ParamId),
}

struct Record {
    value: Arc<Tensor>,
    inputs: Vec<Arc<Tensor>>,
    parents: Vec<Option<usize>>,
    op: Option<Box<dyn BackwardOp>>,
    leaf: Leaf,
}

/// One convolution as executed, for MAC accounting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvTrace {
    pub transposed: bool,
    pub input: Shape,
    pub output: Shape,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub extra_padding: usize,
    pub bias: bool,
}

pub struct Tape {
    records: RefCell<Vec<Record>>,
    recording: bool,
    convs: RefCell<Vec<ConvTrace>>,
    kink_margin: Cell<f32>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            records: RefCell::new(Vec::new()),
            recording: true,
            convs: RefCell::new(Vec::new()),
            kink_margin: Cell::new(f32::INFINITY),
        }
    }

    /// A tape that never records; every `Var` is a constant.
    pub fn no_grad() -> Tape {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.constant_shared(Arc::new(value))
    }

    pub fn constant_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        Var {
            tape: self,
            id: None,
            value,
        }
    }

    /// A differentiable input (gradient retrievable via [`Gradients::wrt`]).
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), Leaf::Input)
    }

    /// Binds a parameter; frozen parameters enter as constants.
    pub fn param(&self, p: &Parameter) -> Var<'_> {
        if p.trainable {
            self.leaf(p.shared_value(), Leaf::Param(p.id))
        } else {
            self.constant_shared(p.shared_value())
        }
    }

    fn leaf(&self, value: Arc<Tensor>, leaf: Leaf) -> Var<'_> {
        if !self.recording {
            return self.constant_shared(value);
        }
        let mut records = self.records.borrow_mut();
        let id = records.len();
        records.push(Record {
            value: Arc::clone(&value),
            inputs: Vec::new(),
            parents: Vec::new(),
            op: None,
            leaf,
        });
        Var {
            tape: self,
            id: Some(id),
            value,
        }
    }

    /// Records `value = op(inputs)` when any input requires a gradient.
    pub(crate) fn record<'t>(
        &'t self,
        value: Tensor,
        inputs: &[&Var<'t>],
        op: impl BackwardOp + 'static,
    ) -> Var<'t> {
        let value = Arc::new(value);
        if !self.recording || inputs.iter().all(|v| v.id.is_none()) {
            return self.constant_shared(value);
        }
        let mut records = self.records.borrow_mut();
        let id = records.len();
        records.push(Record {
            value: Arc::clone(&value),
            inputs: inputs.iter().map(|v| Arc::clone(&v.value)).collect(),
            parents: inputs.iter().map(|v| v.id).collect(),
            op: Some(Box::new(op)),
            leaf: Leaf::Interior,
        });
        Var {
            tape: self,
            id: Some(id),
            value,
        }
    }

    /// Records how close a recorded piecewise op's input came to a point
    /// where its derivative jumps.
    pub(crate) fn note_kink_margin(&self, margin: f32) {
        self.kink_margin.set(self.kink_margin.get().min(margin));
    }

    /// Smallest distance to a derivative discontinuity seen by any recorded
    /// op (`inf` if none); only tracked while recording.
    pub fn kink_margin(&self) -> f32 {
        self.kink_margin.get()
    }

    pub(crate) fn trace_conv(&self, trace: ConvTrace) {
        self.convs.borrow_mut().push(trace);
    }

    /// Every convolution executed on this tape, in order.
    pub fn conv_trace(&self) -> Vec<ConvTrace> {
        self.convs.borrow().clone()
    }

    /// Gradients of the scalar `root` with respect to every reachable leaf.
    pub fn backward(&self, root: &Var<'_>) -> Result<Gradients> {
        if !root.value.shape().is_scalar() {
            return Err(Error::NonScalarRoot(root.value.shape()));
        }
        let mut out = Gradients::default();
        let Some(root_id) = root.id else {
            return Ok(out);
        };
        let records = self.records.borrow();
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root_id + 1);
        grads.resize_with(root_id + 1, || None);
        grads[root_id] = Some(Tensor::ones(Shape::SCALAR));

        for id in (0..=root_id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let rec = &records[id];
            match rec.leaf {
                Leaf::Param(pid) => {
                    accumulate(out.params.entry(pid), grad);
                    continue;
                }
                Leaf::Input => {
                    out.inputs.insert(id, grad);
                    continue;
                }
                Leaf::Interior => {}
            }
            let op = rec.op.as_ref().expect("interior node without backward rule");
            let needs: Vec<bool> = rec.parents.iter().map(Option::is_some).collect();
            let parent_grads = op.backward(&BackwardCtx {
                grad: &grad,
                inputs: &rec.inputs,
                output: &rec.value,
                needs: &needs,
            });
            debug_assert_eq!(parent_grads.len(), rec.parents.len());
            for (parent, g) in rec.parents.iter().zip(parent_grads) {
                if let (Some(pid), Some(g)) = (parent, g) {
                    debug_assert_eq!(g.shape(), records[*pid].value.shape());
                    match &mut grads[*pid] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot => *slot = Some(g),
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(
    entry: std::collections::hash_map::Entry<'_, ParamId, Tensor>,
    grad: Tensor,
) {
    use std::collections::hash_map::Entry;
    match entry {
        Entry::Occupied(mut e) => {
            e.get_mut()
                .add_assign(&grad)
                .expect("parameter bound with two shapes");
        }
        Entry::Vacant(e) => {
            e.insert(grad);
        }
    }
}

/// Result of one [`Tape::backward`] call.
#[derive(Default, Debug)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    inputs: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, p: &Parameter) -> Option<&Tensor> {
        self.params.get(&p.id)
    }

    pub fn wrt(&self, v: &Var<'_>) -> Option<&Tensor> {
        v.id.and_then(|id| self.inputs.get(&id))
    }

    /// Adds into each parameter's `grad`; unreachable parameters get zero.
    pub fn accumulate_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) {
        for p in params {
            if let Some(g) = self.params.get(&p.id) {
                p.grad
                    .add_assign(g)
                    .expect("gradient shape differs from parameter shape");
            }
        }
    }
}

/// A tensor value on a tape. Cheap to clone.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Option<usize>,
    value: Arc<Tensor>,
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    /// Detached copy of the value.
    pub fn to_tensor(&self) -> Tensor {
        (*self.value).clone()
    }

    pub fn item(&self) -> f32 {
        self.value.item()
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}
