use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Gradients of an op's output with respect to each of its inputs.
/// `None` entries mean "no contribution" (input does not require grad).
pub(crate) type InputGrads<T> = Vec<Option<Vec<T>>>;

type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> InputGrads<T>>;

struct GradFn<T: Element> {
    name: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

/// Dense row-major tensor with optional gradient tracking.
///
/// Cloning is cheap and yields a handle to the same node.
pub struct Tensor<T: Element = f32> {
    node: Rc<Node<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self { node: Rc::clone(&self.node) }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("op", &self.node.grad_fn.as_ref().map(|g| g.name).unwrap_or("leaf"))
            .finish()
    }
}

/// Runs `f` with graph recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

impl<T: Element> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                grad_fn,
            }),
        }
    }

    /// Leaf tensor that does not track gradients.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    pub fn leaf(shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return shape_err("new", format!("dimensions must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err("new", format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self::build(shape.to_vec(), data, requires_grad, None))
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::leaf(shape, data, true)
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![1], vec![value], false, None)
    }

    /// Records an op result. Graph linkage is dropped when no input needs
    /// gradients or recording is disabled.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: impl Fn(&[T], &[bool]) -> InputGrads<T> + 'static,
    ) -> Self {
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let grad_fn = track.then(|| GradFn { name, inputs, backward: Box::new(backward) });
        Self::build(shape, data, track, grad_fn)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    /// Mutable access to the values, for optimizers and initializers.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return shape_err("item", format!("expected one element, got {:?}", self.shape()));
        }
        Ok(self.node.data.borrow()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.node.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub fn op_name(&self) -> &'static str {
        self.node.grad_fn.as_ref().map(|g| g.name).unwrap_or("leaf")
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.node.shape.clone(), self.to_vec(), false, None)
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    /// Same data, new shape with an equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return shape_err("reshape", format!("cannot view {:?} as {shape:?}", self.shape()));
        }
        Ok(Self::from_op("reshape", shape.to_vec(), self.to_vec(), vec![self.clone()], |g, _| vec![Some(g.to_vec())]))
    }

    /// Reverse-mode sweep from a one-element root.
    ///
    /// Gradients add into the `grad` of every reachable tensor that requires
    /// one; calling twice without [`zero_grad`](Self::zero_grad) accumulates.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Inputs are always created before their outputs, so descending id
        // order is a reverse topological order of the reachable subgraph.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.node.id);
        while let Some(t) = stack.pop() {
            if let Some(gf) = &t.node.grad_fn {
                for input in &gf.inputs {
                    if input.requires_grad() && seen.insert(input.node.id) {
                        stack.push(input.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_by_key(|t| std::cmp::Reverse(t.node.id));

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.node.id, vec![T::one()]);
        for t in &order {
            let Some(g) = pending.remove(&t.node.id) else {
                continue;
            };
            if let Some(gf) = &t.node.grad_fn {
                let needs: Vec<bool> = gf.inputs.iter().map(|i| i.requires_grad()).collect();
                let input_grads = (gf.backward)(&g, &needs);
                debug_assert_eq!(input_grads.len(), gf.inputs.len());
                for (input, ig) in gf.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !input.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(ig.len(), input.numel(), "grad size from {}", gf.name);
                    match pending.get_mut(&input.node.id) {
                        Some(acc) => add_into(acc, &ig),
                        None => {
                            pending.insert(input.node.id, ig);
                        }
                    }
                }
            }
            let mut slot = t.node.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => add_into(acc, &g),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

pub(crate) fn add_into<T: Element>(acc: &mut [T], g: &[T]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a = *a + *b;
    }
}
