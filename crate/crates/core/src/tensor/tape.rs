//! Define-by-run reverse-mode differentiation.
//!
//! One tape may be active per thread. Ops consult the thread-local tape: if
//! any operand is watched on it, the op pushes a node holding a backward
//! closure. `backward` replays nodes in reverse, visiting each exactly once,
//! and returns gradients for the watched leaves. The tape is consumed by
//! `backward`; a fresh forward pass needs a fresh tape.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, NodeTag, Tensor};

pub(crate) type BackFn = Box<dyn FnOnce(Vec<f32>, &mut Sink)>;

enum Node {
    Leaf,
    Op { parents: Vec<usize>, back: BackFn },
}

struct ActiveTape {
    gen: u64,
    nodes: Vec<Option<Node>>,
    /// Flat length of each node's output, for lazy gradient allocation.
    lens: Vec<usize>,
}

thread_local! {
    static ACTIVE: RefCell<Option<ActiveTape>> = const { RefCell::new(None) };
    static NEXT_GEN: RefCell<u64> = const { RefCell::new(1) };
}

/// Gradient buffers under accumulation during the reverse sweep.
pub(crate) struct Sink {
    bufs: Vec<Option<Vec<f32>>>,
    lens: Vec<usize>,
}

impl Sink {
    /// Mutable gradient buffer of node `id`, zero-initialised on first use.
    pub fn buf(&mut self, id: usize) -> &mut [f32] {
        let len = self.lens[id];
        self.bufs[id].get_or_insert_with(|| vec![0.0; len])
    }
}

/// Guard object owning the thread's recording scope.
pub struct Tape {
    gen: u64,
    // Keeps the guard off other threads; the tape state is thread-local.
    _not_send: std::marker::PhantomData<*const ()>,
}

impl Tape {
    /// Starts recording on this thread. Errors if a tape is already active.
    pub fn begin() -> Result<Tape> {
        ACTIVE.with(|slot| {
            let mut slot = slot.borrow_mut();
            if slot.is_some() {
                return Err(Error::Tape("a tape is already active on this thread".into()));
            }
            let gen = NEXT_GEN.with(|g| {
                let mut g = g.borrow_mut();
                *g += 1;
                *g
            });
            *slot = Some(ActiveTape { gen, nodes: Vec::new(), lens: Vec::new() });
            Ok(Tape { gen, _not_send: std::marker::PhantomData })
        })
    }

    /// Registers `t` as a differentiable leaf and returns the watched copy.
    pub fn watch(&self, t: Tensor) -> Tensor {
        ACTIVE.with(|slot| {
            let mut slot = slot.borrow_mut();
            let tape = slot.as_mut().expect("watch called after tape was consumed");
            assert_eq!(tape.gen, self.gen, "watch called on a foreign tape");
            let id = tape.nodes.len();
            tape.nodes.push(Some(Node::Leaf));
            tape.lens.push(t.len());
            let mut out = t;
            out.set_node(NodeTag { gen: self.gen, id });
            out
        })
    }

    /// Number of recorded nodes (leaves included).
    pub fn node_count(&self) -> usize {
        ACTIVE.with(|slot| slot.borrow().as_ref().map_or(0, |t| t.nodes.len()))
    }

    /// Parent ids of node `id`; empty for leaves. Exposed for invariant tests.
    pub fn parents_of(&self, id: usize) -> Vec<usize> {
        ACTIVE.with(|slot| {
            let slot = slot.borrow();
            let tape = slot.as_ref().expect("tape already consumed");
            match tape.nodes[id].as_ref() {
                Some(Node::Op { parents, .. }) => parents.clone(),
                _ => Vec::new(),
            }
        })
    }

    /// Runs the reverse sweep from a scalar `root` recorded on this tape.
    /// Consumes the recording; a second call is an error.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        let tape = ACTIVE.with(|slot| slot.borrow_mut().take());
        let Some(tape) = tape else {
            return Err(Error::Tape("backward called twice on the same tape".into()));
        };
        if tape.gen != self.gen {
            ACTIVE.with(|slot| *slot.borrow_mut() = Some(tape));
            return Err(Error::Tape("backward called on a foreign tape".into()));
        }
        let Some(tag) = root.node() else {
            return Err(Error::Tape("root was not recorded under the active tape".into()));
        };
        if tag.gen != self.gen {
            return Err(Error::Tape("root belongs to a different tape".into()));
        }
        if root.len() != 1 {
            return Err(Error::Tape(format!(
                "backward root must be a scalar, got dims {:?}",
                root.dims()
            )));
        }

        let ActiveTape { gen, mut nodes, lens } = tape;
        let mut sink = Sink { bufs: vec![None; nodes.len()], lens };
        sink.buf(tag.id)[0] = 1.0;

        for id in (0..=tag.id).rev() {
            let is_op = matches!(nodes[id], Some(Node::Op { .. }));
            if !is_op {
                continue; // leaves keep their accumulated gradient
            }
            let Some(grad) = sink.bufs[id].take() else {
                continue; // not an ancestor of the root
            };
            if let Some(Node::Op { back, .. }) = nodes[id].take() {
                back(grad, &mut sink);
            }
        }

        // Only leaf gradients remain meaningful; drop op buffers past the root.
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node, Some(Node::Leaf)) {
                sink.bufs[id] = None;
            }
        }
        for (id, buf) in sink.bufs.iter().enumerate() {
            if let Some(b) = buf {
                ensure_finite(&format!("backward gradient of node {id}"), b)?;
            }
        }
        Ok(Gradients { gen, bufs: sink.bufs })
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        ACTIVE.with(|slot| {
            let mut slot = slot.borrow_mut();
            if slot.as_ref().map_or(false, |t| t.gen == self.gen) {
                *slot = None;
            }
        });
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    gen: u64,
    bufs: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of a watched leaf, shaped like the leaf. `None` when the leaf
    /// did not influence the root.
    pub fn take(&mut self, leaf: &Tensor) -> Option<Tensor> {
        let tag = leaf.node()?;
        if tag.gen != self.gen {
            return None;
        }
        let buf = self.bufs.get_mut(tag.id)?.take()?;
        Some(Tensor::from_op(leaf.dims().to_vec(), buf))
    }

    /// Like `take`, but substitutes zeros for an uninfluential leaf.
    pub fn take_or_zeros(&mut self, leaf: &Tensor) -> Tensor {
        self.take(leaf).unwrap_or_else(|| Tensor::zeros(leaf.dims()))
    }
}

/// Records an op on the active tape when at least one parent is watched.
/// `make_back` receives the tape ids of the parents (`None` = constant) and
/// returns the backward closure.
pub(crate) fn record(
    out: &mut Tensor,
    parents: &[&Tensor],
    make_back: impl FnOnce(Vec<Option<usize>>) -> BackFn,
) {
    ACTIVE.with(|slot| {
        let mut slot = slot.borrow_mut();
        let Some(tape) = slot.as_mut() else { return };
        let ids: Vec<Option<usize>> = parents
            .iter()
            .map(|p| p.node().filter(|t| t.gen == tape.gen).map(|t| t.id))
            .collect();
        if ids.iter().all(Option::is_none) {
            return;
        }
        let id = tape.nodes.len();
        let parent_ids = ids.iter().copied().flatten().collect();
        tape.nodes.push(Some(Node::Op { parents: parent_ids, back: make_back(ids) }));
        tape.lens.push(out.len());
        out.set_node(NodeTag { gen: tape.gen, id });
    });
}

/// Max over coordinates of `|analytic - numeric| / (|numeric| + 1e-8)` where
/// `numeric` comes from central differences with step `eps`. `f` must be a
/// deterministic scalar-valued function built from tape-recorded ops.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    eps: f32,
) -> Result<f32> {
    let tape = Tape::begin()?;
    let xw = tape.watch(x.clone());
    let y = f(&xw)?;
    if y.len() != 1 {
        return Err(Error::Shape {
            op: "finite_diff_check",
            detail: format!("f must be scalar-valued, got dims {:?}", y.dims()),
        });
    }
    let mut grads = tape.backward(&y)?;
    let analytic = grads.take_or_zeros(&xw);

    let mut max_rel = 0.0f64;
    let base = x.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::new(x.dims().to_vec(), plus)?)?.item()? as f64;
        let fm = f(&Tensor::new(x.dims().to_vec(), minus)?)?.item()? as f64;
        let numeric = (fp - fm) / (2.0 * eps as f64);
        let rel = (analytic.data()[i] as f64 - numeric).abs() / (numeric.abs() + 1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel as f32)
}
