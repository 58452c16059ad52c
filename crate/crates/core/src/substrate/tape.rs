use super::{Real, Result, SubstrateError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation, with whatever the backward rule needs saved.
pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        row: Var,
    },
    Axpy {
        x: Var,
        y: Var,
        alpha: T,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: T,
    },
    Gelu {
        a: Var,
    },
    Softplus {
        a: Var,
    },
    Sum {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        a: Var,
        start: usize,
        cols: usize,
    },
    Softmax {
        a: Var,
        cols: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Rope {
        a: Var,
        cos: Vec<T>,
        sin: Vec<T>,
        heads: usize,
        head_dim: usize,
        rot: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    FireInput {
        c: Var,
        l: Var,
        seq: usize,
    },
    FireScatter {
        a: Var,
        seq: usize,
        heads: usize,
    },
}

/// Linear record of a computation, replayed in reverse by [`Tape::backward`].
///
/// Values are immutable once recorded; only the gradient slots change.
pub struct Tape<T> {
    pub(crate) shapes: Vec<Vec<usize>>,
    pub(crate) values: Vec<Vec<T>>,
    pub(crate) ops: Vec<Op<T>>,
    pub(crate) needs_grad: Vec<bool>,
    pub(crate) grads: Vec<Option<Vec<T>>>,
    pub(crate) fault: Option<T>,
}

/// Result of a masked row softmax.
pub struct SoftmaxOutput {
    pub var: Var,
    /// Rows whose every entry was masked; these come back as all zeros.
    pub fully_masked_rows: Vec<usize>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            shapes: Vec::new(),
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Test hook: scales the input gradient produced by every layer-norm
    /// node, so a broken backward rule can be demonstrated end to end.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, factor: f64) {
        self.fault = Some(T::lit(factor));
    }

    /// Records a differentiable input.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_raw(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(SubstrateError::ElementCount {
                shape,
                len: data.len(),
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.shapes[v.0]
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Copies a recorded value, with its gradient slot if populated.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let mut t = Tensor::new(self.shapes[v.0].clone(), self.values[v.0].clone())
            .expect("tape values always match their shapes");
        if let Some(g) = &self.grads[v.0] {
            t.set_grad(g.clone()).expect("gradient shape matches value");
        }
        t
    }

    pub(crate) fn rows_cols(&self, v: Var) -> (usize, usize) {
        let shape = &self.shapes[v.0];
        let cols = *shape.last().unwrap_or(&1);
        let len = self.values[v.0].len();
        (if cols == 0 { 0 } else { len / cols }, cols)
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.shapes.push(shape);
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    /// Reverse pass from a scalar root, filling every reachable gradient slot.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.values[root.0].len() != 1 {
            return Err(SubstrateError::Invalid(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shapes[root.0]
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.needs_grad[i] || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Adds `f`'s contribution into the gradient slot of `v`.
    pub(crate) fn accumulate(
        grads: &mut [Option<Vec<T>>],
        needs: &[bool],
        values: &[Vec<T>],
        v: Var,
        f: impl FnOnce(&mut [T]),
    ) {
        if !needs[v.0] {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); values[v.0].len()]);
        f(slot);
    }
}
