//! Scalar reverse-mode automatic differentiation on an append-only tape.
//!
//! Every primitive records its parents and the numeric local partials needed
//! for a plain reverse sweep. [`Tape::grad_vars`] can also *record* the reverse
//! sweep as new tape nodes, so a gradient is itself differentiable. Second
//! derivatives come from differentiating that recording again
//! (reverse-over-reverse), and parameter gradients of a loss that contains
//! input derivatives come from one more plain sweep over the whole tape.
//!
//! Recorded derivative nodes of `max_const`/`min_const` are constants chosen
//! from the values at recording time, so a tape holding recorded sweeps is only
//! valid for the inputs it was built with. Tapes are cheap to rebuild.

use crate::error::{AbhError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Constant,
    Input,
    Add,
    Mul,
    Neg,
    Recip,
    PowConst(f64),
    Exp,
    Log,
    Tanh,
    Softplus,
    /// `max(x, c)`; derivative 1 for `x >= c` (right-hand at the kink).
    MaxConst(f64),
    /// `min(x, c)`; derivative 1 for `x < c` (right-hand at the kink).
    MinConst(f64),
}

#[derive(Clone, Copy, Debug)]
struct Node {
    op: Op,
    value: f64,
    start: u32,
    len: u32,
}

/// Read-only view of one recorded node.
#[derive(Clone, Copy, Debug)]
pub struct DiffNode<'a> {
    pub value: f64,
    pub op: Op,
    pub parents: &'a [Var],
    pub local_partials: &'a [f64],
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    parents: Vec<Var>,
    partials: Vec<f64>,
    inputs: Vec<Var>,
    first_non_finite: Option<usize>,
}

/// `tanh` through a single exponential; absolute error near machine epsilon.
pub fn tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Value and local partials of `op` applied to `args`. Partials are written
/// into `out` (one per argument).
fn apply(op: Op, args: &[f64], out: &mut Vec<f64>) -> f64 {
    out.clear();
    match op {
        Op::Constant | Op::Input => unreachable!("leaf nodes carry their own value"),
        Op::Add => {
            out.resize(args.len(), 1.0);
            args.iter().sum()
        }
        Op::Mul => {
            out.push(args[1]);
            out.push(args[0]);
            args[0] * args[1]
        }
        Op::Neg => {
            out.push(-1.0);
            -args[0]
        }
        Op::Recip => {
            let x = args[0];
            out.push(-1.0 / (x * x));
            1.0 / x
        }
        Op::PowConst(p) => {
            let x = args[0];
            out.push(p * x.powf(p - 1.0));
            x.powf(p)
        }
        Op::Exp => {
            let y = args[0].exp();
            out.push(y);
            y
        }
        Op::Log => {
            let x = args[0];
            out.push(1.0 / x);
            x.ln()
        }
        Op::Tanh => {
            let y = tanh(args[0]);
            out.push(1.0 - y * y);
            y
        }
        Op::Softplus => {
            out.push(sigmoid(args[0]));
            softplus(args[0])
        }
        Op::MaxConst(c) => {
            let x = args[0];
            out.push(if x >= c { 1.0 } else { 0.0 });
            x.max(c)
        }
        Op::MinConst(c) => {
            let x = args[0];
            out.push(if x < c { 1.0 } else { 0.0 });
            x.min(c)
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(nodes),
            parents: Vec::with_capacity(2 * nodes),
            partials: Vec::with_capacity(2 * nodes),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Designated independent variables, in creation order.
    pub fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    pub fn node(&self, v: Var) -> DiffNode<'_> {
        let n = &self.nodes[v.index()];
        let range = n.start as usize..(n.start + n.len) as usize;
        DiffNode {
            value: n.value,
            op: n.op,
            parents: &self.parents[range.clone()],
            local_partials: &self.partials[range],
        }
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.index()].value
    }

    fn note_finite(&mut self, idx: usize, value: f64, start: usize, end: usize) {
        if self.first_non_finite.is_none()
            && (!value.is_finite() || self.partials[start..end].iter().any(|p| !p.is_finite()))
        {
            self.first_non_finite = Some(idx);
        }
    }

    fn leaf(&mut self, op: Op, value: f64) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            start: self.parents.len() as u32,
            len: 0,
        });
        let start = self.partials.len();
        self.note_finite(idx, value, start, start);
        Var(idx as u32)
    }

    fn push(&mut self, op: Op, args: &[Var]) -> Var {
        let mut vals = [0.0f64; 2];
        let mut scratch = Vec::with_capacity(args.len());
        let value = if args.len() <= 2 {
            for (slot, a) in vals.iter_mut().zip(args) {
                *slot = self.value(*a);
            }
            apply(op, &vals[..args.len()], &mut scratch)
        } else {
            let v: Vec<f64> = args.iter().map(|a| self.value(*a)).collect();
            apply(op, &v, &mut scratch)
        };
        let idx = self.nodes.len();
        let start = self.parents.len();
        self.parents.extend_from_slice(args);
        self.partials.extend_from_slice(&scratch);
        self.nodes.push(Node {
            op,
            value,
            start: start as u32,
            len: args.len() as u32,
        });
        self.note_finite(idx, value, start, start + args.len());
        Var(idx as u32)
    }

    pub fn input(&mut self, value: f64) -> Var {
        let v = self.leaf(Op::Input, value);
        self.inputs.push(v);
        v
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.leaf(Op::Constant, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add, &[a, b])
    }

    /// N-ary sum. An empty slice yields the constant 0.
    pub fn sum(&mut self, terms: &[Var]) -> Var {
        match terms {
            [] => self.constant(0.0),
            [single] => *single,
            _ => self.push(Op::Add, terms),
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let rb = self.recip(b);
        self.mul(a, rb)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg, &[a])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.push(Op::Recip, &[a])
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.push(Op::PowConst(p), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp, &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.push(Op::Log, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh, &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.push(Op::Softplus, &[a])
    }

    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::MaxConst(c), &[a])
    }

    pub fn min_const(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::MinConst(c), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let c = self.constant(k);
        self.mul(a, c)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let c = self.constant(k);
        self.add(a, c)
    }

    /// Fails with the index of the first node whose value or local partial
    /// is not finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            None => Ok(()),
            Some(i) => Err(AbhError::numeric(
                "tape forward",
                i,
                format!("non-finite value {} ({:?})", self.nodes[i].value, self.nodes[i].op),
            )),
        }
    }

    /// Replays the tape with new input values and returns the value of `root`.
    /// Every designated input must be bound exactly once.
    pub fn forward(&mut self, root: Var, bindings: &[(Var, f64)]) -> Result<f64> {
        if self.nodes.is_empty() {
            return Err(AbhError::Config("forward on an empty tape".into()));
        }
        let mut bound: Vec<Option<f64>> = vec![None; self.inputs.len()];
        for &(v, x) in bindings {
            let slot = self
                .inputs
                .binary_search(&v)
                .map_err(|_| AbhError::Config(format!("node {} is not a tape input", v.index())))?;
            bound[slot] = Some(x);
        }
        if let Some(missing) = bound.iter().position(Option::is_none) {
            return Err(AbhError::Config(format!(
                "tape input {} is unbound",
                self.inputs[missing].index()
            )));
        }

        self.first_non_finite = None;
        let mut next_input = 0;
        let mut args = Vec::new();
        let mut scratch = Vec::new();
        for i in 0..self.nodes.len() {
            let node = self.nodes[i];
            let start = node.start as usize;
            let end = start + node.len as usize;
            match node.op {
                Op::Constant => {}
                Op::Input => {
                    self.nodes[i].value = bound[next_input].unwrap_or(node.value);
                    next_input += 1;
                }
                op => {
                    args.clear();
                    args.extend(self.parents[start..end].iter().map(|p| self.nodes[p.index()].value));
                    let value = apply(op, &args, &mut scratch);
                    self.nodes[i].value = value;
                    self.partials[start..end].copy_from_slice(&scratch);
                }
            }
            let value = self.nodes[i].value;
            self.note_finite(i, value, start, end);
        }
        self.check_finite()?;
        Ok(self.value(root))
    }

    fn adjoints(&self, root: Var) -> Vec<f64> {
        let n = root.index() + 1;
        let mut adj = vec![0.0; n];
        adj[root.index()] = 1.0;
        for i in (0..n).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = self.nodes[i];
            let start = node.start as usize;
            let end = start + node.len as usize;
            for (p, d) in self.parents[start..end].iter().zip(&self.partials[start..end]) {
                adj[p.index()] += a * d;
            }
        }
        adj
    }

    /// Exact partials of `root` with respect to each variable in `wrt`.
    pub fn gradient(&self, root: Var, wrt: &[Var]) -> Result<Vec<f64>> {
        self.check_finite()?;
        let adj = self.adjoints(root);
        wrt.iter()
            .enumerate()
            .map(|(k, w)| {
                let g = adj.get(w.index()).copied().unwrap_or(0.0);
                if g.is_finite() {
                    Ok(g)
                } else {
                    Err(AbhError::numeric("gradient", k, format!("non-finite adjoint {g}")))
                }
            })
            .collect()
    }

    /// Gradient of a scalar loss with respect to the parameter variables, in
    /// the order given.
    pub fn param_gradient(&self, root: Var, params: &[Var]) -> Result<Vec<f64>> {
        self.check_finite()?;
        let adj = self.adjoints(root);
        let mut out = Vec::with_capacity(params.len());
        for (k, p) in params.iter().enumerate() {
            let g = adj.get(p.index()).copied().unwrap_or(0.0);
            if !g.is_finite() {
                return Err(AbhError::numeric(
                    "parameter gradient",
                    k,
                    format!("non-finite component {g}"),
                ));
            }
            out.push(g);
        }
        Ok(out)
    }

    /// Records the reverse sweep from `root` onto the tape and returns one
    /// differentiable node per entry of `wrt`.
    pub fn grad_vars(&mut self, root: Var, wrt: &[Var]) -> Vec<Var> {
        let n = root.index() + 1;
        let mut depends = vec![false; n];
        for w in wrt {
            if w.index() < n {
                depends[w.index()] = true;
            }
        }
        for i in 0..n {
            if !depends[i] {
                let node = self.nodes[i];
                let start = node.start as usize;
                let end = start + node.len as usize;
                depends[i] = self.parents[start..end].iter().any(|p| depends[p.index()]);
            }
        }

        let mut contribs: Vec<Vec<Var>> = vec![Vec::new(); n];
        let mut result: Vec<Option<Var>> = vec![None; wrt.len()];
        if depends[root.index()] {
            let one = self.constant(1.0);
            contribs[root.index()].push(one);
        }
        let mut parents = Vec::new();
        for i in (0..n).rev() {
            if !depends[i] || contribs[i].is_empty() {
                continue;
            }
            let terms = std::mem::take(&mut contribs[i]);
            let adj = self.sum(&terms);
            let node = self.nodes[i];
            if node.op == Op::Input {
                for (slot, w) in result.iter_mut().zip(wrt) {
                    if w.index() == i {
                        *slot = Some(adj);
                    }
                }
                continue;
            }
            let me = Var(i as u32);
            let start = node.start as usize;
            parents.clear();
            parents.extend_from_slice(&self.parents[start..start + node.len as usize]);
            for (k, &p) in parents.iter().enumerate() {
                if !depends[p.index()] {
                    continue;
                }
                let c = match node.op {
                    Op::Constant | Op::Input => unreachable!(),
                    Op::Add => adj,
                    Op::Mul => {
                        let other = parents[1 - k];
                        self.mul(adj, other)
                    }
                    Op::Neg => self.neg(adj),
                    Op::Recip => {
                        let y2 = self.square(me);
                        let d = self.neg(y2);
                        self.mul(adj, d)
                    }
                    Op::PowConst(q) => {
                        let d = if q == 1.0 {
                            self.constant(1.0)
                        } else if q == 2.0 {
                            self.scale(p, 2.0)
                        } else {
                            let xp = self.powf(p, q - 1.0);
                            self.scale(xp, q)
                        };
                        self.mul(adj, d)
                    }
                    Op::Exp => self.mul(adj, me),
                    Op::Log => self.div(adj, p),
                    Op::Tanh => {
                        let y2 = self.square(me);
                        let ny2 = self.neg(y2);
                        let d = self.add_const(ny2, 1.0);
                        self.mul(adj, d)
                    }
                    Op::Softplus => {
                        let ny = self.neg(me);
                        let arg = self.add(p, ny);
                        let d = self.exp(arg);
                        self.mul(adj, d)
                    }
                    Op::MaxConst(c) => {
                        if self.value(p) >= c {
                            adj
                        } else {
                            continue;
                        }
                    }
                    Op::MinConst(c) => {
                        if self.value(p) < c {
                            adj
                        } else {
                            continue;
                        }
                    }
                };
                contribs[p.index()].push(c);
            }
        }
        result
            .into_iter()
            .map(|r| r.unwrap_or_else(|| self.constant(0.0)))
            .collect()
    }

    /// Exact mixed second partial `d²root / (di dj)` by differentiating the
    /// recorded gradient.
    pub fn second_partial(&mut self, root: Var, i: Var, j: Var) -> Result<f64> {
        let di = self.grad_vars(root, &[i])[0];
        self.check_finite()?;
        let g = self.gradient(di, &[j])?[0];
        if !g.is_finite() {
            return Err(AbhError::numeric("second partial", j.index(), "non-finite"));
        }
        Ok(g)
    }
}
