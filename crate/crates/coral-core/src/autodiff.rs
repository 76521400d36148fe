//! Reverse-mode automatic differentiation with support for nested
//! (higher-order) gradients.
//!
//! A [`Var`] is a handle to a node in an eagerly-evaluated computation
//! graph: building an operation computes its value immediately and records
//! provenance. [`gradient`] walks the graph in reverse topological order and
//! expresses every vector-Jacobian product *as graph operations*, so the
//! returned gradients are themselves differentiable nodes. Differentiating
//! an expression that contains the output of a previous `gradient` call is
//! therefore valid to any nesting depth; this is what the second-order
//! meta-training loop relies on.
//!
//! Graphs are built and evaluated on a single thread; distinct graphs are
//! independent. The tensors inside nodes are immutable and safe to share.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    /// Multiplication by a constant scalar.
    Scale(Var, f64),
    /// Broadcast multiplication of a tensor by a rank-0 node.
    MulScalar(Var, Var),
    Matmul(Var, Var),
    Matvec(Var, Var),
    Outer(Var, Var),
    Transpose(Var),
    /// Row vector added to every row of a matrix.
    AddRow(Var, Var),
    /// Vector stacked into `m` identical matrix rows.
    BroadcastRows(Var),
    /// Column sums of a matrix.
    SumAxis0(Var),
    Sin(Var),
    Cos(Var),
    Sigmoid(Var),
    Square(Var),
    /// Sum of all entries, yielding a rank-0 node.
    Sum(Var),
    /// Rank-0 node broadcast to a full shape (the adjoint of `Sum`).
    Spread(Var),
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Differentiable value: a shared handle to one node of a computation graph.
#[derive(Clone)]
pub struct Var {
    node: Rc<Node>,
}

impl core::fmt::Debug for Var {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.node.id)
            .field("shape", &self.node.value.shape())
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn new_var(value: Tensor, requires_grad: bool, op: Op) -> Var {
    Var {
        node: Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            op,
        }),
    }
}

impl Var {
    /// Leaf that does not propagate gradients.
    pub fn constant(value: Tensor) -> Var {
        new_var(value, false, Op::Leaf)
    }

    /// Leaf that receives gradients.
    pub fn param(value: Tensor) -> Var {
        new_var(value, true, Op::Leaf)
    }

    pub fn value(&self) -> &Tensor {
        &self.node.value
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.node.id
    }

    /// Cuts the graph: same value, no history, no gradient flow.
    pub fn detach(&self) -> Var {
        Var::constant(self.node.value.clone())
    }

    /// Cuts the graph but keeps the result differentiable as a fresh leaf.
    pub fn detach_param(&self) -> Var {
        Var::param(self.node.value.clone())
    }

    fn rg2(&self, other: &Var) -> bool {
        self.node.requires_grad || other.node.requires_grad
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let v = self.value().add(other.value())?;
        Ok(new_var(v, self.rg2(other), Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let v = self.value().sub(other.value())?;
        Ok(new_var(v, self.rg2(other), Op::Sub(self.clone(), other.clone())))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        let v = self.value().mul(other.value())?;
        Ok(new_var(v, self.rg2(other), Op::Mul(self.clone(), other.clone())))
    }

    pub fn neg(&self) -> Var {
        new_var(self.value().neg(), self.node.requires_grad, Op::Neg(self.clone()))
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        let v = self.value().scale(c)?;
        Ok(new_var(v, self.node.requires_grad, Op::Scale(self.clone(), c)))
    }

    /// Broadcast multiplication by a rank-0 node.
    pub fn mul_scalar(&self, s: &Var) -> Result<Var> {
        let sv = s.value().scalar_value().map_err(|_| CoreError::ShapeMismatch {
            op: "mul_scalar",
            detail: format!("scalar operand has shape {:?}", s.shape()),
        })?;
        let v = self.value().scale(sv)?;
        Ok(new_var(v, self.rg2(s), Op::MulScalar(self.clone(), s.clone())))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let v = self.value().matmul(other.value())?;
        Ok(new_var(v, self.rg2(other), Op::Matmul(self.clone(), other.clone())))
    }

    pub fn matvec(&self, v: &Var) -> Result<Var> {
        let out = self.value().matvec(v.value())?;
        Ok(new_var(out, self.rg2(v), Op::Matvec(self.clone(), v.clone())))
    }

    pub fn outer(&self, v: &Var) -> Result<Var> {
        let out = self.value().outer(v.value())?;
        Ok(new_var(out, self.rg2(v), Op::Outer(self.clone(), v.clone())))
    }

    pub fn transpose(&self) -> Result<Var> {
        let v = self.value().transpose()?;
        Ok(new_var(v, self.node.requires_grad, Op::Transpose(self.clone())))
    }

    pub fn add_row(&self, row: &Var) -> Result<Var> {
        let v = self.value().add_row(row.value())?;
        Ok(new_var(v, self.rg2(row), Op::AddRow(self.clone(), row.clone())))
    }

    pub fn broadcast_rows(&self, m: usize) -> Result<Var> {
        let v = self.value().broadcast_rows(m)?;
        Ok(new_var(v, self.node.requires_grad, Op::BroadcastRows(self.clone())))
    }

    pub fn sum_axis0(&self) -> Result<Var> {
        let v = self.value().sum_axis0()?;
        Ok(new_var(v, self.node.requires_grad, Op::SumAxis0(self.clone())))
    }

    pub fn sin(&self) -> Var {
        new_var(self.value().sin(), self.node.requires_grad, Op::Sin(self.clone()))
    }

    pub fn cos(&self) -> Var {
        new_var(self.value().cos(), self.node.requires_grad, Op::Cos(self.clone()))
    }

    pub fn sigmoid(&self) -> Var {
        new_var(self.value().sigmoid(), self.node.requires_grad, Op::Sigmoid(self.clone()))
    }

    pub fn square(&self) -> Result<Var> {
        let v = self.value().square()?;
        Ok(new_var(v, self.node.requires_grad, Op::Square(self.clone())))
    }

    /// Sum of all entries as a rank-0 node.
    pub fn sum(&self) -> Result<Var> {
        let v = self.value().sum()?;
        Ok(new_var(v, self.node.requires_grad, Op::Sum(self.clone())))
    }

    /// Mean of all entries as a rank-0 node.
    pub fn mean(&self) -> Result<Var> {
        let n = self.value().len();
        if n == 0 {
            return Err(CoreError::Empty { what: "tensor in mean" });
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Broadcasts a rank-0 node to `shape`.
    pub fn spread(&self, shape: &[usize]) -> Result<Var> {
        let s = self.value().scalar_value().map_err(|_| CoreError::ShapeMismatch {
            op: "spread",
            detail: format!("expected rank 0, got shape {:?}", self.shape()),
        })?;
        let v = Tensor::filled(shape, s);
        Ok(new_var(v, self.node.requires_grad, Op::Spread(self.clone())))
    }

    /// Scalar inner product of two same-shaped nodes.
    pub fn dot(&self, other: &Var) -> Result<Var> {
        self.mul(other)?.sum()
    }

    fn parents(&self) -> Vec<&Var> {
        match &self.node.op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b)
            | Op::Matmul(a, b)
            | Op::Matvec(a, b)
            | Op::Outer(a, b)
            | Op::AddRow(a, b) => vec![a, b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::BroadcastRows(a)
            | Op::SumAxis0(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Spread(a) => vec![a],
        }
    }
}

/// Returns the forward value of a graph. Values are computed eagerly at
/// construction time, so this is a lookup; it exists to make the evaluation
/// contract (deterministic value for identical inputs) an explicit API.
pub fn eval_graph(root: &Var) -> Tensor {
    root.value().clone()
}

/// Nodes in reverse-sweep order: every node appears after all of its
/// (gradient-requiring) parents. Only gradient-requiring nodes are visited.
fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut visited: BTreeSet<u64> = BTreeSet::new();
    let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in v.parents() {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

fn accumulate(map: &mut BTreeMap<u64, Var>, parent: &Var, contrib: Var) -> Result<()> {
    if !parent.requires_grad() {
        return Ok(());
    }
    match map.remove(&parent.id()) {
        Some(existing) => {
            map.insert(parent.id(), existing.add(&contrib)?);
        }
        None => {
            map.insert(parent.id(), contrib);
        }
    }
    Ok(())
}

fn backward_node(node: &Var, g: &Var, map: &mut BTreeMap<u64, Var>) -> Result<()> {
    match &node.node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(map, a, g.clone())?;
            accumulate(map, b, g.clone())?;
        }
        Op::Sub(a, b) => {
            accumulate(map, a, g.clone())?;
            accumulate(map, b, g.neg())?;
        }
        Op::Mul(a, b) => {
            accumulate(map, a, g.mul(b)?)?;
            accumulate(map, b, g.mul(a)?)?;
        }
        Op::Neg(a) => accumulate(map, a, g.neg())?,
        Op::Scale(a, c) => accumulate(map, a, g.scale(*c)?)?,
        Op::MulScalar(a, s) => {
            accumulate(map, a, g.mul_scalar(s)?)?;
            accumulate(map, s, g.mul(a)?.sum()?)?;
        }
        Op::Matmul(a, b) => {
            accumulate(map, a, g.matmul(&b.transpose()?)?)?;
            accumulate(map, b, a.transpose()?.matmul(g)?)?;
        }
        Op::Matvec(a, v) => {
            accumulate(map, a, g.outer(v)?)?;
            accumulate(map, v, a.transpose()?.matvec(g)?)?;
        }
        Op::Outer(u, v) => {
            accumulate(map, u, g.matvec(v)?)?;
            accumulate(map, v, g.transpose()?.matvec(u)?)?;
        }
        Op::Transpose(a) => accumulate(map, a, g.transpose()?)?,
        Op::AddRow(a, r) => {
            accumulate(map, a, g.clone())?;
            accumulate(map, r, g.sum_axis0()?)?;
        }
        Op::BroadcastRows(r) => accumulate(map, r, g.sum_axis0()?)?,
        Op::SumAxis0(a) => {
            let m = a.shape()[0];
            accumulate(map, a, g.broadcast_rows(m)?)?;
        }
        Op::Sin(a) => accumulate(map, a, g.mul(&a.cos())?)?,
        Op::Cos(a) => accumulate(map, a, g.mul(&a.sin())?.neg())?,
        Op::Sigmoid(a) => {
            // d sigma = sigma * (1 - sigma), expressed through the output node.
            let one = Var::constant(Tensor::filled(node.shape(), 1.0));
            let d = node.mul(&one.sub(node)?)?;
            accumulate(map, a, g.mul(&d)?)?;
        }
        Op::Square(a) => accumulate(map, a, g.mul(a)?.scale(2.0)?)?,
        Op::Sum(a) => accumulate(map, a, g.spread(a.shape())?)?,
        Op::Spread(s) => accumulate(map, s, g.sum()?)?,
    }
    Ok(())
}

/// Reverse-mode gradients of a scalar root with respect to `wrt`.
///
/// The returned values are graph nodes, so an expression containing them can
/// be differentiated again (gradient-of-gradient). Nodes in `wrt` that the
/// root does not depend on receive a zero gradient. Every `wrt` node must
/// have been created with [`Var::param`] (or derive from one); asking for
/// the gradient of a non-differentiable leaf is a contract error.
pub fn gradient(root: &Var, wrt: &[&Var]) -> Result<Vec<Var>> {
    if !root.value().is_scalar() {
        return Err(CoreError::NonScalarRoot { shape: format!("{:?}", root.shape()) });
    }
    for w in wrt {
        if !w.requires_grad() {
            return Err(CoreError::InvalidParam {
                what: "wrt node",
                detail: "does not require gradients".into(),
            });
        }
    }
    let mut cot: BTreeMap<u64, Var> = BTreeMap::new();
    if root.requires_grad() {
        let order = topo_order(root);
        cot.insert(root.id(), Var::constant(Tensor::scalar(1.0)));
        for node in order.iter().rev() {
            let g = match cot.get(&node.id()) {
                Some(g) => g.clone(),
                None => continue,
            };
            backward_node(node, &g, &mut cot)?;
        }
    }
    Ok(wrt
        .iter()
        .map(|w| match cot.get(&w.id()) {
            Some(g) => g.clone(),
            None => Var::constant(Tensor::zeros(w.shape())),
        })
        .collect())
}

/// Central-difference gradient oracle: `(f(x + h e_i) - f(x - h e_i)) / 2h`
/// per coordinate. Lives here as an implementation-independent check for
/// [`gradient`]; tests across the crate compare against it.
pub fn finite_diff<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(CoreError::InvalidParam { what: "finite_diff step", detail: format!("h = {h}") });
    }
    let base = x.data();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.to_vec();
        plus[i] += h;
        let mut minus = base.to_vec();
        minus[i] -= h;
        let fp = f(&Tensor::from_vec(x.shape(), plus)?)?;
        let fm = f(&Tensor::from_vec(x.shape(), minus)?)?;
        let d = (fp - fm) / (2.0 * h);
        if !d.is_finite() {
            return Err(CoreError::NonFinite { op: "finite_diff" });
        }
        grad.push(d);
    }
    Tensor::from_vec(x.shape(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "expected {b}, got {a} (tol {tol})");
    }

    #[test]
    fn eval_constant() {
        let c = Var::constant(Tensor::scalar(3.0));
        assert_eq!(eval_graph(&c).scalar_value().unwrap(), 3.0);
    }

    #[test]
    fn eval_matmul_hand_value() {
        let a = Var::constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = Var::constant(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap());
        let c = a.matmul(&b).unwrap();
        assert_eq!(eval_graph(&c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn eval_sin_identity() {
        let x = Var::constant(Tensor::scalar(0.0));
        assert_eq!(x.sin().value().scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn eval_shape_mismatch_names_op() {
        let a = Var::constant(Tensor::zeros(&[2, 3]));
        let b = Var::constant(Tensor::zeros(&[2, 3]));
        match a.matmul(&b) {
            Err(CoreError::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn gradient_of_square() {
        let x = Var::param(Tensor::scalar(3.0));
        let y = x.square().unwrap();
        let g = gradient(&y, &[&x]).unwrap();
        assert_eq!(g[0].value().scalar_value().unwrap(), 6.0);
    }

    #[test]
    fn gradient_of_sin_at_zero() {
        let x = Var::param(Tensor::scalar(0.0));
        let y = x.sin();
        let g = gradient(&y, &[&x]).unwrap();
        assert_eq!(g[0].value().scalar_value().unwrap(), 1.0);
    }

    #[test]
    fn second_derivative_of_cube() {
        // d/dx (d/dx x^3) = 6x = 12 at x = 2.
        let x = Var::param(Tensor::scalar(2.0));
        let y = x.square().unwrap().mul(&x).unwrap();
        let g = gradient(&y, &[&x]).unwrap();
        let gg = gradient(&g[0], &[&x]).unwrap();
        assert_close(gg[0].value().scalar_value().unwrap(), 12.0, 1e-12);
    }

    #[test]
    fn gradient_rejects_non_scalar_root() {
        let x = Var::param(Tensor::zeros(&[2]));
        let y = x.square().unwrap();
        assert!(matches!(gradient(&y, &[&x]), Err(CoreError::NonScalarRoot { .. })));
    }

    #[test]
    fn unreachable_wrt_gets_zero_gradient() {
        let x = Var::param(Tensor::scalar(1.0));
        let z = Var::param(Tensor::from_vec(&[2], vec![5.0, -1.0]).unwrap());
        let y = x.square().unwrap();
        let g = gradient(&y, &[&z]).unwrap();
        assert_eq!(g[0].value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn finite_diff_on_quadratic() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert_close(g.scalar_value().unwrap(), 6.0, 1e-9);
    }

    #[test]
    fn finite_diff_on_constant() {
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = finite_diff(|_| Ok(7.5), &x, 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn finite_diff_on_sine() {
        let x = Tensor::scalar(1.0);
        let g = finite_diff(|t| Ok(t.data()[0].sin()), &x, 1e-5).unwrap();
        assert_close(g.scalar_value().unwrap(), 1.0_f64.cos(), 1e-9);
    }

    // ----- randomized oracle: gradient vs central differences -----

    /// Structure plan for a random graph, generated independently of the
    /// leaf values so the same graph can be rebuilt at perturbed inputs.
    #[derive(Clone, Debug)]
    enum Instr {
        Matmul(usize, usize),
        Add(usize, usize),
        ScalarMul(usize, f64),
        Sin(usize),
        Sigmoid(usize),
        Square(usize),
    }

    struct Plan {
        leaf_shapes: Vec<Vec<usize>>,
        instrs: Vec<Instr>,
    }

    fn random_plan(rng: &mut ChaCha8Rng) -> Plan {
        // Square matrices of one size keep every binary op shape-compatible.
        let n = rng.gen_range(1..=3usize);
        let n_leaves = rng.gen_range(2..=3usize);
        let leaf_shapes = vec![vec![n, n]; n_leaves];
        let n_ops = rng.gen_range(3..=8usize);
        let mut instrs = Vec::new();
        for k in 0..n_ops {
            let avail = n_leaves + k;
            let a = rng.gen_range(0..avail);
            let b = rng.gen_range(0..avail);
            let instr = match rng.gen_range(0..6u32) {
                0 => Instr::Matmul(a, b),
                1 => Instr::Add(a, b),
                2 => Instr::ScalarMul(a, rng.gen_range(-1.5..1.5)),
                3 => Instr::Sin(a),
                4 => Instr::Sigmoid(a),
                _ => Instr::Square(a),
            };
            instrs.push(instr);
        }
        Plan { leaf_shapes, instrs }
    }

    /// Rebuilds the planned graph on the given leaves and reduces to the sum
    /// of every intermediate node, a scalar that depends on all of them.
    fn run_plan(plan: &Plan, leaves: &[Var]) -> Result<Var> {
        let mut pool: Vec<Var> = leaves.to_vec();
        for instr in &plan.instrs {
            let v = match instr {
                Instr::Matmul(a, b) => pool[*a].matmul(&pool[*b])?,
                Instr::Add(a, b) => pool[*a].add(&pool[*b])?,
                Instr::ScalarMul(a, c) => pool[*a].scale(*c)?,
                Instr::Sin(a) => pool[*a].sin(),
                Instr::Sigmoid(a) => pool[*a].sigmoid(),
                Instr::Square(a) => pool[*a].square()?,
            };
            pool.push(v);
        }
        let mut total = pool[0].sum()?;
        for v in &pool[1..] {
            total = total.add(&v.sum()?)?;
        }
        Ok(total)
    }

    fn random_leaf(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-0.8..0.8)).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(20240915);
        for _ in 0..100 {
            let plan = random_plan(&mut rng);
            let leaf_values: Vec<Tensor> =
                plan.leaf_shapes.iter().map(|s| random_leaf(s, &mut rng)).collect();
            let leaves: Vec<Var> = leaf_values.iter().map(|t| Var::param(t.clone())).collect();
            let root = run_plan(&plan, &leaves).unwrap();
            let refs: Vec<&Var> = leaves.iter().collect();
            let grads = gradient(&root, &refs).unwrap();

            for (li, leaf_value) in leaf_values.iter().enumerate() {
                let fd = finite_diff(
                    |t| {
                        let leaves: Vec<Var> = leaf_values
                            .iter()
                            .enumerate()
                            .map(|(j, lv)| {
                                Var::param(if j == li { t.clone() } else { lv.clone() })
                            })
                            .collect();
                        run_plan(&plan, &leaves)?.value().scalar_value()
                    },
                    leaf_value,
                    1e-5,
                )
                .unwrap();
                for (a, e) in grads[li].value().data().iter().zip(fd.data().iter()) {
                    assert!(
                        (a - e).abs() <= 1e-6 * (1.0 + e.abs()),
                        "gradient {a} vs finite difference {e}"
                    );
                }
            }
        }
    }

    #[test]
    fn hessian_vector_product_matches_finite_differences() {
        // f(x) = sum(sin(x)^2); HVP against fd of the first gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = Tensor::from_fn(&[5], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let v = Tensor::from_fn(&[5], |_| rng.gen_range(-1.0..1.0)).unwrap();

        let x = Var::param(x0.clone());
        let f = x.sin().square().unwrap().sum().unwrap();
        let grad = gradient(&f, &[&x]).unwrap();
        let gv = grad[0].dot(&Var::constant(v.clone())).unwrap();
        let hvp = gradient(&gv, &[&x]).unwrap();

        // (grad f(x + h v) - grad f(x - h v)) / 2h
        let h = 1e-5;
        let grad_at = |pt: &Tensor| -> Tensor {
            let x = Var::param(pt.clone());
            let f = x.sin().square().unwrap().sum().unwrap();
            gradient(&f, &[&x]).unwrap()[0].value().clone()
        };
        let xp = x0.add(&v.scale(h).unwrap()).unwrap();
        let xm = x0.sub(&v.scale(h).unwrap()).unwrap();
        let fd = grad_at(&xp).sub(&grad_at(&xm)).unwrap().scale(1.0 / (2.0 * h)).unwrap();

        for (a, e) in hvp[0].value().data().iter().zip(fd.data().iter()) {
            assert!((a - e).abs() <= 1e-5 * (1.0 + e.abs()), "hvp {a} vs fd {e}");
        }
        // Analytic cross-check: H v = 2 cos(2x) * v.
        for i in 0..5 {
            let expect = 2.0 * (2.0 * x0.data()[i]).cos() * v.data()[i];
            assert_close(hvp[0].value().data()[i], expect, 1e-9);
        }
    }

    #[test]
    fn gradient_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Tensor::from_fn(&[2, 2], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let (a, b) = (1.7, -0.4);

        let build_f = |x: &Var| x.sin().square().unwrap().sum().unwrap();
        let build_g = |x: &Var| x.matmul(x).unwrap().sum().unwrap();

        let x = Var::param(x0.clone());
        let combined = build_f(&x).scale(a).unwrap().add(&build_g(&x).scale(b).unwrap()).unwrap();
        let gc = gradient(&combined, &[&x]).unwrap();

        let x2 = Var::param(x0.clone());
        let gf = gradient(&build_f(&x2), &[&x2]).unwrap();
        let gg = gradient(&build_g(&x2), &[&x2]).unwrap();
        let expect = gf[0].value().scale(a).unwrap().add(&gg[0].value().scale(b).unwrap()).unwrap();

        for (u, v) in gc[0].value().data().iter().zip(expect.data().iter()) {
            assert_close(*u, *v, 1e-12);
        }
    }

    #[test]
    fn nonfinite_result_is_an_error() {
        let x = Var::constant(Tensor::filled(&[2], 1e308));
        assert!(matches!(x.add(&x), Err(CoreError::NonFinite { op: "add" })));
    }
}
