use std::sync::Arc;

use rand::Rng;

use super::{shape_err, sigmoid, Gradients, NumError, ParamId, ParamStore, Real};

/// Smallest probability a target may receive before its log is clamped.
pub const PROB_FLOOR: f64 = 1e-10;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Param(ParamId),
    Row { table: ParamId, row: usize },
    Linear { w: Var, x: Var, b: Option<Var> },
    MatMulNt { a: Var, w: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Dot(Var, Var),
    AdditiveScores { query: Var, keys: Var, score: Var },
    Softmax(Var),
    WeightedRows { weights: Var, rows: Var },
    Mask(Var, Vec<F>),
    Sum(Var),
    Affine(Vec<(Var, F)>),
    CopyNll(Box<CopyNll>),
    BceLogit { logit: Var, target: F },
}

#[derive(Debug, Clone)]
struct CopyNll {
    gen: Var,
    copy: Var,
    gen_allowed: Option<Arc<[bool]>>,
    copy_allowed: Option<Arc<[bool]>>,
    target_gen: Option<usize>,
    target_copy: Vec<usize>,
    clamped: bool,
}

#[derive(Debug, Clone)]
struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Parameters are read in place from the borrowed [`ParamStore`]; each
/// parameter gets at most one node per tape. Inputs always precede the nodes
/// that consume them, so a single reverse sweep is a topological order.
pub struct Tape<'p, F: Real> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_nodes: Vec<Option<Var>>,
    unreachable_targets: usize,
}

impl<'p, F: Real> Tape<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: vec![None; params.len()], unreachable_targets: 0 }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of loss terms whose target had (numerically) zero probability.
    pub fn unreachable_targets(&self) -> usize {
        self.unreachable_targets
    }

    pub fn value(&self, v: Var) -> &[F] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(p) => self.params.get(p).data(),
            _ => &node.value,
        }
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].shape.iter().product()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || shape.iter().product::<usize>() == value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var, NumError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err("constant", &shape, data.len()));
        }
        Ok(self.push(shape, data, Op::Leaf))
    }

    pub fn vector(&mut self, data: Vec<F>) -> Var {
        let n = data.len();
        self.push(vec![n], data, Op::Leaf)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.vector(vec![F::zero(); n])
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let shape = self.params.get(id).shape().to_vec();
        let v = self.push(shape, Vec::new(), Op::Param(id));
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// Row `row` of a 2-D parameter (embedding lookup).
    pub fn row(&mut self, table: ParamId, row: usize) -> Result<Var, NumError> {
        let t = self.params.get(table);
        let [rows, cols] = two_d(t.shape()).ok_or_else(|| shape_err("row", "2-D table", t.shape()))?;
        if row >= rows {
            return Err(shape_err("row", format!("row < {rows}"), row));
        }
        let value = t.data()[row * cols..(row + 1) * cols].to_vec();
        Ok(self.push(vec![cols], value, Op::Row { table, row }))
    }

    /// `w · x (+ b)` for `w: [out, in]`, `x: [in]`, `b: [out]`.
    pub fn linear(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var, NumError> {
        let [out, inp] = two_d(self.shape(w)).ok_or_else(|| shape_err("linear", "2-D weight", self.shape(w)))?;
        if self.numel(x) != inp {
            return Err(shape_err("linear", inp, self.numel(x)));
        }
        if let Some(b) = b {
            if self.numel(b) != out {
                return Err(shape_err("linear bias", out, self.numel(b)));
            }
        }
        let wv = self.value(w);
        let xv = self.value(x);
        let mut value: Vec<F> = wv.chunks_exact(inp).map(|row| dot(row, xv)).collect();
        if let Some(b) = b {
            value.iter_mut().zip(self.value(b)).for_each(|(y, &bb)| *y += bb);
        }
        Ok(self.push(vec![out], value, Op::Linear { w, x, b }))
    }

    /// `a · wᵀ` for `a: [n, d]`, `w: [k, d]`, giving `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, w: Var) -> Result<Var, NumError> {
        let [n, d] = two_d(self.shape(a)).ok_or_else(|| shape_err("matmul_nt", "2-D lhs", self.shape(a)))?;
        let [k, d2] = two_d(self.shape(w)).ok_or_else(|| shape_err("matmul_nt", "2-D rhs", self.shape(w)))?;
        if d != d2 {
            return Err(shape_err("matmul_nt", d, d2));
        }
        let av = self.value(a);
        let wv = self.value(w);
        let mut value = Vec::with_capacity(n * k);
        for arow in av.chunks_exact(d) {
            value.extend(wv.chunks_exact(d).map(|wrow| dot(arow, wrow)));
        }
        Ok(self.push(vec![n, k], value, Op::MatMulNt { a, w }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumError> {
        if self.numel(a) != self.numel(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Var {
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn map(&mut self, a: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), F::tanh)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        if parts.is_empty() {
            return Err(NumError::EmptySource { op: "concat" });
        }
        let mut value = Vec::new();
        for &p in parts {
            value.extend_from_slice(self.value(p));
        }
        let n = value.len();
        Ok(self.push(vec![n], value, Op::Concat(parts.to_vec())))
    }

    /// Stacks equally sized vectors into a `[n, d]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var, NumError> {
        let first = *rows.first().ok_or(NumError::EmptySource { op: "stack_rows" })?;
        let d = self.numel(first);
        let mut value = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if self.numel(r) != d {
                return Err(shape_err("stack_rows", d, self.numel(r)));
            }
            value.extend_from_slice(self.value(r));
        }
        Ok(self.push(vec![rows.len(), d], value, Op::StackRows(rows.to_vec())))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("dot", a, b)?;
        let v = dot(self.value(a), self.value(b));
        Ok(self.push(vec![1], vec![v], Op::Dot(a, b)))
    }

    /// `s_i = score · tanh(query + keys_i)` for projected query `[a]` and keys `[n, a]`.
    pub fn additive_scores(&mut self, query: Var, keys: Var, score: Var) -> Result<Var, NumError> {
        let a = self.numel(query);
        let [n, a2] = two_d(self.shape(keys)).ok_or_else(|| shape_err("additive_scores", "2-D keys", self.shape(keys)))?;
        if a != a2 || self.numel(score) != a {
            return Err(shape_err("additive_scores", [a, a], [a2, self.numel(score)]));
        }
        let (q, k, s) = (self.value(query), self.value(keys), self.value(score));
        let value = k
            .chunks_exact(a)
            .map(|krow| krow.iter().zip(q).zip(s).map(|((&kk, &qq), &ss)| ss * (qq + kk).tanh()).sum())
            .collect();
        Ok(self.push(vec![n], value, Op::AdditiveScores { query, keys, score }))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = super::softmax(self.value(a));
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Softmax(a))
    }

    /// `Σ_i weights_i · rows_i` for `weights: [n]`, `rows: [n, d]`.
    pub fn weighted_rows(&mut self, weights: Var, rows: Var) -> Result<Var, NumError> {
        let [n, d] = two_d(self.shape(rows)).ok_or_else(|| shape_err("weighted_rows", "2-D rows", self.shape(rows)))?;
        if self.numel(weights) != n {
            return Err(shape_err("weighted_rows", n, self.numel(weights)));
        }
        let mut value = vec![F::zero(); d];
        for (&w, r) in self.value(weights).iter().zip(self.value(rows).chunks_exact(d)) {
            value.iter_mut().zip(r).for_each(|(o, &x)| *o += w * x);
        }
        Ok(self.push(vec![d], value, Op::WeightedRows { weights, rows }))
    }

    /// Multiplies by a constant mask of the same length.
    pub fn mask(&mut self, a: Var, mask: Vec<F>) -> Result<Var, NumError> {
        if mask.len() != self.numel(a) {
            return Err(shape_err("mask", self.numel(a), mask.len()));
        }
        let value = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, Op::Mask(a, mask)))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let n = self.numel(a);
        self.mask(a, vec![factor; n]).expect("mask length matches by construction")
    }

    /// Inverted dropout; identity when not training or when `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: F, training: bool, rng: &mut R) -> Result<Var, NumError> {
        if !(rate >= F::zero() && rate < F::one()) {
            return Err(NumError::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if !training || rate == F::zero() {
            return Ok(a);
        }
        let mask = super::layers::dropout_mask(self.numel(a), rate, rng);
        self.mask(a, mask)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().copied().sum();
        self.push(vec![1], vec![v], Op::Sum(a))
    }

    /// `Σ c_i · x_i` over equally shaped inputs, summed left to right.
    pub fn affine(&mut self, terms: &[(Var, F)]) -> Result<Var, NumError> {
        let &(first, _) = terms.first().ok_or(NumError::EmptySource { op: "affine" })?;
        let n = self.numel(first);
        let mut value = vec![F::zero(); n];
        for &(v, c) in terms {
            if self.numel(v) != n {
                return Err(shape_err("affine", n, self.numel(v)));
            }
            value.iter_mut().zip(self.value(v)).for_each(|(o, &x)| *o += c * x);
        }
        let shape = self.shape(first).to_vec();
        Ok(self.push(shape, value, Op::Affine(terms.to_vec())))
    }

    pub fn mean(&mut self, terms: &[Var]) -> Result<Var, NumError> {
        if terms.is_empty() {
            return Err(NumError::EmptySource { op: "mean" });
        }
        let c = F::one() / F::of(terms.len() as f64);
        let weighted: Vec<_> = terms.iter().map(|&v| (v, c)).collect();
        self.affine(&weighted)
    }

    /// Negative log-probability of a target under the joint generate/copy softmax.
    ///
    /// `target_gen` indexes `gen`; `target_copy` lists the copy positions carrying
    /// the target token. Disallowed entries take no probability mass. A target
    /// with probability below [`PROB_FLOOR`] is clamped and counted as unreachable.
    #[allow(clippy::too_many_arguments)]
    pub fn copy_nll(
        &mut self,
        gen: Var,
        copy: Option<Var>,
        gen_allowed: Option<Arc<[bool]>>,
        copy_allowed: Option<Arc<[bool]>>,
        target_gen: Option<usize>,
        target_copy: Vec<usize>,
    ) -> Result<Var, NumError> {
        let copy = match copy {
            Some(c) => c,
            None => self.vector(Vec::new()),
        };
        let (nv, nc) = (self.numel(gen), self.numel(copy));
        if gen_allowed.as_ref().is_some_and(|m| m.len() != nv) {
            return Err(shape_err("copy_nll gen mask", nv, gen_allowed.map_or(0, |m| m.len())));
        }
        if copy_allowed.as_ref().is_some_and(|m| m.len() != nc) {
            return Err(shape_err("copy_nll copy mask", nc, copy_allowed.map_or(0, |m| m.len())));
        }
        if target_gen.is_some_and(|t| t >= nv) || target_copy.iter().any(|&t| t >= nc) {
            return Err(shape_err("copy_nll target", (nv, nc), (target_gen, &target_copy)));
        }
        let mut nll = CopyNll { gen, copy, gen_allowed, copy_allowed, target_gen, target_copy, clamped: false };
        let stats = copy_stats(&nll, self.value(gen), self.value(copy))?;
        let floor = F::of(PROB_FLOOR);
        let loss = if stats.target / stats.total < floor {
            nll.clamped = true;
            self.unreachable_targets += 1;
            -floor.ln()
        } else {
            stats.total.ln() - stats.target.ln()
        };
        Ok(self.push(vec![1], vec![loss], Op::CopyNll(Box::new(nll))))
    }

    /// Binary cross-entropy of `sigmoid(logit)` against a 0/1 target, computed stably.
    pub fn bce_with_logit(&mut self, logit: Var, target: F) -> Result<Var, NumError> {
        if self.numel(logit) != 1 {
            return Err(shape_err("bce_with_logit", 1, self.numel(logit)));
        }
        let x = self.scalar(logit);
        let loss = x.max(F::zero()) - x * target + (F::one() + (-x.abs()).exp()).ln();
        Ok(self.push(vec![1], vec![loss], Op::BceLogit { logit, target }))
    }

    /// Reverse sweep from a scalar loss; returns gradients for every reached
    /// parameter that has `requires_grad` set.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, NumError> {
        if self.numel(loss) != 1 {
            return Err(NumError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = Gradients::new(self.params.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => {
                    let t = self.params.get(*p);
                    if t.requires_grad {
                        add_into(out.buffer(*p, t.len()), &g);
                    }
                }
                Op::Row { table, row } => {
                    let t = self.params.get(*table);
                    if t.requires_grad {
                        let cols = g.len();
                        let buf = out.buffer(*table, t.len());
                        add_into(&mut buf[row * cols..(row + 1) * cols], &g);
                    }
                }
                Op::Linear { w, x, b } => {
                    let (wv, xv) = (self.value(*w), self.value(*x));
                    let inp = xv.len();
                    {
                        let gx = acc(&mut grads, &self.nodes, *x);
                        for (row, &gi) in wv.chunks_exact(inp).zip(&g) {
                            gx.iter_mut().zip(row).for_each(|(o, &ww)| *o += gi * ww);
                        }
                    }
                    {
                        let gw = acc(&mut grads, &self.nodes, *w);
                        for (grow, &gi) in gw.chunks_exact_mut(inp).zip(&g) {
                            if gi != F::zero() {
                                grow.iter_mut().zip(xv).for_each(|(o, &xx)| *o += gi * xx);
                            }
                        }
                    }
                    if let Some(b) = b {
                        add_into(acc(&mut grads, &self.nodes, *b), &g);
                    }
                }
                Op::MatMulNt { a, w } => {
                    let (av, wv) = (self.value(*a), self.value(*w));
                    let d = self.shape(*a)[1];
                    let k = self.shape(*w)[0];
                    {
                        let ga = acc(&mut grads, &self.nodes, *a);
                        for (garow, grow) in ga.chunks_exact_mut(d).zip(g.chunks_exact(k)) {
                            for (&gi, wrow) in grow.iter().zip(wv.chunks_exact(d)) {
                                garow.iter_mut().zip(wrow).for_each(|(o, &ww)| *o += gi * ww);
                            }
                        }
                    }
                    {
                        let gw = acc(&mut grads, &self.nodes, *w);
                        for (arow, grow) in av.chunks_exact(d).zip(g.chunks_exact(k)) {
                            for (gwrow, &gi) in gw.chunks_exact_mut(d).zip(grow) {
                                gwrow.iter_mut().zip(arow).for_each(|(o, &aa)| *o += gi * aa);
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, &self.nodes, *a), &g);
                    add_into(acc(&mut grads, &self.nodes, *b), &g);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, &self.nodes, *a), &g);
                    acc(&mut grads, &self.nodes, *b).iter_mut().zip(&g).for_each(|(o, &gi)| *o -= gi);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, &self.nodes, *a)
                        .iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(o, (&gi, &bb))| *o += gi * bb);
                    acc(&mut grads, &self.nodes, *b)
                        .iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(o, (&gi, &aa))| *o += gi * aa);
                }
                Op::Sigmoid(a) => {
                    acc(&mut grads, &self.nodes, *a)
                        .iter_mut()
                        .zip(g.iter().zip(&node.value))
                        .for_each(|(o, (&gi, &y))| *o += gi * y * (F::one() - y));
                }
                Op::Tanh(a) => {
                    acc(&mut grads, &self.nodes, *a)
                        .iter_mut()
                        .zip(g.iter().zip(&node.value))
                        .for_each(|(o, (&gi, &y))| *o += gi * (F::one() - y * y));
                }
                Op::Concat(parts) | Op::StackRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.numel(p);
                        add_into(acc(&mut grads, &self.nodes, p), &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let g0 = g[0];
                    acc(&mut grads, &self.nodes, *a).iter_mut().zip(bv).for_each(|(o, &bb)| *o += g0 * bb);
                    acc(&mut grads, &self.nodes, *b).iter_mut().zip(av).for_each(|(o, &aa)| *o += g0 * aa);
                }
                Op::AdditiveScores { query, keys, score } => {
                    let (q, k, s) = (self.value(*query), self.value(*keys), self.value(*score));
                    let a = q.len();
                    let mut gq = vec![F::zero(); a];
                    let mut gs = vec![F::zero(); a];
                    let mut gk = vec![F::zero(); k.len()];
                    for ((krow, gkrow), &gi) in k.chunks_exact(a).zip(gk.chunks_exact_mut(a)).zip(&g) {
                        for j in 0..a {
                            let t = (q[j] + krow[j]).tanh();
                            gs[j] += gi * t;
                            let dt = gi * s[j] * (F::one() - t * t);
                            gq[j] += dt;
                            gkrow[j] += dt;
                        }
                    }
                    add_into(acc(&mut grads, &self.nodes, *query), &gq);
                    add_into(acc(&mut grads, &self.nodes, *keys), &gk);
                    add_into(acc(&mut grads, &self.nodes, *score), &gs);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let inner: F = g.iter().zip(y).map(|(&gi, &yi)| gi * yi).sum();
                    acc(&mut grads, &self.nodes, *a)
                        .iter_mut()
                        .zip(g.iter().zip(y))
                        .for_each(|(o, (&gi, &yi))| *o += yi * (gi - inner));
                }
                Op::WeightedRows { weights, rows } => {
                    let (wv, rv) = (self.value(*weights), self.value(*rows));
                    let d = g.len();
                    {
                        let gw = acc(&mut grads, &self.nodes, *weights);
                        for (o, r) in gw.iter_mut().zip(rv.chunks_exact(d)) {
                            *o += dot(r, &g);
                        }
                    }
                    let gr = acc(&mut grads, &self.nodes, *rows);
                    for (grow, &w) in gr.chunks_exact_mut(d).zip(wv) {
                        grow.iter_mut().zip(&g).for_each(|(o, &gi)| *o += w * gi);
                    }
                }
                Op::Mask(a, m) => {
                    acc(&mut grads, &self.nodes, *a)
                        .iter_mut()
                        .zip(g.iter().zip(m))
                        .for_each(|(o, (&gi, &mm))| *o += gi * mm);
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    acc(&mut grads, &self.nodes, *a).iter_mut().for_each(|o| *o += g0);
                }
                Op::Affine(terms) => {
                    for &(v, c) in terms {
                        acc(&mut grads, &self.nodes, v).iter_mut().zip(&g).for_each(|(o, &gi)| *o += c * gi);
                    }
                }
                Op::CopyNll(nll) => {
                    if nll.clamped {
                        continue;
                    }
                    let (gv, cv) = (self.value(nll.gen), self.value(nll.copy));
                    let stats = copy_stats(nll, gv, cv)?;
                    let g0 = g[0];
                    let allowed = |mask: &Option<Arc<[bool]>>, i: usize| mask.as_ref().is_none_or(|m| m[i]);
                    let mut dgen = vec![F::zero(); gv.len()];
                    for (i, (o, &s)) in dgen.iter_mut().zip(gv).enumerate() {
                        if allowed(&nll.gen_allowed, i) {
                            let e = (s - stats.max).exp();
                            let mut d = e / stats.total;
                            if nll.target_gen == Some(i) {
                                d -= e / stats.target;
                            }
                            *o = g0 * d;
                        }
                    }
                    let mut dcopy = vec![F::zero(); cv.len()];
                    for (i, (o, &s)) in dcopy.iter_mut().zip(cv).enumerate() {
                        if allowed(&nll.copy_allowed, i) {
                            let e = (s - stats.max).exp();
                            let mut d = e / stats.total;
                            if nll.target_copy.contains(&i) {
                                d -= e / stats.target;
                            }
                            *o = g0 * d;
                        }
                    }
                    add_into(acc(&mut grads, &self.nodes, nll.gen), &dgen);
                    if !cv.is_empty() {
                        add_into(acc(&mut grads, &self.nodes, nll.copy), &dcopy);
                    }
                }
                Op::BceLogit { logit, target } => {
                    let x = self.scalar(*logit);
                    let d = g[0] * (sigmoid(x) - *target);
                    acc(&mut grads, &self.nodes, *logit)[0] += d;
                }
            }
        }
        Ok(out)
    }
}

struct CopyStats<F> {
    max: F,
    total: F,
    target: F,
}

fn copy_stats<F: Real>(nll: &CopyNll, gen: &[F], copy: &[F]) -> Result<CopyStats<F>, NumError> {
    let gen_ok = |i: usize| nll.gen_allowed.as_ref().is_none_or(|m| m[i]);
    let copy_ok = |i: usize| nll.copy_allowed.as_ref().is_none_or(|m| m[i]);
    let allowed_gen = gen.iter().enumerate().filter(|&(i, _)| gen_ok(i));
    let allowed_copy = copy.iter().enumerate().filter(|&(i, _)| copy_ok(i));
    if allowed_gen.clone().chain(allowed_copy.clone()).any(|(_, s)| s.is_nan()) {
        let nan = F::nan();
        return Ok(CopyStats { max: nan, total: nan, target: nan });
    }
    let max = allowed_gen
        .clone()
        .chain(allowed_copy.clone())
        .map(|(_, &s)| s)
        .fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return Err(NumError::EmptySource { op: "copy_nll" });
    }
    let total = allowed_gen.chain(allowed_copy).map(|(_, &s)| (s - max).exp()).sum();
    let mut target = F::zero();
    if let Some(t) = nll.target_gen.filter(|&t| gen_ok(t)) {
        target += (gen[t] - max).exp();
    }
    for &t in nll.target_copy.iter().filter(|&&t| copy_ok(t)) {
        target += (copy[t] - max).exp();
    }
    Ok(CopyStats { max, total, target })
}

fn two_d(shape: &[usize]) -> Option<[usize; 2]> {
    match shape {
        [r, c] => Some([*r, *c]),
        _ => None,
    }
}

pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn acc<'g, F: Real>(grads: &'g mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var) -> &'g mut Vec<F> {
    let n = nodes[v.0].shape.iter().product();
    grads[v.0].get_or_insert_with(|| vec![F::zero(); n])
}
