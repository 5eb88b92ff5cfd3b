use super::ops::{gelu_grad_scalar, gelu_scalar, matmul, row_moments, softmax_slice};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<F: Real> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: F },
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    GroupMean { x: Var, groups: Vec<usize> },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>> },
    Focal { logits: Var, labels: Vec<usize>, alpha: Vec<F>, gamma: F },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    tracked: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so a single
/// backwards sweep over the node list visits every consumer before its inputs.
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

/// Gradients of a scalar with respect to every tracked node.
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input. Gradients flow to it.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that is never differentiated.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.push(value, op, tracked)
    }

    fn val(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.val(a), self.val(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).add(self.val(b))?;
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.val(x), self.val(bias));
        if bv.len() != xv.cols() {
            return Err(Error::dim(
                "add_bias",
                format!("{} columns, bias of {}", xv.cols(), bv.len()),
            ));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        Ok(self.derived(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_map(self.val(b), "mul", |x, y| x * y)?;
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.val(x).scale(s);
        self.derived(out, Op::Scale(x, s), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.val(x).map(gelu_scalar);
        self.derived(out, Op::Gelu(x), &[x])
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        let xv = self.val(x);
        if causal && xv.rows() > xv.cols() {
            return Err(Error::dim(
                "softmax_rows",
                format!("causal mask needs rows <= cols, got {:?}", xv.shape()),
            ));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            if causal {
                softmax_slice(&mut row[..=r]);
                for v in &mut row[r + 1..] {
                    *v = F::zero();
                }
            } else {
                softmax_slice(row);
            }
        }
        Ok(self.derived(out, Op::Softmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let out = super::layer_norm_rows(self.val(x), self.val(gain).data(), self.val(bias).data(), eps)?;
        Ok(self.derived(out, Op::LayerNorm { x, gain, bias, eps }, &[x, gain, bias]))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.val(x).transpose();
        self.derived(out, Op::Transpose(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.val(x);
        let c = xv.cols();
        if start + width > c {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} of {c}", start + width),
            ));
        }
        let mut data = Vec::with_capacity(xv.rows() * width);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let out = Tensor::new(vec![xv.rows(), width], data)?;
        Ok(self.derived(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.concat_check(parts, true)?;
        let total: usize = parts.iter().map(|p| self.val(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.val(*p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.derived(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.concat_check(parts, false)?;
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.val(*p).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.derived(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    fn concat_check(&self, parts: &[Var], by_cols: bool) -> Result<usize> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let shared = |t: &Tensor<F>| if by_cols { t.rows() } else { t.cols() };
        let n = shared(self.val(*first));
        if parts.iter().any(|p| shared(self.val(*p)) != n) {
            return Err(Error::dim("concat", "inputs disagree on the shared axis"));
        }
        Ok(n)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.val(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::dim(
                "gather_rows",
                format!("index {bad} out of {} rows", tv.rows()),
            ));
        }
        let c = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        Ok(self.derived(out, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// Averages consecutive row groups: output row `g` is the mean of the
    /// next `groups[g]` input rows. Groups must cover every row.
    pub fn group_mean(&mut self, x: Var, groups: &[usize]) -> Result<Var> {
        let xv = self.val(x);
        if groups.iter().sum::<usize>() != xv.rows() || groups.contains(&0) {
            return Err(Error::dim(
                "group_mean",
                format!("groups {groups:?} do not tile {} rows", xv.rows()),
            ));
        }
        let c = xv.cols();
        let mut out = Tensor::zeros(&[groups.len(), c]);
        let mut r = 0;
        for (g, &size) in groups.iter().enumerate() {
            let inv = F::one() / F::from_usize(size);
            for _ in 0..size {
                let src = xv.row(r);
                for (o, &v) in out.row_mut(g).iter_mut().zip(src) {
                    *o = *o + v * inv;
                }
                r += 1;
            }
        }
        Ok(self.derived(out, Op::GroupMean { x, groups: groups.to_vec() }, &[x]))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.val(x).rows();
        self.group_mean(x, &[n])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.val(x).sum());
        self.derived(out, Op::Sum(x), &[x])
    }

    /// Mean softmax cross-entropy over rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.val(logits);
        self.check_targets("cross_entropy", lv, targets.iter().flatten().copied(), targets.len())?;
        let count = targets.iter().flatten().count();
        let mut total = F::zero();
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let mut p = lv.row(r).to_vec();
                softmax_slice(&mut p);
                total = total - p[*t].max(F::from_f64(PROB_FLOOR)).ln();
            }
        }
        let value = if count == 0 { F::zero() } else { total / F::from_usize(count) };
        Ok(self.derived(
            Tensor::scalar(value),
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            &[logits],
        ))
    }

    /// Class-weighted focal loss averaged over rows:
    /// `-(1/n) sum alpha_y (1 - p_y)^gamma log p_y`.
    pub fn focal(&mut self, logits: Var, labels: &[usize], alpha: &[F], gamma: F) -> Result<Var> {
        let lv = self.val(logits);
        self.check_targets("focal", lv, labels.iter().copied(), labels.len())?;
        if alpha.len() != lv.cols() {
            return Err(Error::dim(
                "focal",
                format!("{} classes, {} weights", lv.cols(), alpha.len()),
            ));
        }
        let mut total = F::zero();
        for (r, &y) in labels.iter().enumerate() {
            let mut p = lv.row(r).to_vec();
            softmax_slice(&mut p);
            total = total + focal_term(p[y], alpha[y], gamma);
        }
        let value = if labels.is_empty() {
            F::zero()
        } else {
            total / F::from_usize(labels.len())
        };
        Ok(self.derived(
            Tensor::scalar(value),
            Op::Focal {
                logits,
                labels: labels.to_vec(),
                alpha: alpha.to_vec(),
                gamma,
            },
            &[logits],
        ))
    }

    fn check_targets(
        &self,
        op: &'static str,
        logits: &Tensor<F>,
        mut targets: impl Iterator<Item = usize>,
        n: usize,
    ) -> Result<()> {
        if n != logits.rows() {
            return Err(Error::dim(
                op,
                format!("{} rows of logits, {n} targets", logits.rows()),
            ));
        }
        if let Some(bad) = targets.find(|&t| t >= logits.cols()) {
            return Err(Error::dim(
                op,
                format!("target {bad} out of {} classes", logits.cols()),
            ));
        }
        Ok(())
    }

    /// Gradients of the scalar node `loss` with respect to all tracked nodes.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.val(loss).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got {:?}", self.val(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.val(loss).shape(), F::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(
        &self,
        node: &Node<F>,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<F>| -> Result<()> {
            if !self.nodes[v.0].tracked {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.nodes[a.0].tracked {
                    acc(*a, matmul(g, &bv.transpose())?)?;
                }
                if self.nodes[b.0].tracked {
                    acc(*b, matmul(&av.transpose(), g)?)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::AddBias(x, bias) => {
                acc(*x, g.clone())?;
                let bshape = self.val(*bias).shape().to_vec();
                let mut gb = Tensor::zeros(&bshape);
                for r in 0..g.rows() {
                    for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                acc(*bias, gb)?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(*a, g.zip_map(bv, "mul", |x, y| x * y)?)?;
                acc(*b, g.zip_map(av, "mul", |x, y| x * y)?)?;
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s))?,
            Op::Gelu(x) => {
                let d = self.val(*x).map(gelu_grad_scalar);
                acc(*x, g.zip_map(&d, "gelu", |a, b| a * b)?)?;
            }
            Op::Softmax(x) => {
                // Masked entries have y = 0 and so receive no gradient.
                let y = &node.value;
                let mut gx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, gx)?;
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.val(*x);
                let gain_v = self.val(*gain).data();
                let c = xv.cols();
                let n = F::from_usize(c);
                let mut gx = Tensor::zeros(xv.shape());
                let mut gg = vec![F::zero(); c];
                let mut gbias = vec![F::zero(); c];
                for r in 0..xv.rows() {
                    let (mean, inv) = row_moments(xv.row(r), *eps);
                    let xhat: Vec<F> = xv.row(r).iter().map(|&v| (v - mean) * inv).collect();
                    let gr = g.row(r);
                    let gh: Vec<F> = (0..c).map(|j| gr[j] * gain_v[j]).collect();
                    let mean_gh = gh.iter().copied().sum::<F>() / n;
                    let mean_ghx = gh.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<F>() / n;
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = inv * (gh[j] - mean_gh - xhat[j] * mean_ghx);
                        gg[j] = gg[j] + gr[j] * xhat[j];
                        gbias[j] = gbias[j] + gr[j];
                    }
                }
                acc(*x, gx)?;
                let gshape = self.val(*gain).shape().to_vec();
                acc(*gain, Tensor::new(gshape.clone(), gg)?)?;
                let bshape = self.val(*bias).shape().to_vec();
                acc(*bias, Tensor::new(bshape, gbias)?)?;
            }
            Op::Transpose(x) => acc(*x, g.transpose())?,
            Op::SliceCols { x, start } => {
                let xv = self.val(*x);
                let mut gx = Tensor::zeros(xv.shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                acc(*x, gx)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let shape = self.val(*p).shape().to_vec();
                    let w = self.val(*p).cols();
                    let mut gp = Tensor::zeros(&shape);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    acc(*p, gp)?;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.val(*p);
                    let n = pv.len();
                    let gp = Tensor::new(pv.shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                    offset += n;
                    acc(*p, gp)?;
                }
            }
            Op::Gather { table, ids } => {
                let mut gt = Tensor::zeros(self.val(*table).shape());
                for (r, &i) in ids.iter().enumerate() {
                    for (o, &v) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                acc(*table, gt)?;
            }
            Op::GroupMean { x, groups } => {
                let mut gx = Tensor::zeros(self.val(*x).shape());
                let mut r = 0;
                for (gi, &size) in groups.iter().enumerate() {
                    let inv = F::one() / F::from_usize(size);
                    for _ in 0..size {
                        for (o, &v) in gx.row_mut(r).iter_mut().zip(g.row(gi)) {
                            *o = v * inv;
                        }
                        r += 1;
                    }
                }
                acc(*x, gx)?;
            }
            Op::Sum(x) => {
                let shape = self.val(*x).shape().to_vec();
                acc(*x, Tensor::filled(&shape, g.data()[0]))?;
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.val(*logits);
                let count = targets.iter().flatten().count();
                let mut gl = Tensor::zeros(lv.shape());
                if count > 0 {
                    let scale = g.data()[0] / F::from_usize(count);
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            let row = gl.row_mut(r);
                            row.copy_from_slice(lv.row(r));
                            softmax_slice(row);
                            row[*t] = row[*t] - F::one();
                            for v in row.iter_mut() {
                                *v = *v * scale;
                            }
                        }
                    }
                }
                acc(*logits, gl)?;
            }
            Op::Focal { logits, labels, alpha, gamma } => {
                let lv = self.val(*logits);
                let mut gl = Tensor::zeros(lv.shape());
                if !labels.is_empty() {
                    let scale = g.data()[0] / F::from_usize(labels.len());
                    for (r, &y) in labels.iter().enumerate() {
                        let row = gl.row_mut(r);
                        row.copy_from_slice(lv.row(r));
                        softmax_slice(row);
                        let py = row[y];
                        let dldp = focal_dp(py, alpha[y], *gamma);
                        // dp_y / dz_j = p_y (delta_jy - p_j)
                        for (j, v) in row.iter_mut().enumerate() {
                            let delta = if j == y { F::one() } else { F::zero() };
                            *v = scale * dldp * py * (delta - *v);
                        }
                    }
                }
                acc(*logits, gl)?;
            }
        }
        Ok(())
    }
}

/// One row of the focal loss for the probability of the true class.
pub(crate) fn focal_term<F: Real>(p: F, alpha: F, gamma: F) -> F {
    let pc = p.max(F::from_f64(PROB_FLOOR));
    -alpha * (F::one() - p).max(F::zero()).powf(gamma) * pc.ln()
}

fn focal_dp<F: Real>(p: F, alpha: F, gamma: F) -> F {
    let floor = F::from_f64(PROB_FLOOR);
    let q = (F::one() - p).max(F::zero());
    let pc = p.max(floor);
    let decay = if gamma == F::zero() || q == F::zero() {
        F::zero()
    } else {
        gamma * q.powf(gamma - F::one()) * pc.ln()
    };
    let direct = if p < floor { F::zero() } else { q.powf(gamma) / pc };
    alpha * (decay - direct)
}
