//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward pass records nodes onto a fresh [`Tape`]; `backward`
//! walks the tape in reverse and accumulates parameter gradients into a
//! [`Grads`] buffer aligned with the [`ParamStore`]. Nodes are created in
//! topological order by construction, so no explicit sort is needed.

use std::collections::HashMap;

use rand::Rng;

use crate::tensor::Mat;

/// Named parameter matrices with stable slot order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Mat) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        let slot = self.values.len();
        self.index.insert(name.to_string(), slot);
        self.names.push(name.to_string());
        self.values.push(value);
        slot
    }

    pub fn slot(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, slot: usize) -> &Mat {
        &self.values[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Mat {
        &mut self.values[slot]
    }

    pub fn by_name(&self, name: &str) -> &Mat {
        &self.values[self.slot(name)]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    /// Flat concatenation of all parameter values in slot order.
    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flat_map(|m| m.data.iter().copied()).collect()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    slots: Vec<Option<Mat>>,
}

impl Grads {
    pub fn new(store: &ParamStore) -> Self {
        Grads {
            slots: vec![None; store.len()],
        }
    }

    pub fn get(&self, slot: usize) -> Option<&Mat> {
        self.slots[slot].as_ref()
    }

    fn accumulate(&mut self, slot: usize, grad: &Mat, rows: usize, cols: usize) {
        let entry = self
            .slots[slot]
            .get_or_insert_with(|| Mat::zeros(rows, cols));
        entry.add_scaled(grad, 1.0);
    }

    pub fn merge(&mut self, other: &Grads) {
        for (slot, grad) in other.slots.iter().enumerate() {
            if let Some(g) = grad {
                self.accumulate(slot, g, g.rows, g.cols);
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for slot in self.slots.iter_mut().flatten() {
            slot.scale(k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(|m| m.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param { slot: usize },
    MatMul { a: Var, b: Var, tb: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, k: f64 },
    Gelu { a: Var },
    Relu { a: Var },
    SoftmaxRows { a: Var },
    LogSoftmaxRows { a: Var },
    LayerNorm { a: Var, gamma: Var, beta: Var, cache: LnCache },
    Embed { table: Var, ids: Vec<u32> },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    MeanRows { a: Var },
    SumAll { a: Var },
    PickPerRow { a: Var, idx: Vec<usize> },
    Cosine { a: Var, b: Var },
    Exp { a: Var },
    ClipConst { a: Var, lo: f64, hi: f64 },
    MinElem { a: Var, b: Var },
}

struct Node {
    value: Mat,
    op: Op,
}

/// A single forward pass. Create, build the computation, call [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!((m.rows, m.cols), (1, 1), "not a scalar node");
        m.data[0]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Mat::from_vec(1, 1, vec![x]))
    }

    pub fn param(&mut self, store: &ParamStore, slot: usize) -> Var {
        self.push(store.get(slot).clone(), Op::Param { slot })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul { a, b, tb: false })
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        self.push(value, Op::MatMul { a, b, tb: true })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows, ma.cols), (mb.rows, mb.cols));
        let mut value = ma.clone();
        value.add_scaled(mb, 1.0);
        self.push(value, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows, ma.cols), (mb.rows, mb.cols));
        let mut value = ma.clone();
        value.add_scaled(mb, -1.0);
        self.push(value, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows, ma.cols), (mb.rows, mb.cols));
        let value = Mat::from_vec(
            ma.rows,
            ma.cols,
            ma.data.iter().zip(mb.data.iter()).map(|(x, y)| x * y).collect(),
        );
        self.push(value, Op::Mul { a, b })
    }

    /// (r×c) + broadcast (1×c)
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(bias));
        assert_eq!(mb.rows, 1);
        assert_eq!(ma.cols, mb.cols);
        let mut value = ma.clone();
        for r in 0..value.rows {
            for c in 0..value.cols {
                *value.at_mut(r, c) += mb.at(0, c);
            }
        }
        self.push(value, Op::AddBias { a, bias })
    }

    pub fn scale_by(&mut self, a: Var, k: f64) -> Var {
        let mut value = self.value(a).clone();
        value.scale(k);
        self.push(value, Op::Scale { a, k })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = Mat::from_vec(
            self.value(a).rows,
            self.value(a).cols,
            self.value(a).data.iter().map(|&x| gelu(x)).collect(),
        );
        self.push(value, Op::Gelu { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = Mat::from_vec(
            self.value(a).rows,
            self.value(a).cols,
            self.value(a).data.iter().map(|&x| x.max(0.0)).collect(),
        );
        self.push(value, Op::Relu { a })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows { a })
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut value = m.clone();
        for r in 0..m.rows {
            let row = m.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            for (c, x) in row.iter().enumerate() {
                *value.at_mut(r, c) = x - log_sum;
            }
        }
        self.push(value, Op::LogSoftmaxRows { a })
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let m = self.value(a);
        let g = self.value(gamma);
        let bt = self.value(beta);
        assert_eq!(g.cols, m.cols);
        let mut xhat = Mat::zeros(m.rows, m.cols);
        let mut inv_std = Vec::with_capacity(m.rows);
        let mut value = Mat::zeros(m.rows, m.cols);
        for r in 0..m.rows {
            let row = m.row(r);
            let mean = row.iter().sum::<f64>() / m.cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m.cols as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std.push(istd);
            for c in 0..m.cols {
                let xh = (row[c] - mean) * istd;
                *xhat.at_mut(r, c) = xh;
                *value.at_mut(r, c) = g.at(0, c) * xh + bt.at(0, c);
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                cache: LnCache { xhat, inv_std },
            },
        )
    }

    /// Gather embedding rows for token ids from a (V×d) table node.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let mut value = Mat::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        self.push(
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols);
        let value = Mat::from_fn(m.rows, len, |r, c| m.at(r, start + c));
        self.push(value, Op::SliceCols { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let total: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Mat::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows);
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols].copy_from_slice(m.row(r));
            }
            offset += m.cols;
        }
        self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut value = Mat::zeros(1, m.cols);
        for r in 0..m.rows {
            for c in 0..m.cols {
                value.data[c] += m.at(r, c);
            }
        }
        value.scale(1.0 / m.rows as f64);
        self.push(value, Op::MeanRows { a })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data.iter().sum();
        self.push(Mat::from_vec(1, 1, vec![total]), Op::SumAll { a })
    }

    /// Per row r of a (r×c) node, pick column idx[r] → (r×1).
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        assert_eq!(idx.len(), m.rows);
        let value = Mat::from_vec(
            m.rows,
            1,
            idx.iter().enumerate().map(|(r, &c)| m.at(r, c)).collect(),
        );
        self.push(
            value,
            Op::PickPerRow {
                a,
                idx: idx.to_vec(),
            },
        )
    }

    /// Cosine similarity of two (1×d) vectors → (1×1).
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows, mb.rows), (1, 1));
        assert_eq!(ma.cols, mb.cols);
        let dot: f64 = ma.data.iter().zip(mb.data.iter()).map(|(x, y)| x * y).sum();
        let na = ma.data.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let nb = mb.data.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        self.push(Mat::from_vec(1, 1, vec![dot / (na * nb)]), Op::Cosine { a, b })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = Mat::from_vec(
            self.value(a).rows,
            self.value(a).cols,
            self.value(a).data.iter().map(|x| x.exp()).collect(),
        );
        self.push(value, Op::Exp { a })
    }

    pub fn clip_const(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = Mat::from_vec(
            self.value(a).rows,
            self.value(a).cols,
            self.value(a).data.iter().map(|x| x.clamp(lo, hi)).collect(),
        );
        self.push(value, Op::ClipConst { a, lo, hi })
    }

    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows, ma.cols), (mb.rows, mb.cols));
        let value = Mat::from_vec(
            ma.rows,
            ma.cols,
            ma.data.iter().zip(mb.data.iter()).map(|(x, y)| x.min(*y)).collect(),
        );
        self.push(value, Op::MinElem { a, b })
    }

    /// Backpropagate from a scalar loss node; returns parameter gradients.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Grads {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        let loss_mat = &self.nodes[loss.0].value;
        assert_eq!((loss_mat.rows, loss_mat.cols), (1, 1), "loss must be scalar");
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        let mut param_grads = Grads::new(store);

        for i in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param { slot } => {
                    param_grads.accumulate(*slot, &dy, node.value.rows, node.value.cols);
                }
                Op::MatMul { a, b, tb } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if *tb {
                        // y = A·Bᵀ: dA = dY·B, dB = dYᵀ·A
                        acc(&mut grads, *a, &dy.matmul(vb));
                        acc(&mut grads, *b, &dy.matmul_tn(va));
                    } else {
                        // y = A·B: dA = dY·Bᵀ, dB = Aᵀ·dY
                        acc(&mut grads, *a, &dy.matmul_nt(vb));
                        acc(&mut grads, *b, &va.matmul_tn(&dy));
                    }
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, &dy);
                    acc(&mut grads, *b, &dy);
                }
                Op::Sub { a, b } => {
                    acc(&mut grads, *a, &dy);
                    let mut neg = dy.clone();
                    neg.scale(-1.0);
                    acc(&mut grads, *b, &neg);
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let da = Mat::from_vec(
                        dy.rows,
                        dy.cols,
                        dy.data.iter().zip(vb.data.iter()).map(|(g, y)| g * y).collect(),
                    );
                    let db = Mat::from_vec(
                        dy.rows,
                        dy.cols,
                        dy.data.iter().zip(va.data.iter()).map(|(g, x)| g * x).collect(),
                    );
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *b, &db);
                }
                Op::AddBias { a, bias } => {
                    acc(&mut grads, *a, &dy);
                    let mut db = Mat::zeros(1, dy.cols);
                    for r in 0..dy.rows {
                        for c in 0..dy.cols {
                            db.data[c] += dy.at(r, c);
                        }
                    }
                    acc(&mut grads, *bias, &db);
                }
                Op::Scale { a, k } => {
                    let mut da = dy.clone();
                    da.scale(*k);
                    acc(&mut grads, *a, &da);
                }
                Op::Gelu { a } => {
                    let va = &self.nodes[a.0].value;
                    let da = Mat::from_vec(
                        dy.rows,
                        dy.cols,
                        dy.data
                            .iter()
                            .zip(va.data.iter())
                            .map(|(g, &x)| g * gelu_grad(x))
                            .collect(),
                    );
                    acc(&mut grads, *a, &da);
                }
                Op::Relu { a } => {
                    let va = &self.nodes[a.0].value;
                    let da = Mat::from_vec(
                        dy.rows,
                        dy.cols,
                        dy.data
                            .iter()
                            .zip(va.data.iter())
                            .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    );
                    acc(&mut grads, *a, &da);
                }
                Op::SoftmaxRows { a } => {
                    let y = &node.value;
                    let mut da = Mat::zeros(dy.rows, dy.cols);
                    for r in 0..dy.rows {
                        let s: f64 = (0..dy.cols).map(|c| dy.at(r, c) * y.at(r, c)).sum();
                        for c in 0..dy.cols {
                            *da.at_mut(r, c) = y.at(r, c) * (dy.at(r, c) - s);
                        }
                    }
                    acc(&mut grads, *a, &da);
                }
                Op::LogSoftmaxRows { a } => {
                    let y = &node.value;
                    let mut da = Mat::zeros(dy.rows, dy.cols);
                    for r in 0..dy.rows {
                        let s: f64 = (0..dy.cols).map(|c| dy.at(r, c)).sum();
                        for c in 0..dy.cols {
                            *da.at_mut(r, c) = dy.at(r, c) - y.at(r, c).exp() * s;
                        }
                    }
                    acc(&mut grads, *a, &da);
                }
                Op::LayerNorm { a, gamma, beta, cache } => {
                    let g = &self.nodes[gamma.0].value;
                    let cols = dy.cols as f64;
                    let mut dgamma = Mat::zeros(1, dy.cols);
                    let mut dbeta = Mat::zeros(1, dy.cols);
                    let mut da = Mat::zeros(dy.rows, dy.cols);
                    for r in 0..dy.rows {
                        let istd = cache.inv_std[r];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for c in 0..dy.cols {
                            let dyv = dy.at(r, c);
                            dgamma.data[c] += dyv * cache.xhat.at(r, c);
                            dbeta.data[c] += dyv;
                            let dxhat = dyv * g.at(0, c);
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * cache.xhat.at(r, c);
                        }
                        mean_dxhat /= cols;
                        mean_dxhat_xhat /= cols;
                        for c in 0..dy.cols {
                            let dxhat = dy.at(r, c) * g.at(0, c);
                            *da.at_mut(r, c) =
                                istd * (dxhat - mean_dxhat - cache.xhat.at(r, c) * mean_dxhat_xhat);
                        }
                    }
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *gamma, &dgamma);
                    acc(&mut grads, *beta, &dbeta);
                }
                Op::Embed { table, ids } => {
                    let t = &self.nodes[table.0].value;
                    let mut dt = Mat::zeros(t.rows, t.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = dt.row_mut(id as usize);
                        for (c, v) in dy.row(r).iter().enumerate() {
                            dst[c] += v;
                        }
                    }
                    acc(&mut grads, *table, &dt);
                }
                Op::SliceCols { a, start } => {
                    let va = &self.nodes[a.0].value;
                    let mut da = Mat::zeros(va.rows, va.cols);
                    for r in 0..dy.rows {
                        for c in 0..dy.cols {
                            *da.at_mut(r, start + c) = dy.at(r, c);
                        }
                    }
                    acc(&mut grads, *a, &da);
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.nodes[p.0].value.cols;
                        let dp = Mat::from_fn(dy.rows, cols, |r, c| dy.at(r, offset + c));
                        acc(&mut grads, p, &dp);
                        offset += cols;
                    }
                }
                Op::MeanRows { a } => {
                    let va = &self.nodes[a.0].value;
                    let k = 1.0 / va.rows as f64;
                    let da = Mat::from_fn(va.rows, va.cols, |_, c| dy.at(0, c) * k);
                    acc(&mut grads, *a, &da);
                }
                Op::SumAll { a } => {
                    let va = &self.nodes[a.0].value;
                    let da = Mat::from_fn(va.rows, va.cols, |_, _| dy.data[0]);
                    acc(&mut grads, *a, &da);
                }
                Op::PickPerRow { a, idx } => {
                    let va = &self.nodes[a.0].value;
                    let mut da = Mat::zeros(va.rows, va.cols);
                    for (r, &c) in idx.iter().enumerate() {
                        *da.at_mut(r, c) = dy.at(r, 0);
                    }
                    acc(&mut grads, *a, &da);
                }
                Op::Cosine { a, b } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let dot: f64 = va.data.iter().zip(vb.data.iter()).map(|(x, y)| x * y).sum();
                    let na = va.data.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    let nb = vb.data.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    let cos = dot / (na * nb);
                    let g = dy.data[0];
                    let da = Mat::from_vec(
                        1,
                        va.cols,
                        va.data
                            .iter()
                            .zip(vb.data.iter())
                            .map(|(x, y)| g * (y / (na * nb) - cos * x / (na * na)))
                            .collect(),
                    );
                    let db = Mat::from_vec(
                        1,
                        vb.cols,
                        vb.data
                            .iter()
                            .zip(va.data.iter())
                            .map(|(y, x)| g * (x / (na * nb) - cos * y / (nb * nb)))
                            .collect(),
                    );
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *b, &db);
                }
                Op::Exp { a } => {
                    let y = &node.value;
                    let da = Mat::from_vec(
                        dy.rows,
                        dy.cols,
                        dy.data.iter().zip(y.data.iter()).map(|(g, v)| g * v).collect(),
                    );
                    acc(&mut grads, *a, &da);
                }
                Op::ClipConst { a, lo, hi } => {
                    let va = &self.nodes[a.0].value;
                    let da = Mat::from_vec(
                        dy.rows,
                        dy.cols,
                        dy.data
                            .iter()
                            .zip(va.data.iter())
                            .map(|(g, &x)| if x > *lo && x < *hi { *g } else { 0.0 })
                            .collect(),
                    );
                    acc(&mut grads, *a, &da);
                }
                Op::MinElem { a, b } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let mut da = Mat::zeros(dy.rows, dy.cols);
                    let mut db = Mat::zeros(dy.rows, dy.cols);
                    for k in 0..dy.data.len() {
                        if va.data[k] <= vb.data[k] {
                            da.data[k] = dy.data[k];
                        } else {
                            db.data[k] = dy.data[k];
                        }
                    }
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *b, &db);
                }
            }
        }
        param_grads
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: &Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_scaled(g, 1.0),
        slot => *slot = Some(g.clone()),
    }
}

pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..m.rows {
        let row = m.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (c, x) in row.iter().enumerate() {
            let e = (x - max).exp();
            *out.at_mut(r, c) = e;
            sum += e;
        }
        for c in 0..m.cols {
            *out.at_mut(r, c) /= sum;
        }
    }
    out
}

/// Softmax over a flat slice (positions of one sequence), numerically stable.
pub fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
const GELU_C: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// Draw a standard normal sample.
pub fn randn(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences against the analytic gradient for a
    /// scalar-valued builder over a parameter store.
    fn check_grads<F>(store: &ParamStore, build: F, tol: f64)
    where
        F: Fn(&mut Tape, &ParamStore) -> Var,
    {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store);
        let grads = tape.backward(loss, store);

        let h = 1e-6;
        for slot in 0..store.len() {
            let mat = store.get(slot);
            for k in 0..mat.data.len() {
                let mut plus = store.clone();
                plus.get_mut(slot).data[k] += h;
                let mut minus = store.clone();
                minus.get_mut(slot).data[k] -= h;
                let mut tp = Tape::new();
                let lp = build(&mut tp, &plus);
                let fp = tp.scalar(lp);
                let mut tm = Tape::new();
                let lm = build(&mut tm, &minus);
                let fm = tm.scalar(lm);
                let fd = (fp - fm) / (2.0 * h);
                let analytic = grads.get(slot).map_or(0.0, |g| g.data[k]);
                let denom = analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (analytic - fd).abs() / denom < tol,
                    "slot {slot} elem {k}: analytic {analytic} vs fd {fd}"
                );
            }
        }
    }

    fn tiny_store(seed: u64, shapes: &[(&str, usize, usize)]) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, r, c) in shapes {
            store.add(name, Mat::randn(*r, *c, &mut rng));
        }
        store
    }

    #[test]
    fn matmul_add_bias_grads() {
        let store = tiny_store(1, &[("w", 3, 4), ("b", 1, 4), ("x", 2, 3)]);
        check_grads(
            &store,
            |tape, s| {
                let x = tape.param(s, s.slot("x"));
                let w = tape.param(s, s.slot("w"));
                let b = tape.param(s, s.slot("b"));
                let y = tape.matmul(x, w);
                let y = tape.add_bias(y, b);
                let y = tape.gelu(y);
                tape.sum_all(y)
            },
            1e-5,
        );
    }

    #[test]
    fn matmul_nt_grads() {
        let store = tiny_store(2, &[("a", 3, 4), ("b", 5, 4)]);
        check_grads(
            &store,
            |tape, s| {
                let a = tape.param(s, s.slot("a"));
                let b = tape.param(s, s.slot("b"));
                let y = tape.matmul_nt(a, b);
                let y = tape.mul(y, y);
                tape.sum_all(y)
            },
            1e-5,
        );
    }

    #[test]
    fn softmax_logsoftmax_grads() {
        let store = tiny_store(3, &[("x", 3, 5)]);
        check_grads(
            &store,
            |tape, s| {
                let x = tape.param(s, s.slot("x"));
                let sm = tape.softmax_rows(x);
                let lsm = tape.log_softmax_rows(x);
                let both = tape.mul(sm, lsm);
                tape.sum_all(both)
            },
            1e-5,
        );
    }

    #[test]
    fn layer_norm_grads() {
        let store = tiny_store(4, &[("x", 3, 6), ("g", 1, 6), ("bt", 1, 6)]);
        check_grads(
            &store,
            |tape, s| {
                let x = tape.param(s, s.slot("x"));
                let g = tape.param(s, s.slot("g"));
                let b = tape.param(s, s.slot("bt"));
                let y = tape.layer_norm(x, g, b);
                let y2 = tape.mul(y, y);
                tape.sum_all(y2)
            },
            1e-4,
        );
    }

    #[test]
    fn embed_slice_concat_mean_grads() {
        let store = tiny_store(5, &[("table", 7, 6)]);
        check_grads(
            &store,
            |tape, s| {
                let t = tape.param(s, s.slot("table"));
                let e = tape.embed(t, &[2, 5, 2]);
                let left = tape.slice_cols(e, 0, 3);
                let right = tape.slice_cols(e, 3, 3);
                let swapped = tape.concat_cols(&[right, left]);
                let pooled = tape.mean_rows(swapped);
                let sq = tape.mul(pooled, pooled);
                tape.sum_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn cosine_grads() {
        let store = tiny_store(6, &[("a", 1, 5), ("b", 1, 5)]);
        check_grads(
            &store,
            |tape, s| {
                let a = tape.param(s, s.slot("a"));
                let b = tape.param(s, s.slot("b"));
                tape.cosine(a, b)
            },
            1e-5,
        );
    }

    #[test]
    fn pick_exp_min_clip_grads() {
        let store = tiny_store(7, &[("x", 4, 3), ("y", 4, 1)]);
        check_grads(
            &store,
            |tape, s| {
                let x = tape.param(s, s.slot("x"));
                let y = tape.param(s, s.slot("y"));
                let lsm = tape.log_softmax_rows(x);
                let picked = tape.pick_per_row(lsm, &[0, 2, 1, 0]);
                let e = tape.exp(picked);
                let clipped = tape.clip_const(e, 0.4, 1.6);
                let m = tape.min_elem(clipped, y);
                tape.sum_all(m)
            },
            1e-4,
        );
    }

    #[test]
    fn reused_node_accumulates_gradient() {
        // f(x) = sum(x*x) via using the same var twice: df/dx = 2x
        let store = tiny_store(8, &[("x", 2, 2)]);
        let mut tape = Tape::new();
        let x = tape.param(&store, store.slot("x"));
        let y = tape.mul(x, x);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss, &store);
        let g = grads.get(store.slot("x")).unwrap();
        for (gv, xv) in g.data.iter().zip(store.by_name("x").data.iter()) {
            assert!((gv - 2.0 * xv).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sums_to_one() {
        let m = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let sm = softmax_rows(&m);
        for r in 0..2 {
            let s: f64 = sm.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
