//! Reverse-mode differentiation over a dynamically built graph.
//!
//! Each [`Var`] holds its forward value plus, when it depends on something
//! that requires a gradient, the operation and inputs that produced it.
//! Nodes get a globally increasing id at creation, so sorting reachable nodes
//! by descending id yields a valid reverse topological order. Values that no
//! longer have a live `Var` referring to them are freed immediately, which
//! keeps inference-only passes at the footprint of their live activations.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::memory::{self, AttentionEvent, AttentionSite};
use super::tensor::{
    matmul_at_into, matmul_bt_into, matmul_into, softmax_in_place, Element, Tensor,
};
use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Score assigned to masked attention positions before the softmax.
pub const MASKED_SCORE: f64 = -1e9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op<F: Element> {
    Leaf,
    MatMul(Var<F>, Var<F>),
    Add(Var<F>, Var<F>),
    AddRow(Var<F>, Var<F>),
    Mul(Var<F>, Var<F>),
    Scale(Var<F>, F),
    Gelu(Var<F>),
    LayerNorm {
        x: Var<F>,
        gain: Var<F>,
        bias: Var<F>,
        normed: Vec<F>,
        inv_std: Vec<F>,
    },
    Embedding {
        table: Var<F>,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var<F>,
        start: usize,
    },
    ConcatCols(Vec<Var<F>>),
    ConcatRows(Vec<Var<F>>),
    SoftmaxRows(Var<F>),
    MulCol(Var<F>, Var<F>),
    Attention {
        q: Var<F>,
        k: Var<F>,
        v: Var<F>,
        probs: Vec<F>,
        scale: F,
    },
    CrossEntropy {
        logits: Var<F>,
        targets: Vec<usize>,
        smoothing: F,
        probs: Vec<F>,
    },
    Sum(Var<F>),
}

struct Node<F: Element> {
    id: u64,
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// A value in the differentiation graph. Cloning is cheap (reference count).
pub struct Var<F: Element = f32>(Rc<Node<F>>);

impl<F: Element> Clone for Var<F> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<F: Element> fmt::Debug for Var<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / cols, cols)
}

impl<F: Element> Var<F> {
    fn make(value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Self {
        let op = if requires_grad { op } else { Op::Leaf };
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            op,
        }))
    }

    /// Trainable leaf.
    pub fn param(value: Tensor<F>) -> Self {
        Var::make(value, true, Op::Leaf)
    }

    /// Non-trainable leaf.
    pub fn constant(value: Tensor<F>) -> Self {
        Var::make(value, false, Op::Leaf)
    }

    pub fn value(&self) -> &Tensor<F> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn item(&self) -> F {
        self.0.value.item()
    }

    pub fn matmul(&self, other: &Var<F>) -> Var<F> {
        let (m, k) = rows_cols(self.shape());
        let [k2, n] = other.shape() else {
            panic!("matmul rhs must be 2-D, got {:?}", other.shape())
        };
        assert_eq!(
            k,
            *k2,
            "matmul inner dims {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let mut out = vec![F::zero(); m * n];
        matmul_into(
            self.value().data(),
            other.value().data(),
            &mut out,
            m,
            k,
            *n,
        );
        let rg = self.requires_grad() || other.requires_grad();
        Var::make(
            Tensor::from_parts(vec![m, *n], out),
            rg,
            Op::MatMul(self.clone(), other.clone()),
        )
    }

    pub fn add(&self, other: &Var<F>) -> Var<F> {
        assert_eq!(self.shape(), other.shape(), "add shapes");
        let data = self
            .value()
            .data()
            .iter()
            .zip(other.value().data())
            .map(|(&a, &b)| a + b)
            .collect();
        let rg = self.requires_grad() || other.requires_grad();
        Var::make(
            Tensor::from_parts(self.shape().to_vec(), data),
            rg,
            Op::Add(self.clone(), other.clone()),
        )
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&self, bias: &Var<F>) -> Var<F> {
        let (_, c) = rows_cols(self.shape());
        assert_eq!(bias.value().len(), c, "bias length");
        let b = bias.value().data();
        let data = self
            .value()
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let rg = self.requires_grad() || bias.requires_grad();
        Var::make(
            Tensor::from_parts(self.shape().to_vec(), data),
            rg,
            Op::AddRow(self.clone(), bias.clone()),
        )
    }

    pub fn mul(&self, other: &Var<F>) -> Var<F> {
        assert_eq!(self.shape(), other.shape(), "mul shapes");
        let data = self
            .value()
            .data()
            .iter()
            .zip(other.value().data())
            .map(|(&a, &b)| a * b)
            .collect();
        let rg = self.requires_grad() || other.requires_grad();
        Var::make(
            Tensor::from_parts(self.shape().to_vec(), data),
            rg,
            Op::Mul(self.clone(), other.clone()),
        )
    }

    pub fn scale(&self, s: F) -> Var<F> {
        Var::make(
            self.value().map(|v| v * s),
            self.requires_grad(),
            Op::Scale(self.clone(), s),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<F> {
        let c = F::of(GELU_C);
        let a = F::of(GELU_A);
        let half = F::of(0.5);
        let value = self
            .value()
            .map(|x| half * x * (F::one() + (c * (x + a * x * x * x)).tanh()));
        Var::make(value, self.requires_grad(), Op::Gelu(self.clone()))
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&self, gain: &Var<F>, bias: &Var<F>, eps: F) -> Var<F> {
        let (r, c) = rows_cols(self.shape());
        assert_eq!(gain.value().len(), c);
        assert_eq!(bias.value().len(), c);
        let n = F::from_usize(c).unwrap();
        let x = self.value().data();
        let (g, b) = (gain.value().data(), bias.value().data());
        let mut normed = vec![F::zero(); r * c];
        let mut inv_std = vec![F::zero(); r];
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let inv = F::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                normed[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Var::make(
            Tensor::from_parts(self.shape().to_vec(), out),
            rg,
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                normed,
                inv_std,
            },
        )
    }

    /// Gathers rows of an embedding table.
    pub fn embedding(table: &Var<F>, ids: &[usize]) -> Result<Var<F>> {
        let [rows, d] = table.shape() else {
            return Err(Error::input("embedding table must be 2-D"));
        };
        let (rows, d) = (*rows, *d);
        if ids.is_empty() {
            return Err(Error::input("embedding lookup with no ids"));
        }
        let t = table.value().data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::input(format!(
                    "id {id} out of range for table of {rows} rows"
                )));
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        Ok(Var::make(
            Tensor::from_parts(vec![ids.len(), d], out),
            table.requires_grad(),
            Op::Embedding {
                table: table.clone(),
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var<F> {
        let (r, c) = rows_cols(self.shape());
        assert!(start + len <= c, "slice_cols out of range");
        let x = self.value().data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        Var::make(
            Tensor::from_parts(vec![r, len], out),
            self.requires_grad(),
            Op::SliceCols {
                x: self.clone(),
                start,
            },
        )
    }

    pub fn concat_cols(parts: &[Var<F>]) -> Var<F> {
        assert!(!parts.is_empty(), "concat of nothing");
        let r = rows_cols(parts[0].shape()).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (pr, pc) = rows_cols(p.shape());
                assert_eq!(pr, r, "concat_cols row mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.value().data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(Var::requires_grad);
        Var::make(
            Tensor::from_parts(vec![r, total], out),
            rg,
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn concat_rows(parts: &[Var<F>]) -> Var<F> {
        assert!(!parts.is_empty(), "concat of nothing");
        let c = rows_cols(parts[0].shape()).1;
        let mut out = Vec::new();
        let mut r = 0;
        for p in parts {
            let (pr, pc) = rows_cols(p.shape());
            assert_eq!(pc, c, "concat_rows column mismatch");
            out.extend_from_slice(p.value().data());
            r += pr;
        }
        let rg = parts.iter().any(Var::requires_grad);
        Var::make(
            Tensor::from_parts(vec![r, c], out),
            rg,
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn softmax_rows(&self) -> Var<F> {
        let (_, c) = rows_cols(self.shape());
        let mut out = self.value().clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        Var::make(out, self.requires_grad(), Op::SoftmaxRows(self.clone()))
    }

    /// Scales row `i` of `self` by `weights[i]` (a column vector).
    pub fn mul_col(&self, weights: &Var<F>) -> Var<F> {
        let (r, c) = rows_cols(self.shape());
        assert_eq!(weights.value().len(), r, "mul_col weight count");
        let w = weights.value().data();
        let data = self
            .value()
            .data()
            .chunks(c)
            .zip(w)
            .flat_map(|(row, &wi)| row.iter().map(move |&x| x * wi))
            .collect();
        let rg = self.requires_grad() || weights.requires_grad();
        Var::make(
            Tensor::from_parts(self.shape().to_vec(), data),
            rg,
            Op::MulCol(self.clone(), weights.clone()),
        )
    }

    pub fn sum(&self) -> Var<F> {
        let s = self.value().data().iter().copied().sum();
        Var::make(
            Tensor::scalar(s),
            self.requires_grad(),
            Op::Sum(self.clone()),
        )
    }

    /// Runs the backward pass from this (scalar) node.
    pub fn backward(&self) -> GradStore<F> {
        backward(self)
    }
}

/// Scaled dot-product attention, `softmax(QKᵀ/√d)V`.
///
/// `mask[i*l_k + j] == false` excludes key `j` for query `i`. Materialises
/// exactly `l_q·l_k` score cells and reports them to the memory hook.
pub fn attention<F: Element>(
    q: &Var<F>,
    k: &Var<F>,
    v: &Var<F>,
    mask: Option<&[bool]>,
    site: AttentionSite,
) -> Result<Var<F>> {
    let (lq, d) = rows_cols(q.shape());
    let (lk, dk) = rows_cols(k.shape());
    let (lv, dv) = rows_cols(v.shape());
    if d != dk || lk != lv {
        return Err(Error::input(format!(
            "attention shapes Q{:?} K{:?} V{:?} do not agree",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if let Some(m) = mask {
        if m.len() != lq * lk {
            return Err(Error::input(format!(
                "mask has {} cells, expected {}",
                m.len(),
                lq * lk
            )));
        }
        if let Some(row) = (0..lq).find(|&i| !m[i * lk..(i + 1) * lk].iter().any(|&a| a)) {
            return Err(Error::DegenerateMask { row });
        }
    }
    let scale = F::one() / F::from_usize(d).unwrap().sqrt();
    let mut probs = vec![F::zero(); lq * lk];
    memory::report(AttentionEvent {
        site,
        query_len: lq,
        key_len: lk,
    });
    matmul_bt_into(q.value().data(), k.value().data(), &mut probs, lq, d, lk);
    let masked = F::of(MASKED_SCORE);
    for (i, row) in probs.chunks_mut(lk).enumerate() {
        for (j, s) in row.iter_mut().enumerate() {
            *s = match mask {
                Some(m) if !m[i * lk + j] => masked,
                _ => *s * scale,
            };
        }
        softmax_in_place(row);
    }
    let mut out = vec![F::zero(); lq * dv];
    matmul_into(&probs, v.value().data(), &mut out, lq, lk, dv);
    let rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
    Ok(Var::make(
        Tensor::from_parts(vec![lq, dv], out),
        rg,
        Op::Attention {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            probs,
            scale,
        },
    ))
}

/// Mean over positions of `(1−ε)·NLL(target) + ε·mean_k NLL(k)`.
pub fn cross_entropy_smoothed<F: Element>(
    logits: &Var<F>,
    targets: &[usize],
    smoothing: F,
) -> Result<Var<F>> {
    let (l, vocab) = rows_cols(logits.shape());
    if targets.len() != l || l == 0 {
        return Err(Error::input(format!(
            "{} targets for {} logit rows",
            targets.len(),
            l
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::input(format!(
            "target {t} outside vocabulary of {vocab}"
        )));
    }
    if !(smoothing >= F::zero() && smoothing < F::one()) {
        return Err(Error::input("label smoothing must lie in [0, 1)"));
    }
    logits.value().ensure_finite("logits")?;
    let vf = F::from_usize(vocab).unwrap();
    let mut probs = logits.value().data().to_vec();
    let mut total = F::zero();
    for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<F>().ln();
        let mean_z = row.iter().copied().sum::<F>() / vf;
        let nll_target = lse - row[t];
        let nll_mean = lse - mean_z;
        total = total + (F::one() - smoothing) * nll_target + smoothing * nll_mean;
        for z in row.iter_mut() {
            *z = (*z - lse).exp();
        }
    }
    let loss = total / F::from_usize(l).unwrap();
    Ok(Var::make(
        Tensor::scalar(loss),
        logits.requires_grad(),
        Op::CrossEntropy {
            logits: logits.clone(),
            targets: targets.to_vec(),
            smoothing,
            probs,
        },
    ))
}

/// Gradients keyed by node id.
pub struct GradStore<F: Element> {
    grads: HashMap<u64, Vec<F>>,
}

impl<F: Element> GradStore<F> {
    /// Gradient for `var`, zeros if it did not influence the output.
    pub fn get(&self, var: &Var<F>) -> Tensor<F> {
        match self.grads.get(&var.id()) {
            Some(g) => Tensor::from_parts(var.shape().to_vec(), g.clone()),
            None => Tensor::zeros(var.shape()),
        }
    }
}

fn accumulate<F: Element>(grads: &mut HashMap<u64, Vec<F>>, var: &Var<F>, contrib: Vec<F>) {
    if !var.requires_grad() {
        return;
    }
    match grads.get_mut(&var.id()) {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a = *a + b;
            }
        }
        None => {
            grads.insert(var.id(), contrib);
        }
    }
}

fn parents<F: Element>(op: &Op<F>) -> Vec<&Var<F>> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) | Op::MulCol(a, b) => {
            vec![a, b]
        }
        Op::Scale(a, _) | Op::Gelu(a) | Op::SoftmaxRows(a) | Op::Sum(a) => vec![a],
        Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
        Op::Embedding { table, .. } => vec![table],
        Op::SliceCols { x, .. } => vec![x],
        Op::ConcatCols(ps) | Op::ConcatRows(ps) => ps.iter().collect(),
        Op::Attention { q, k, v, .. } => vec![q, k, v],
        Op::CrossEntropy { logits, .. } => vec![logits],
    }
}

fn backward<F: Element>(root: &Var<F>) -> GradStore<F> {
    let mut grads: HashMap<u64, Vec<F>> = HashMap::new();
    if !root.requires_grad() {
        return GradStore { grads };
    }
    let mut order: Vec<Var<F>> = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![root.clone()];
    while let Some(v) = stack.pop() {
        if !seen.insert(v.id()) {
            continue;
        }
        for p in parents(&v.0.op) {
            if p.requires_grad() && !seen.contains(&p.id()) {
                stack.push(p.clone());
            }
        }
        order.push(v);
    }
    order.sort_by_key(|v| std::cmp::Reverse(v.id()));
    grads.insert(root.id(), vec![F::one(); root.value().len()]);

    for node in &order {
        let Some(g) = grads.get(&node.id()).cloned() else {
            continue;
        };
        propagate(node, &g, &mut grads);
    }
    GradStore { grads }
}

fn propagate<F: Element>(node: &Var<F>, g: &[F], grads: &mut HashMap<u64, Vec<F>>) {
    let out = node.value().data();
    match &node.0.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = rows_cols(a.shape());
            let n = b.shape()[1];
            if a.requires_grad() {
                let mut ga = vec![F::zero(); m * k];
                matmul_bt_into(g, b.value().data(), &mut ga, m, n, k);
                accumulate(grads, a, ga);
            }
            if b.requires_grad() {
                let mut gb = vec![F::zero(); k * n];
                matmul_at_into(a.value().data(), g, &mut gb, m, k, n);
                accumulate(grads, b, gb);
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, a, g.to_vec());
            accumulate(grads, b, g.to_vec());
        }
        Op::AddRow(a, b) => {
            accumulate(grads, a, g.to_vec());
            if b.requires_grad() {
                let c = b.value().len();
                let mut gb = vec![F::zero(); c];
                for row in g.chunks(c) {
                    for (acc, &x) in gb.iter_mut().zip(row) {
                        *acc = *acc + x;
                    }
                }
                accumulate(grads, b, gb);
            }
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                let ga = g
                    .iter()
                    .zip(b.value().data())
                    .map(|(&x, &y)| x * y)
                    .collect();
                accumulate(grads, a, ga);
            }
            if b.requires_grad() {
                let gb = g
                    .iter()
                    .zip(a.value().data())
                    .map(|(&x, &y)| x * y)
                    .collect();
                accumulate(grads, b, gb);
            }
        }
        Op::Scale(a, s) => {
            accumulate(grads, a, g.iter().map(|&x| x * *s).collect());
        }
        Op::Gelu(a) => {
            let c = F::of(GELU_C);
            let k = F::of(GELU_A);
            let half = F::of(0.5);
            let three = F::of(3.0);
            let ga = g
                .iter()
                .zip(a.value().data())
                .map(|(&gy, &x)| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let dt = (F::one() - t * t) * c * (F::one() + three * k * x * x);
                    gy * (half * (F::one() + t) + half * x * dt)
                })
                .collect();
            accumulate(grads, a, ga);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normed,
            inv_std,
        } => {
            let c = gain.value().len();
            let n = F::from_usize(c).unwrap();
            let gv = gain.value().data();
            if x.requires_grad() {
                let mut gx = vec![F::zero(); g.len()];
                for (i, inv) in inv_std.iter().enumerate() {
                    let gy = &g[i * c..(i + 1) * c];
                    let h = &normed[i * c..(i + 1) * c];
                    let dh: Vec<F> = gy.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                    let sum_dh: F = dh.iter().copied().sum();
                    let sum_dh_h: F = dh.iter().zip(h).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = *inv / n * (n * dh[j] - sum_dh - h[j] * sum_dh_h);
                    }
                }
                accumulate(grads, x, gx);
            }
            if gain.requires_grad() {
                let mut gg = vec![F::zero(); c];
                for (gy, h) in g.chunks(c).zip(normed.chunks(c)) {
                    for j in 0..c {
                        gg[j] = gg[j] + gy[j] * h[j];
                    }
                }
                accumulate(grads, gain, gg);
            }
            if bias.requires_grad() {
                let mut gb = vec![F::zero(); c];
                for gy in g.chunks(c) {
                    for j in 0..c {
                        gb[j] = gb[j] + gy[j];
                    }
                }
                accumulate(grads, bias, gb);
            }
        }
        Op::Embedding { table, ids } => {
            let d = table.shape()[1];
            let mut gt = vec![F::zero(); table.value().len()];
            for (row, &id) in g.chunks(d).zip(ids) {
                for (acc, &x) in gt[id * d..(id + 1) * d].iter_mut().zip(row) {
                    *acc = *acc + x;
                }
            }
            accumulate(grads, table, gt);
        }
        Op::SliceCols { x, start } => {
            let (r, c) = rows_cols(x.shape());
            let len = node.shape()[1];
            let mut gx = vec![F::zero(); r * c];
            for i in 0..r {
                gx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            accumulate(grads, x, gx);
        }
        Op::ConcatCols(parts) => {
            let total = node.shape()[1];
            let r = node.shape()[0];
            let mut offset = 0;
            for p in parts {
                let w = rows_cols(p.shape()).1;
                if p.requires_grad() {
                    let mut gp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    accumulate(grads, p, gp);
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = p.value().len();
                accumulate(grads, p, g[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::SoftmaxRows(a) => {
            let c = rows_cols(node.shape()).1;
            let mut ga = vec![F::zero(); g.len()];
            for ((gy, y), gx) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                let dot: F = gy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    gx[j] = y[j] * (gy[j] - dot);
                }
            }
            accumulate(grads, a, ga);
        }
        Op::MulCol(a, w) => {
            let c = rows_cols(a.shape()).1;
            let wv = w.value().data();
            if a.requires_grad() {
                let ga = g
                    .chunks(c)
                    .zip(wv)
                    .flat_map(|(row, &wi)| row.iter().map(move |&x| x * wi))
                    .collect();
                accumulate(grads, a, ga);
            }
            if w.requires_grad() {
                let gw = g
                    .chunks(c)
                    .zip(a.value().data().chunks(c))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(&x, &y)| x * y).sum())
                    .collect();
                accumulate(grads, w, gw);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            probs,
            scale,
        } => {
            let (lq, d) = rows_cols(q.shape());
            let (lk, dv) = rows_cols(v.shape());
            if v.requires_grad() {
                let mut gv = vec![F::zero(); lk * dv];
                matmul_at_into(probs, g, &mut gv, lq, lk, dv);
                accumulate(grads, v, gv);
            }
            if q.requires_grad() || k.requires_grad() {
                // dP = dO·Vᵀ, then through the row softmax, then the scale.
                let mut ds = vec![F::zero(); lq * lk];
                matmul_bt_into(g, v.value().data(), &mut ds, lq, dv, lk);
                for (dp, p) in ds.chunks_mut(lk).zip(probs.chunks(lk)) {
                    let dot: F = dp.iter().zip(p).map(|(&a, &b)| a * b).sum();
                    for j in 0..lk {
                        dp[j] = p[j] * (dp[j] - dot) * *scale;
                    }
                }
                if q.requires_grad() {
                    let mut gq = vec![F::zero(); lq * d];
                    matmul_into(&ds, k.value().data(), &mut gq, lq, lk, d);
                    accumulate(grads, q, gq);
                }
                if k.requires_grad() {
                    let mut gk = vec![F::zero(); lk * d];
                    matmul_at_into(&ds, q.value().data(), &mut gk, lq, lk, d);
                    accumulate(grads, k, gk);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            smoothing,
            probs,
        } => {
            let (l, vocab) = rows_cols(logits.shape());
            let scale = g[0] / F::from_usize(l).unwrap();
            let uniform = *smoothing / F::from_usize(vocab).unwrap();
            let mut gl = probs.clone();
            for (row, &t) in gl.chunks_mut(vocab).zip(targets) {
                for z in row.iter_mut() {
                    *z = (*z - uniform) * scale;
                }
                row[t] = row[t] - (F::one() - *smoothing) * scale;
            }
            accumulate(grads, logits, gl);
        }
        Op::Sum(a) => {
            accumulate(grads, a, vec![g[0]; a.value().len()]);
        }
    }
}

/// A named set of trainable tensors bound into a graph for one pass.
pub struct Bound<F: Element> {
    vars: BTreeMap<String, Var<F>>,
}

impl<F: Element> Bound<F> {
    pub fn new(tensors: &BTreeMap<String, Tensor<F>>, trainable: bool) -> Self {
        let vars = tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    Var::param(t.clone())
                } else {
                    Var::constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> &Var<F> {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Var<F>> {
        self.vars.get(name)
    }

    /// Collects gradients for every bound parameter.
    pub fn gradients(&self, store: &GradStore<F>) -> Gradients<F> {
        Gradients(
            self.vars
                .iter()
                .map(|(n, v)| (n.clone(), store.get(v)))
                .collect(),
        )
    }
}

/// Parameter name → gradient of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F: Element = f32>(pub BTreeMap<String, Tensor<F>>);

impl<F: Element> Gradients<F> {
    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.0.get(name)
    }

    /// Global L2 norm, summed in name order.
    pub fn global_norm(&self) -> F {
        self.0.values().map(Tensor::sum_squares).sum::<F>().sqrt()
    }

    pub fn scale(&mut self, s: F) {
        for t in self.0.values_mut() {
            for v in t.data_mut() {
                *v = *v * s;
            }
        }
    }

    /// Elementwise accumulation; `other` must cover the same names.
    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for (name, t) in self.0.iter_mut() {
            let o = &other.0[name];
            for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
                *a = *a + b;
            }
        }
    }

    /// Rescales so the global norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: F) -> F {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::memory::{AttentionKind, Recorder};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central differences on every coordinate of `x`.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Var<f64>) -> Var<f64>) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                let fp = f(&Var::constant(plus)).item();
                let fm = f(&Var::constant(minus)).item();
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn check(x: Tensor<f64>, f: impl Fn(&Var<f64>) -> Var<f64>) {
        let v = Var::param(x.clone());
        let analytic = f(&v).backward().get(&v);
        let numeric = numeric_grad(&x, &f);
        for (a, n) in analytic.data().iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    fn weights(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + seed) * 0.37).sin()).collect()
    }

    #[test]
    fn grad_matmul_both_sides() {
        let b = Var::constant(t(&[3, 2], &weights(6, 1.0)));
        check(t(&[2, 3], &weights(6, 2.0)), |x| {
            x.matmul(&b).mul(&x.matmul(&b)).sum()
        });
        let a = Var::constant(t(&[2, 3], &weights(6, 3.0)));
        check(t(&[3, 2], &weights(6, 4.0)), |x| {
            let y = a.matmul(x);
            y.mul(&y).sum()
        });
    }

    #[test]
    fn grad_layer_norm_gelu_softmax() {
        let w = Var::constant(t(&[2, 4], &weights(8, 5.0)));
        let g = Var::constant(t(&[4], &[1.0, 0.5, -0.3, 2.0]));
        let b = Var::constant(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
        check(t(&[2, 4], &weights(8, 6.0)), |x| {
            x.layer_norm(&g, &b, 1e-5)
                .gelu()
                .softmax_rows()
                .mul(&w)
                .sum()
        });
        let x = Var::constant(t(&[2, 4], &weights(8, 7.0)));
        check(t(&[4], &[1.0, 0.5, -0.3, 2.0]), |gain| {
            x.layer_norm(gain, &b, 1e-5).mul(&w).sum()
        });
    }

    #[test]
    fn grad_structural_ops() {
        let w = Var::constant(t(&[3, 5], &weights(15, 8.0)));
        check(t(&[3, 4], &weights(12, 9.0)), |x| {
            let a = x.slice_cols(1, 2);
            let b = x.slice_cols(0, 3);
            Var::concat_cols(&[a, b]).mul(&w).sum()
        });
        let w2 = Var::constant(t(&[7, 2], &weights(14, 10.0)));
        check(t(&[2, 2], &weights(4, 11.0)), |x| {
            let other = Var::constant(t(&[3, 2], &weights(6, 12.0)));
            Var::concat_rows(&[x.clone(), other, x.scale(2.0)])
                .mul(&w2)
                .sum()
        });
        let col = Var::constant(t(&[3, 1], &[0.5, -1.0, 2.0]));
        let w3 = Var::constant(t(&[3, 2], &weights(6, 13.0)));
        check(t(&[3, 2], &weights(6, 14.0)), |x| {
            x.mul_col(&col).mul(&w3).sum()
        });
        let m = Var::constant(t(&[3, 2], &weights(6, 15.0)));
        check(t(&[3, 1], &[0.5, -1.0, 2.0]), |c| {
            m.mul_col(c).mul(&w3).sum()
        });
        let bias_target = Var::constant(t(&[2, 3], &weights(6, 16.0)));
        check(t(&[3], &[0.1, 0.2, 0.3]), |bias| {
            let base = Var::constant(t(&[2, 3], &weights(6, 17.0)));
            base.add_row(bias).mul(&bias_target).sum()
        });
    }

    #[test]
    fn grad_embedding_repeated_ids() {
        let w = Var::constant(t(&[3, 2], &weights(6, 18.0)));
        check(t(&[4, 2], &weights(8, 19.0)), |table| {
            Var::embedding(table, &[1, 3, 1]).unwrap().mul(&w).sum()
        });
    }

    #[test]
    fn grad_attention_all_inputs() {
        let k = Var::constant(t(&[3, 2], &weights(6, 20.0)));
        let v = Var::constant(t(&[3, 2], &weights(6, 21.0)));
        let w = Var::constant(t(&[2, 2], &weights(4, 22.0)));
        let mask = [true, false, true, true, true, false];
        check(t(&[2, 2], &weights(4, 23.0)), |q| {
            attention(q, &k, &v, Some(&mask), AttentionSite::OTHER)
                .unwrap()
                .mul(&w)
                .sum()
        });
        let q = Var::constant(t(&[2, 2], &weights(4, 24.0)));
        check(t(&[3, 2], &weights(6, 25.0)), |k| {
            attention(&q, k, &v, None, AttentionSite::OTHER)
                .unwrap()
                .mul(&w)
                .sum()
        });
        check(t(&[3, 2], &weights(6, 26.0)), |v| {
            attention(&q, &k, v, Some(&mask), AttentionSite::OTHER)
                .unwrap()
                .mul(&w)
                .sum()
        });
    }

    #[test]
    fn grad_cross_entropy() {
        check(t(&[3, 4], &weights(12, 27.0)), |z| {
            cross_entropy_smoothed(z, &[0, 3, 1], 0.1).unwrap()
        });
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let q = Var::constant(t(&[1, 2], &[0.3, -0.7]));
        let k = Var::constant(t(&[1, 2], &[1.5, 2.0]));
        let v = Var::constant(t(&[1, 2], &[4.0, -9.0]));
        let out = attention(&q, &k, &v, None, AttentionSite::OTHER).unwrap();
        assert_eq!(out.value().data(), &[4.0, -9.0]);
    }

    #[test]
    fn attention_equal_scores_give_column_mean() {
        let q = Var::constant(t(&[1, 2], &[0.0, 1.0]));
        let k = Var::constant(t(&[3, 2], &[1.0, 0.0, 2.0, 0.0, -3.0, 0.0]));
        let v = Var::constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]));
        let out = attention(&q, &k, &v, None, AttentionSite::OTHER).unwrap();
        assert!((out.value().data()[0] - 3.0).abs() < 1e-12);
        assert!((out.value().data()[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn attention_two_by_two_hand_case() {
        // Scores are I/sqrt(2); row 0 weights [e^a, 1]/(e^a + 1) with a = 1/sqrt(2).
        let a = (0.5f64).sqrt().exp();
        let w_hi = a / (a + 1.0);
        let w_lo = 1.0 / (a + 1.0);
        let expected = [
            w_hi * 1.0 + w_lo * 3.0,
            w_hi * 2.0 + w_lo * 4.0,
            w_lo * 1.0 + w_hi * 3.0,
            w_lo * 2.0 + w_hi * 4.0,
        ];
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let out = attention(
            &Var::constant(eye.clone()),
            &Var::constant(eye),
            &Var::constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])),
            None,
            AttentionSite::OTHER,
        )
        .unwrap();
        for (g, e) in out.value().data().iter().zip(expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn all_true_mask_is_bit_identical_to_no_mask() {
        let q = Var::constant(t(&[2, 3], &weights(6, 30.0)));
        let k = Var::constant(t(&[4, 3], &weights(12, 31.0)));
        let v = Var::constant(t(&[4, 3], &weights(12, 32.0)));
        let a = attention(&q, &k, &v, None, AttentionSite::OTHER).unwrap();
        let b = attention(&q, &k, &v, Some(&[true; 8]), AttentionSite::OTHER).unwrap();
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let q = Var::constant(t(&[2, 1], &[1.0, 1.0]));
        let k = Var::constant(t(&[2, 1], &[1.0, 1.0]));
        let err = attention(
            &q,
            &k,
            &k,
            Some(&[true, false, false, false]),
            AttentionSite::OTHER,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateMask { row: 1 }));
    }

    #[test]
    fn attention_reports_score_cells() {
        let rec = Recorder::start();
        let q = Var::<f32>::constant(Tensor::zeros(&[5, 2]));
        let k = Var::<f32>::constant(Tensor::zeros(&[7, 2]));
        attention(
            &q,
            &k,
            &k,
            None,
            AttentionSite::new(AttentionKind::Cross, 1, 0),
        )
        .unwrap();
        let events = rec.finish();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].entries(), 35);
        assert_eq!(events[0].site.layer, 1);
    }

    #[test]
    fn cross_entropy_uniform_and_perfect() {
        let z = Var::<f64>::constant(Tensor::zeros(&[2, 8]));
        let loss = cross_entropy_smoothed(&z, &[3, 5], 0.0).unwrap().item();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
        let mut peaked = Tensor::<f64>::zeros(&[1, 8]);
        peaked.data_mut()[2] = 60.0;
        let loss = cross_entropy_smoothed(&Var::constant(peaked), &[2], 0.0)
            .unwrap()
            .item();
        assert!(loss < 1e-20);
    }

    #[test]
    fn cross_entropy_smoothing_hand_value() {
        // logits [2,0,0,0]: lse = ln(e^2 + 3); NLL_0 = lse - 2; mean NLL = lse - 0.5.
        let lse = (2f64.exp() + 3.0).ln();
        let expected = 0.9 * (lse - 2.0) + 0.1 * (lse - 0.5);
        let z = Var::constant(t(&[1, 4], &[2.0, 0.0, 0.0, 0.0]));
        let got = cross_entropy_smoothed(&z, &[0], 0.1).unwrap().item();
        assert!((got - expected).abs() < 1e-12);
        assert!((expected - 0.490_75).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let z = Var::<f32>::constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            cross_entropy_smoothed(&z, &[4], 0.1),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn inference_nodes_drop_their_inputs() {
        let x = Var::<f32>::constant(Tensor::zeros(&[2, 2]));
        let y = x.gelu().sum();
        assert!(!y.requires_grad());
        assert!(matches!(y.0.op, Op::Leaf));
    }

    #[test]
    fn clip_bounds_global_norm() {
        let mut g = Gradients(BTreeMap::from([
            ("a".to_string(), t(&[2], &[3.0, 4.0])),
            ("b".to_string(), t(&[1], &[12.0])),
        ]));
        let before = g.clip_global_norm(1.0);
        assert!((before - 13.0).abs() < 1e-12);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
