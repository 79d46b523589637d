//! Reverse-mode automatic differentiation over dynamic-dimension `f64` arrays.
//!
//! A [`Tape`] records every operation as a node with a backward closure.
//! Calling [`Tape::backward`] on a scalar node propagates gradients to every
//! leaf, which the trainer reads back for its parameter update. Arrays are
//! small (a handful of nodes and timestamps per window), so all operations
//! work on owned `ArrayD<f64>` values without any view gymnastics.

use ndarray::{concatenate, Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &[&ArrayD<f64>], &ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Gradients with respect to every node on the tape; only leaves are usually read.
pub struct Grads {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.slots[v.0].as_ref()
    }

    /// Gradient of a leaf, zero-filled if the leaf never received one.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match &self.slots[v.0] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Sum `grad` down to `shape`, undoing NumPy-style broadcasting.
fn reduce_to_shape(grad: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &s) in shape.iter().enumerate() {
        if g.shape()[ax] != s {
            debug_assert_eq!(s, 1, "unreducible broadcast shape");
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn broadcast_binary(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    // Compute the common broadcast shape, then evaluate elementwise.
    let nd = a.ndim().max(b.ndim());
    let mut shape = vec![1usize; nd];
    for (i, s) in shape.iter_mut().enumerate() {
        let sa = if i + a.ndim() >= nd { a.shape()[i + a.ndim() - nd] } else { 1 };
        let sb = if i + b.ndim() >= nd { b.shape()[i + b.ndim() - nd] } else { 1 };
        assert!(sa == sb || sa == 1 || sb == 1, "incompatible broadcast {:?} vs {:?}", a.shape(), b.shape());
        *s = sa.max(sb);
    }
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node { value, parents, backward });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf (parameter or constant input).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], None)
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf1(&mut self, value: Array1<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), v))
    }

    // ---- elementwise with broadcasting ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x + y);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|g, ps, _| {
                vec![reduce_to_shape(g, ps[0].shape()), reduce_to_shape(g, ps[1].shape())]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x - y);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|g, ps, _| {
                vec![
                    reduce_to_shape(g, ps[0].shape()),
                    reduce_to_shape(&g.mapv(|x| -x), ps[1].shape()),
                ]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x * y);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|g, ps, _| {
                let ga = broadcast_binary(g, ps[1], |x, y| x * y);
                let gb = broadcast_binary(g, ps[0], |x, y| x * y);
                vec![reduce_to_shape(&ga, ps[0].shape()), reduce_to_shape(&gb, ps[1].shape())]
            })),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, vec![a.0], Some(Box::new(move |g, _, _| vec![g.mapv(|x| x * c)])))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, vec![a.0], Some(Box::new(|g, _, _| vec![g.clone()])))
    }

    // ---- unary nonlinearities ----

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, vec![a.0], Some(Box::new(|g, _, out| vec![g * out])))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|g, _, out| {
                let d = out.mapv(|s| s * (1.0 - s));
                vec![g * &d]
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|g, _, out| {
                let d = out.mapv(|t| 1.0 - t * t);
                vec![g * &d]
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|g, ps, _| {
                let d = ps[0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![g * &d]
            })),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|g, ps, _| {
                let d = ps[0].mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                vec![g * &d]
            })),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|g, ps, _| vec![g * &ps[0].mapv(|x| 2.0 * x)])),
        )
    }

    // ---- linear algebra ----

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone().into_dimensionality::<Ix2>().expect("matmul lhs 2d");
        let bv = self.value(b).clone().into_dimensionality::<Ix2>().expect("matmul rhs 2d");
        let v = av.dot(&bv).into_dyn();
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|g, ps, _| {
                let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
                let a2 = ps[0].clone().into_dimensionality::<Ix2>().unwrap();
                let b2 = ps[1].clone().into_dimensionality::<Ix2>().unwrap();
                vec![g2.dot(&b2.t()).into_dyn(), a2.t().dot(&g2).into_dyn()]
            })),
        )
    }

    /// Batched matrix product over leading axis: (B,m,k) x (B,k,n) -> (B,m,n).
    pub fn bmatmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone().into_dimensionality::<Ix3>().expect("bmatmul lhs 3d");
        let bv = self.value(b).clone().into_dimensionality::<Ix3>().expect("bmatmul rhs 3d");
        let (bsz, m, _k) = av.dim();
        let n = bv.dim().2;
        let mut out = Array3::<f64>::zeros((bsz, m, n));
        for i in 0..bsz {
            out.index_axis_mut(Axis(0), i)
                .assign(&av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i)));
        }
        self.push(
            out.into_dyn(),
            vec![a.0, b.0],
            Some(Box::new(|g, ps, _| {
                let g3 = g.clone().into_dimensionality::<Ix3>().unwrap();
                let a3 = ps[0].clone().into_dimensionality::<Ix3>().unwrap();
                let b3 = ps[1].clone().into_dimensionality::<Ix3>().unwrap();
                let mut ga = Array3::<f64>::zeros(a3.dim());
                let mut gb = Array3::<f64>::zeros(b3.dim());
                for i in 0..g3.dim().0 {
                    let gi = g3.index_axis(Axis(0), i);
                    ga.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&b3.index_axis(Axis(0), i).t()));
                    gb.index_axis_mut(Axis(0), i)
                        .assign(&a3.index_axis(Axis(0), i).t().dot(&gi));
                }
                vec![ga.into_dyn(), gb.into_dyn()]
            })),
        )
    }

    /// Inverse of a square 2-D matrix via Gaussian elimination with partial pivoting.
    pub fn inverse(&mut self, a: Var) -> crate::error::Result<Var> {
        let av = self.value(a).clone().into_dimensionality::<Ix2>().expect("inverse 2d");
        let inv = invert_matrix(&av)?;
        Ok(self.push(
            inv.into_dyn(),
            vec![a.0],
            Some(Box::new(|g, _, out| {
                // d/dA of A^{-1}: grad_A = -A^{-T} G A^{-T}
                let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
                let inv2 = out.clone().into_dimensionality::<Ix2>().unwrap();
                let ga = -inv2.t().dot(&g2).dot(&inv2.t());
                vec![ga.into_dyn()]
            })),
        ))
    }

    // ---- shape manipulation ----

    pub fn permute(&mut self, a: Var, axes: Vec<usize>) -> Var {
        let v = self
            .value(a)
            .clone()
            .permuted_axes(IxDyn(&axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse_axes = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse_axes[ax] = i;
        }
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                vec![g.clone().permuted_axes(IxDyn(&inverse_axes)).as_standard_layout().to_owned()]
            })),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let v = self
            .value(a)
            .clone()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(&shape))
            .expect("reshape size mismatch");
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|g, ps, _| {
                vec![g
                    .clone()
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(ps[0].shape()))
                    .unwrap()]
            })),
        )
    }

    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Var {
        let views: Vec<_> = vars.iter().map(|v| self.value(*v).view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let parents: Vec<usize> = vars.iter().map(|v| v.0).collect();
        self.push(
            v,
            parents,
            Some(Box::new(move |g, ps, _| {
                let mut grads = Vec::with_capacity(ps.len());
                let mut offset = 0;
                for p in ps {
                    let len = p.shape()[axis];
                    let gi = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + len))
                        .to_owned();
                    grads.push(gi);
                    offset += len;
                }
                grads
            })),
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self
            .value(a)
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |g, ps, _| {
                let mut full = ArrayD::zeros(IxDyn(ps[0].shape()));
                full.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                vec![full]
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![a.0],
            Some(Box::new(|g, ps, _| {
                let gv = g.iter().next().copied().unwrap_or(0.0);
                vec![ArrayD::from_elem(IxDyn(ps[0].shape()), gv)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    // ---- structured ops ----

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let x = self.value(a).clone();
        let last = x.ndim() - 1;
        let mut v = x.clone();
        for mut lane in v.lanes_mut(Axis(last)) {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in lane.iter_mut() {
                *e = (*e - m).exp();
                z += *e;
            }
            for e in lane.iter_mut() {
                *e /= z;
            }
        }
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |g, _, out| {
                let mut ga = out.clone();
                let last = out.ndim() - 1;
                ndarray::Zip::from(ga.lanes_mut(Axis(last)))
                    .and(g.lanes(Axis(last)))
                    .and(out.lanes(Axis(last)))
                    .for_each(|mut gl, gv, ov| {
                        let dot: f64 = gv.iter().zip(ov.iter()).map(|(a, b)| a * b).sum();
                        for (e, (&gi, &oi)) in gl.iter_mut().zip(gv.iter().zip(ov.iter())) {
                            *e = oi * (gi - dot);
                        }
                    });
                vec![ga]
            })),
        )
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm_last(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x).clone();
        let last = xv.ndim() - 1;
        let n = xv.shape()[last] as f64;
        let gv = self.value(gain).clone();
        let bv = self.value(bias).clone();
        let mut normed = xv.clone();
        for mut lane in normed.lanes_mut(Axis(last)) {
            let mean = lane.sum() / n;
            let var = lane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for e in lane.iter_mut() {
                *e = (*e - mean) * inv;
            }
        }
        let g1 = gv.clone().into_dimensionality::<Ix1>().expect("gain 1d");
        let b1 = bv.clone().into_dimensionality::<Ix1>().expect("bias 1d");
        let mut out = normed.clone();
        for mut lane in out.lanes_mut(Axis(last)) {
            for (i, e) in lane.iter_mut().enumerate() {
                *e = *e * g1[i] + b1[i];
            }
        }
        self.push(
            out,
            vec![x.0, gain.0, bias.0],
            Some(Box::new(move |g, ps, _| {
                let xv = ps[0];
                let gain1 = ps[1].clone().into_dimensionality::<Ix1>().unwrap();
                let last = xv.ndim() - 1;
                let n = xv.shape()[last] as f64;
                let mut gx = xv.clone();
                let mut ggain = Array1::<f64>::zeros(gain1.len());
                let mut gbias = Array1::<f64>::zeros(gain1.len());
                ndarray::Zip::from(gx.lanes_mut(Axis(last)))
                    .and(xv.lanes(Axis(last)))
                    .and(g.lanes(Axis(last)))
                    .for_each(|mut gxl, xl, gl| {
                        let mean = xl.sum() / n;
                        let var = xl.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xl.iter().map(|&v| (v - mean) * inv).collect();
                        // dL/dxhat_i = g_i * gain_i
                        let dxhat: Vec<f64> =
                            gl.iter().enumerate().map(|(i, &gi)| gi * gain1[i]).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum();
                        for i in 0..xl.len() {
                            gxl[i] = inv / n * (n * dxhat[i] - sum_dxhat - xhat[i] * sum_dxhat_xhat);
                            ggain[i] += gl[i] * xhat[i];
                            gbias[i] += gl[i];
                        }
                    });
                vec![gx, ggain.into_dyn(), gbias.into_dyn()]
            })),
        )
    }

    /// Lower-triangular Toeplitz matrix from kernel taps: T[i][j] = k[i-j] for j <= i.
    /// Multiplying T by a sequence performs the causal convolution y_t = sum k_i u_{t-i}.
    pub fn causal_toeplitz(&mut self, k: Var) -> Var {
        let kv = self.value(k).clone().into_dimensionality::<Ix1>().expect("kernel 1d");
        let l = kv.len();
        let mut t = Array2::<f64>::zeros((l, l));
        for i in 0..l {
            for j in 0..=i {
                t[[i, j]] = kv[i - j];
            }
        }
        self.push(
            t.into_dyn(),
            vec![k.0],
            Some(Box::new(move |g, _, _| {
                let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
                let mut gk = Array1::<f64>::zeros(l);
                for i in 0..l {
                    for j in 0..=i {
                        gk[i - j] += g2[[i, j]];
                    }
                }
                vec![gk.into_dyn()]
            })),
        )
    }

    pub fn reverse_axis(&mut self, a: Var, axis: usize) -> Var {
        let mut v = self.value(a).clone();
        v.invert_axis(Axis(axis));
        self.push(
            v.as_standard_layout().to_owned(),
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                let mut gr = g.clone();
                gr.invert_axis(Axis(axis));
                vec![gr.as_standard_layout().to_owned()]
            })),
        )
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, root: Var) -> Grads {
        assert!(
            self.value(root).len() == 1,
            "backward root must be scalar, got shape {:?}",
            self.value(root).shape()
        );
        let mut slots: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        slots[root.0] = Some(ArrayD::from_elem(IxDyn(self.value(root).shape()), 1.0));
        for i in (0..=root.0).rev() {
            let Some(grad) = slots[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(back) = &node.backward {
                let parent_values: Vec<&ArrayD<f64>> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let parent_grads = back(&grad, &parent_values, &node.value);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut slots[p] {
                        Some(existing) => *existing += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            slots[i] = Some(grad);
        }
        Grads { slots }
    }
}

/// Plain Gaussian-elimination inverse used both on and off the tape.
pub fn invert_matrix(a: &Array2<f64>) -> crate::error::Result<Array2<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "inverse requires a square matrix");
    let mut aug = Array2::<f64>::zeros((n, 2 * n));
    aug.slice_mut(ndarray::s![.., ..n]).assign(a);
    for i in 0..n {
        aug[[i, n + i]] = 1.0;
    }
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if aug[[row, col]].abs() > aug[[pivot, col]].abs() {
                pivot = row;
            }
        }
        let pv = aug[[pivot, col]];
        if pv.abs() < 1e-300 {
            return Err(crate::error::AdastiError::Numerical(format!(
                "singular matrix in inversion (pivot {:.3e} at column {col})",
                pv
            )));
        }
        if pivot != col {
            for j in 0..2 * n {
                aug.swap([pivot, j], [col, j]);
            }
        }
        let inv_pv = 1.0 / aug[[col, col]];
        for j in 0..2 * n {
            aug[[col, j]] *= inv_pv;
        }
        for row in 0..n {
            if row != col {
                let factor = aug[[row, col]];
                if factor != 0.0 {
                    for j in 0..2 * n {
                        aug[[row, j]] -= factor * aug[[col, j]];
                    }
                }
            }
        }
    }
    Ok(aug.slice(ndarray::s![.., n..]).to_owned())
}

/// Estimate of the 1-norm condition number, reported in numerical errors.
pub fn condition_estimate(a: &Array2<f64>) -> f64 {
    let norm1 = |m: &Array2<f64>| -> f64 {
        (0..m.ncols())
            .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    match invert_matrix(a) {
        Ok(inv) => norm1(a) * norm1(&inv),
        Err(_) => f64::INFINITY,
    }
}
