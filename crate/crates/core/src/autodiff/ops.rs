//! Tape operations: forward computation plus recorded backward closures.
//!
//! Shape mismatches are programming errors and panic; contract-level
//! validation happens at module boundaries. Ops that need their own
//! output during backward (sigmoid, softmax, ...) capture a clone of it
//! in the closure.

use ndarray::{concatenate, Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};
use rand::Rng as _;

use super::{BackFn, NodeId, Tape};
use crate::rng::Rng;

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("2-d node")
}

fn as1(v: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    v.view().into_dimensionality::<Ix1>().expect("1-d node")
}

impl Tape {
    // ----- elementwise binary -----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) + self.value(b);
        let needs = self.needs_grad(&[a, b]);
        self.push(
            v,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |_, g, sink| {
                    sink.add(a, g.clone());
                    sink.add(b, g.clone());
                })
            }),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) - self.value(b);
        let needs = self.needs_grad(&[a, b]);
        self.push(
            v,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |_, g, sink| {
                    sink.add(a, g.clone());
                    sink.add(b, -g);
                })
            }),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) * self.value(b);
        let needs = self.needs_grad(&[a, b]);
        self.push(
            v,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| {
                    sink.add(a, g * t.value(b));
                    sink.add(b, g * t.value(a));
                })
            }),
        )
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) / self.value(b);
        let needs = self.needs_grad(&[a, b]);
        self.push(
            v,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| {
                    let bv = t.value(b);
                    sink.add(a, g / bv);
                    sink.add(b, -(g * t.value(a)) / (bv * bv));
                })
            }),
        )
    }

    // ----- elementwise unary -----

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -self.value(a);
        let needs = self.needs_grad(&[a]);
        self.push(
            v,
            needs,
            needs.then(|| -> BackFn { Box::new(move |_, g, sink| sink.add(a, -g)) }),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        let needs = self.needs_grad(&[a]);
        self.push(
            v,
            needs,
            needs.then(|| -> BackFn { Box::new(move |_, g, sink| sink.add(a, g * c)) }),
        )
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) + c;
        let needs = self.needs_grad(&[a]);
        self.push(
            v,
            needs,
            needs.then(|| -> BackFn { Box::new(move |_, g, sink| sink.add(a, g.clone())) }),
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let needs = self.needs_grad(&[a]);
        self.push(
            v,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| {
                    let mask = t.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    sink.add(a, g * &mask);
                })
            }),
        )
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        let needs = self.needs_grad(&[a]);
        self.push(
            v,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| {
                    let mask = t.value(a).mapv(|x| if x > 0.0 { 1.0 } else { slope });
                    sink.add(a, g * &mask);
                })
            }),
        )
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(sigmoid_scalar);
        let needs = self.needs_grad(&[a]);
        let back = needs.then(|| -> BackFn {
            let y = v.clone();
            Box::new(move |_, g, sink| sink.add(a, g * &y.mapv(|u| u * (1.0 - u))))
        });
        self.push(v, needs, back)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        let needs = self.needs_grad(&[a]);
        let back = needs.then(|| -> BackFn {
            let y = v.clone();
            Box::new(move |_, g, sink| sink.add(a, g * &y.mapv(|u| 1.0 - u * u)))
        });
        self.push(v, needs, back)
    }

    /// Numerically stable ln(1 + e^x); derivative is sigmoid(x).
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        let needs = self.needs_grad(&[a]);
        self.push(
            v,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| {
                    sink.add(a, g * &t.value(a).mapv(sigmoid_scalar));
                })
            }),
        )
    }

    /// sqrt(x + eps); callers guarantee x + eps > 0.
    pub fn sqrt_eps(&mut self, a: NodeId, eps: f64) -> NodeId {
        let v = self.value(a).mapv(|x| (x + eps).sqrt());
        let needs = self.needs_grad(&[a]);
        let back = needs.then(|| -> BackFn {
            let y = v.clone();
            Box::new(move |_, g, sink| sink.add(a, g * &y.mapv(|u| 0.5 / u)))
        });
        self.push(v, needs, back)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * x);
        let needs = self.needs_grad(&[a]);
        self.push(
            v,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| sink.add(a, g * &(t.value(a) * 2.0)))
            }),
        )
    }

    /// Natural log; inputs must be positive (callers clamp first).
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::ln);
        let needs = self.needs_grad(&[a]);
        self.push(
            v,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| sink.add(a, g / t.value(a)))
            }),
        )
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        let needs = self.needs_grad(&[a]);
        self.push(
            v,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| {
                    let mask = t
                        .value(a)
                        .mapv(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
                    sink.add(a, g * &mask);
                })
            }),
        )
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| 1.0 / x);
        let needs = self.needs_grad(&[a]);
        self.push(
            v,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| {
                    let av = t.value(a);
                    sink.add(a, -(g / (av * av)));
                })
            }),
        )
    }

    // ----- broadcasting -----

    /// `a[r, c] + v[c]` for every row.
    pub fn add_row(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (r, c) = dims2(self.value(a));
        assert_eq!(self.value(v).len(), c);
        let out = self.value(a) + &self.value(v).broadcast(IxDyn(&[r, c])).unwrap();
        let needs = self.needs_grad(&[a, v]);
        self.push(
            out,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |_, g, sink| {
                    sink.add(a, g.clone());
                    sink.add(v, g.sum_axis(Axis(0)));
                })
            }),
        )
    }

    /// `a[r, c] + v[r]` for every column.
    pub fn add_col(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (r, c) = dims2(self.value(a));
        assert_eq!(self.value(v).len(), r);
        let out = self.value(a) + &colvec(self.value(v), r, c);
        let needs = self.needs_grad(&[a, v]);
        self.push(
            out,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |_, g, sink| {
                    sink.add(a, g.clone());
                    sink.add(v, g.sum_axis(Axis(1)));
                })
            }),
        )
    }

    /// `a[r, c] * v[c]` for every row.
    pub fn mul_row(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (r, c) = dims2(self.value(a));
        assert_eq!(self.value(v).len(), c);
        let out = self.value(a) * &self.value(v).broadcast(IxDyn(&[r, c])).unwrap();
        let needs = self.needs_grad(&[a, v]);
        self.push(
            out,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| {
                    let (r, c) = dims2(t.value(a));
                    sink.add(a, g * &t.value(v).broadcast(IxDyn(&[r, c])).unwrap());
                    sink.add(v, (g * t.value(a)).sum_axis(Axis(0)));
                })
            }),
        )
    }

    /// `a[r, c] * v[r]` for every column.
    pub fn mul_col(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (r, c) = dims2(self.value(a));
        assert_eq!(self.value(v).len(), r);
        let out = self.value(a) * &colvec(self.value(v), r, c);
        let needs = self.needs_grad(&[a, v]);
        self.push(
            out,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| {
                    let (r, c) = dims2(t.value(a));
                    sink.add(a, g * &colvec(t.value(v), r, c));
                    sink.add(v, (g * t.value(a)).sum_axis(Axis(1)));
                })
            }),
        )
    }

    /// `x[b, ch, h, w] + v[ch]` broadcast over batch and space.
    pub fn add_chan(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        assert_eq!(shape.len(), 4);
        assert_eq!(self.value(v).len(), shape[1]);
        let out = self.value(x) + &chanvec(self.value(v), &shape);
        let needs = self.needs_grad(&[x, v]);
        self.push(
            out,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |_, g, sink| {
                    sink.add(x, g.clone());
                    sink.add(v, g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)));
                })
            }),
        )
    }

    /// `x[b, ch, h, w] * v[ch]`.
    pub fn mul_chan(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        assert_eq!(shape.len(), 4);
        assert_eq!(self.value(v).len(), shape[1]);
        let out = self.value(x) * &chanvec(self.value(v), &shape);
        let needs = self.needs_grad(&[x, v]);
        self.push(
            out,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| {
                    let shape = t.value(x).shape().to_vec();
                    sink.add(x, g * &chanvec(t.value(v), &shape));
                    sink.add(
                        v,
                        (g * t.value(x))
                            .sum_axis(Axis(3))
                            .sum_axis(Axis(2))
                            .sum_axis(Axis(0)),
                    );
                })
            }),
        )
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = {
            let av = as2(self.value(a));
            let bv = as2(self.value(b));
            assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
            av.dot(&bv).into_dyn()
        };
        let needs = self.needs_grad(&[a, b]);
        self.push(
            out,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| {
                    let g2 = as2(g);
                    let av = as2(t.value(a));
                    let bv = as2(t.value(b));
                    sink.add(a, g2.dot(&bv.t()).into_dyn());
                    sink.add(b, av.t().dot(&g2).into_dyn());
                })
            }),
        )
    }

    /// Batched matmul: `[n, p, q] x [n, q, r] -> [n, p, r]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = {
            let av = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
            let bv = self.value(b).view().into_dimensionality::<Ix3>().unwrap();
            let (n, p, q) = av.dim();
            let (nb, qb, r) = bv.dim();
            assert_eq!(n, nb);
            assert_eq!(q, qb);
            let mut out = ndarray::Array3::<f64>::zeros((n, p, r));
            for i in 0..n {
                let prod = av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i));
                out.index_axis_mut(Axis(0), i).assign(&prod);
            }
            out.into_dyn()
        };
        let needs = self.needs_grad(&[a, b]);
        self.push(
            out,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| {
                    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                    let av = t.value(a).view().into_dimensionality::<Ix3>().unwrap();
                    let bv = t.value(b).view().into_dimensionality::<Ix3>().unwrap();
                    let (n, p, q) = av.dim();
                    let r = bv.dim().2;
                    let mut ga = ndarray::Array3::<f64>::zeros((n, p, q));
                    let mut gb = ndarray::Array3::<f64>::zeros((n, q, r));
                    for i in 0..n {
                        let gi = g3.index_axis(Axis(0), i);
                        ga.index_axis_mut(Axis(0), i)
                            .assign(&gi.dot(&bv.index_axis(Axis(0), i).t()));
                        gb.index_axis_mut(Axis(0), i)
                            .assign(&av.index_axis(Axis(0), i).t().dot(&gi));
                    }
                    sink.add(a, ga.into_dyn());
                    sink.add(b, gb.into_dyn());
                })
            }),
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = as2(self.value(a))
            .t()
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        let needs = self.needs_grad(&[a]);
        self.push(
            out,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |_, g, sink| {
                    sink.add(a, as2(g).t().as_standard_layout().to_owned().into_dyn());
                })
            }),
        )
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let axes_owned = axes.to_vec();
        let out = self
            .value(a)
            .view()
            .permuted_axes(axes_owned.clone())
            .as_standard_layout()
            .to_owned();
        let needs = self.needs_grad(&[a]);
        self.push(
            out,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |_, g, sink| {
                    let mut inv = vec![0usize; axes_owned.len()];
                    for (i, &ax) in axes_owned.iter().enumerate() {
                        inv[ax] = i;
                    }
                    sink.add(
                        a,
                        g.view().permuted_axes(inv).as_standard_layout().to_owned(),
                    );
                })
            }),
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let old_shape = self.value(a).shape().to_vec();
        let out = self
            .value(a)
            .view()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let needs = self.needs_grad(&[a]);
        self.push(
            out,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |_, g, sink| {
                    sink.add(
                        a,
                        g.view()
                            .as_standard_layout()
                            .to_owned()
                            .into_shape_with_order(IxDyn(&old_shape))
                            .unwrap(),
                    );
                })
            }),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> NodeId {
        let out = {
            let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
            concatenate(Axis(axis), &views).expect("concat shapes")
        };
        let sizes: Vec<usize> = parts
            .iter()
            .map(|&p| self.value(p).shape()[axis])
            .collect();
        let parts_owned = parts.to_vec();
        let needs = self.needs_grad(parts);
        self.push(
            out,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |_, g, sink| {
                    let mut start = 0isize;
                    for (&p, &sz) in parts_owned.iter().zip(&sizes) {
                        let sl = g
                            .slice_axis(
                                Axis(axis),
                                ndarray::Slice::from(start..start + sz as isize),
                            )
                            .as_standard_layout()
                            .to_owned();
                        sink.add(p, sl);
                        start += sz as isize;
                    }
                })
            }),
        )
    }

    // ----- gathers -----

    /// Row gather on a 2-d array: `out[i, :] = x[idx[i], :]`. Backward
    /// scatter-adds, so repeated indices accumulate.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let out = {
            let xv = as2(self.value(x));
            let mut out = Array2::<f64>::zeros((idx.len(), xv.ncols()));
            for (i, &r) in idx.iter().enumerate() {
                assert!(r < xv.nrows(), "gather_rows index out of range");
                out.row_mut(i).assign(&xv.row(r));
            }
            out.into_dyn()
        };
        let idx_owned = idx.to_vec();
        let needs = self.needs_grad(&[x]);
        self.push(
            out,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| {
                    let g2 = as2(g);
                    let (rows, cols) = dims2(t.value(x));
                    let mut gx = Array2::<f64>::zeros((rows, cols));
                    for (i, &r) in idx_owned.iter().enumerate() {
                        let mut row = gx.row_mut(r);
                        row += &g2.row(i);
                    }
                    sink.add(x, gx.into_dyn());
                })
            }),
        )
    }

    /// Per-row column gather: `out[i] = x[i, cols[i]]`.
    pub fn gather_cols(&mut self, x: NodeId, cols: &[usize]) -> NodeId {
        let out = {
            let xv = as2(self.value(x));
            assert_eq!(xv.nrows(), cols.len());
            let v: Array1<f64> = cols.iter().enumerate().map(|(i, &c)| xv[(i, c)]).collect();
            v.into_dyn()
        };
        let cols_owned = cols.to_vec();
        let needs = self.needs_grad(&[x]);
        self.push(
            out,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| {
                    let g1 = as1(g);
                    let (rows, ncols) = dims2(t.value(x));
                    let mut gx = Array2::<f64>::zeros((rows, ncols));
                    for (i, &c) in cols_owned.iter().enumerate() {
                        gx[(i, c)] += g1[i];
                    }
                    sink.add(x, gx.into_dyn());
                })
            }),
        )
    }

    /// Flat-index gather in row-major order: `out[k] = x.flat[idx[k]]`.
    pub fn gather_flat(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let out = {
            let xv = self.value(x).view().as_standard_layout().to_owned();
            let s = xv.as_slice().unwrap();
            let v: Array1<f64> = idx.iter().map(|&k| s[k]).collect();
            v.into_dyn()
        };
        let idx_owned = idx.to_vec();
        let needs = self.needs_grad(&[x]);
        self.push(
            out,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| {
                    let g1 = as1(g);
                    let mut gx = ArrayD::<f64>::zeros(t.value(x).raw_dim());
                    {
                        let gs = gx.as_slice_mut().unwrap();
                        for (k, &fi) in idx_owned.iter().enumerate() {
                            gs[fi] += g1[k];
                        }
                    }
                    sink.add(x, gx);
                })
            }),
        )
    }

    /// Diagonal of a square matrix.
    pub fn diag_part(&mut self, x: NodeId) -> NodeId {
        let out = {
            let xv = as2(self.value(x));
            assert_eq!(xv.nrows(), xv.ncols());
            let v: Array1<f64> = (0..xv.nrows()).map(|i| xv[(i, i)]).collect();
            v.into_dyn()
        };
        let needs = self.needs_grad(&[x]);
        self.push(
            out,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| {
                    let g1 = as1(g);
                    let n = dims2(t.value(x)).0;
                    let mut gx = Array2::<f64>::zeros((n, n));
                    for i in 0..n {
                        gx[(i, i)] = g1[i];
                    }
                    sink.add(x, gx.into_dyn());
                })
            }),
        )
    }

    // ----- reductions -----

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        let needs = self.needs_grad(&[a]);
        self.push(
            v,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| {
                    let gv = *g.iter().next().unwrap();
                    sink.add(a, ArrayD::from_elem(t.value(a).raw_dim(), gv));
                })
            }),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let v = self.value(a).sum_axis(Axis(axis));
        let needs = self.needs_grad(&[a]);
        self.push(
            v,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| {
                    let shape = t.value(a).shape().to_vec();
                    let gexp = g
                        .view()
                        .insert_axis(Axis(axis))
                        .broadcast(IxDyn(&shape))
                        .unwrap()
                        .to_owned();
                    sink.add(a, gexp);
                })
            }),
        )
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let n = self.value(a).shape()[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n)
    }

    // ----- softmax family -----

    /// Softmax over the last axis, numerically stabilized.
    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let last = v.ndim() - 1;
        for mut lane in v.lanes_mut(Axis(last)) {
            let mx = lane.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            lane.mapv_inplace(|x| (x - mx).exp());
            let s = lane.sum();
            lane.mapv_inplace(|x| x / s);
        }
        let needs = self.needs_grad(&[a]);
        let back = needs.then(|| -> BackFn {
            let y = v.clone();
            Box::new(move |_, g, sink| {
                let last = y.ndim() - 1;
                let gy = g * &y;
                let dots = gy.sum_axis(Axis(last)).insert_axis(Axis(last));
                let shape = y.shape().to_vec();
                let gx = &y * &(g - &dots.broadcast(IxDyn(&shape)).unwrap());
                sink.add(a, gx);
            })
        });
        self.push(v, needs, back)
    }

    /// Log-softmax over rows of a 2-d array.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let out = {
            let av = as2(self.value(a));
            let mut out = av.to_owned();
            for mut row in out.rows_mut() {
                let mx = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let lse = row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln() + mx;
                row.mapv_inplace(|x| x - lse);
            }
            out.into_dyn()
        };
        let needs = self.needs_grad(&[a]);
        let back = needs.then(|| -> BackFn {
            let y = out.clone();
            Box::new(move |_, g, sink| {
                let g2 = as2(g);
                let y2 = as2(&y);
                let mut gx = g2.to_owned();
                for (mut grow, yrow) in gx.rows_mut().into_iter().zip(y2.rows()) {
                    let gsum: f64 = grow.sum();
                    for (ge, &ye) in grow.iter_mut().zip(yrow.iter()) {
                        *ge -= ye.exp() * gsum;
                    }
                }
                sink.add(a, gx.into_dyn());
            })
        });
        self.push(out, needs, back)
    }

    // ----- stochastic -----

    /// Inverted dropout; kept activations scale by 1/(1-p). Callers skip
    /// this op entirely in eval mode.
    pub fn dropout(&mut self, a: NodeId, p: f64, rng: &mut Rng) -> NodeId {
        assert!((0.0..1.0).contains(&p));
        if p == 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let mask: ArrayD<f64> = ArrayD::from_shape_fn(self.value(a).raw_dim(), |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let v = self.value(a) * &mask;
        let needs = self.needs_grad(&[a]);
        self.push(
            v,
            needs,
            needs.then(|| -> BackFn { Box::new(move |_, g, sink| sink.add(a, g * &mask)) }),
        )
    }

    // ----- convolution family -----

    /// 2-d convolution, NCHW layout, square stride, zero padding.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let out = {
            let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
            let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
            let (b, c, h, width) = xv.dim();
            let (o, cw, kh, kw) = wv.dim();
            assert_eq!(c, cw, "conv2d channel mismatch");
            let oh = (h + 2 * pad - kh) / stride + 1;
            let ow = (width + 2 * pad - kw) / stride + 1;
            let wmat = wv.to_shape((o, c * kh * kw)).unwrap().to_owned();
            let mut out = Array4::<f64>::zeros((b, o, oh, ow));
            for bi in 0..b {
                let cols = im2col(&xv.index_axis(Axis(0), bi), kh, kw, stride, pad, oh, ow);
                let prod = wmat.dot(&cols);
                out.index_axis_mut(Axis(0), bi)
                    .assign(&prod.into_shape_with_order((o, oh, ow)).unwrap());
            }
            out.into_dyn()
        };
        let needs = self.needs_grad(&[x, w]);
        self.push(
            out,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| {
                    let xv = t.value(x).view().into_dimensionality::<Ix4>().unwrap();
                    let wv = t.value(w).view().into_dimensionality::<Ix4>().unwrap();
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (b, c, _, _) = xv.dim();
                    let (o, _, kh, kw) = wv.dim();
                    let (_, _, oh, ow) = g4.dim();
                    let wmat = wv.to_shape((o, c * kh * kw)).unwrap().to_owned();
                    let mut gw = Array2::<f64>::zeros((o, c * kh * kw));
                    let mut gx = Array4::<f64>::zeros(xv.dim());
                    for bi in 0..b {
                        let cols =
                            im2col(&xv.index_axis(Axis(0), bi), kh, kw, stride, pad, oh, ow);
                        let gb = g4
                            .index_axis(Axis(0), bi)
                            .to_shape((o, oh * ow))
                            .unwrap()
                            .to_owned();
                        gw += &gb.dot(&cols.t());
                        let gcols = wmat.t().dot(&gb);
                        col2im(
                            &gcols,
                            &mut gx.index_axis_mut(Axis(0), bi),
                            kh,
                            kw,
                            stride,
                            pad,
                            oh,
                            ow,
                        );
                    }
                    sink.add(x, gx.into_dyn());
                    sink.add(
                        w,
                        gw.into_shape_with_order(wv.raw_dim()).unwrap().into_dyn(),
                    );
                })
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling on NCHW.
    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let out = {
            let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
            let (b, c, h, w) = xv.dim();
            let mut out = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
            for bi in 0..b {
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let v = xv[(bi, ci, i, j)];
                            out[(bi, ci, 2 * i, 2 * j)] = v;
                            out[(bi, ci, 2 * i + 1, 2 * j)] = v;
                            out[(bi, ci, 2 * i, 2 * j + 1)] = v;
                            out[(bi, ci, 2 * i + 1, 2 * j + 1)] = v;
                        }
                    }
                }
            }
            out.into_dyn()
        };
        let needs = self.needs_grad(&[x]);
        self.push(
            out,
            needs,
            needs.then(|| -> BackFn {
                Box::new(move |t, g, sink| {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (b, c, h, w) = t
                        .value(x)
                        .view()
                        .into_dimensionality::<Ix4>()
                        .unwrap()
                        .dim();
                    let mut gx = Array4::<f64>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            for i in 0..h {
                                for j in 0..w {
                                    gx[(bi, ci, i, j)] = g4[(bi, ci, 2 * i, 2 * j)]
                                        + g4[(bi, ci, 2 * i + 1, 2 * j)]
                                        + g4[(bi, ci, 2 * i, 2 * j + 1)]
                                        + g4[(bi, ci, 2 * i + 1, 2 * j + 1)];
                                }
                            }
                        }
                    }
                    sink.add(x, gx.into_dyn());
                })
            }),
        )
    }
}

pub(crate) fn dims2(v: &ArrayD<f64>) -> (usize, usize) {
    let s = v.shape();
    assert_eq!(s.len(), 2);
    (s[0], s[1])
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn colvec(v: &ArrayD<f64>, r: usize, c: usize) -> ArrayD<f64> {
    v.view()
        .into_shape_with_order(IxDyn(&[r, 1]))
        .unwrap()
        .broadcast(IxDyn(&[r, c]))
        .unwrap()
        .to_owned()
}

fn chanvec(v: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    v.view()
        .into_shape_with_order(IxDyn(&[1, shape[1], 1, 1]))
        .unwrap()
        .broadcast(IxDyn(shape))
        .unwrap()
        .to_owned()
}

fn im2col(
    x: &ndarray::ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[(row, oi * ow + oj)] = x[(ci, ii as usize, jj as usize)];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    gx: &mut ndarray::ArrayViewMut3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (c, h, w) = gx.dim();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        gx[(ci, ii as usize, jj as usize)] += cols[(row, oi * ow + oj)];
                    }
                }
            }
        }
    }
}
