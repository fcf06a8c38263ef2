//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in evaluation order, so node indices
//! are already a topological order. [`Tape::backward`] walks the tape once in
//! reverse and releases each node's value as soon as it has been processed.

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

use kernels::{AttnDims, ConvDims, NormCache};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Norm layer behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-channel mean and biased variance observed in a train-mode batch.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Square,
    Log,
    Gelu,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        dims: ConvDims,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache,
        dims: (usize, usize, usize),
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax {
        x: Var,
    },
    Unary {
        x: Var,
        kind: Unary,
        eps: f64,
    },
    AvgPool {
        x: Var,
        k: usize,
        s: usize,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Roll {
        x: Var,
        axis: usize,
        shift: isize,
    },
    Matmul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    WindowAttention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: Vec<f64>,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
        eps: f64,
    },
    PairDistance {
        emb: Var,
        pairs: Vec<(usize, usize)>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    ClampMax {
        x: Var,
        c: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to the leaves that required them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Attention probabilities retained by a window-attention node.
pub struct AttentionScores<'a> {
    pub shape: Vec<usize>,
    pub probs: &'a [f64],
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_check(op: &'static str, axis: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension {
            op,
            axis: axis.to_string(),
            expected,
            actual,
        });
    }
    Ok(())
}

fn rank_check(op: &'static str, shape: &[usize], expected: usize) -> Result<()> {
    if shape.len() != expected {
        return Err(Error::Rank {
            op,
            expected,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor::new(shape, data).expect("kernel produced consistent shape")
    }

    /// Records a leaf; its gradient is tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        let value = Tensor::new(t.shape().to_vec(), t.into_data()).expect("valid tensor");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t` as a leaf that requires a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t` as a constant leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Attention probabilities `[B, H, L/M, M, M]` of a window-attention node.
    pub fn attention_scores(&self, v: Var) -> Option<AttentionScores<'_>> {
        match &self.nodes[v.0].op {
            Op::WindowAttention { dims, probs, .. } => Some(AttentionScores {
                shape: dims.score_shape(),
                probs,
            }),
            _ => None,
        }
    }

    /// Valid 2-D cross-correlation `[B,Cin,H,W] ⋆ [Cout,Cin,kH,kW] + bias`.
    pub fn conv2d_valid(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        const OP: &str = "conv2d_valid";
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        rank_check(OP, &xs, 4)?;
        rank_check(OP, &ks, 4)?;
        dim_check(OP, "in_channels", ks[1], xs[1])?;
        dim_check(OP, "bias", ks[0], numel(self.shape(bias)))?;
        if ks[2] > xs[2] {
            return Err(Error::Dimension {
                op: OP,
                axis: "height (kernel exceeds input)".into(),
                expected: xs[2],
                actual: ks[2],
            });
        }
        if ks[3] > xs[3] {
            return Err(Error::Dimension {
                op: OP,
                axis: "width (kernel exceeds input)".into(),
                expected: xs[3],
                actual: ks[3],
            });
        }
        let dims = ConvDims {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ks[0],
            kh: ks[2],
            kw: ks[3],
        };
        let y =
            kernels::conv2d_forward(self.data(input), self.data(kernel), self.data(bias), &dims);
        let shape = vec![dims.batch, dims.c_out, dims.out_h(), dims.out_w()];
        Ok(self.push(
            Self::tensor(shape, y),
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            },
            &[input, kernel, bias],
        ))
    }

    /// Per-channel normalization of `[B, C, ...]`.
    ///
    /// Train mode normalizes with batch statistics and returns them so the
    /// caller can maintain running estimates; eval mode uses `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        const OP: &str = "batch_norm";
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::Rank {
                op: OP,
                expected: 4,
                shape: xs,
            });
        }
        let (b, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        dim_check(OP, "gamma", c, numel(self.shape(gamma)))?;
        dim_check(OP, "beta", c, numel(self.shape(beta)))?;
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                if b < 2 {
                    return Err(Error::DegenerateBatch { op: OP, batch: b });
                }
                let (m, v) = kernels::channel_stats(self.data(x), b, c, s);
                let stats = BatchStats {
                    mean: m.clone(),
                    var: v.clone(),
                    count: b * s,
                };
                (m, v, Some(stats))
            }
            NormMode::Eval => {
                let (m, v) = running.ok_or_else(|| {
                    Error::Config("eval-mode batch_norm needs running statistics".into())
                })?;
                dim_check(OP, "running_mean", c, m.len())?;
                dim_check(OP, "running_var", c, v.len())?;
                (m.to_vec(), v.to_vec(), None)
            }
        };
        let (y, cache) = kernels::channel_affine(
            self.data(x),
            &mean,
            &var,
            self.data(gamma),
            self.data(beta),
            BATCH_NORM_EPS,
            (b, c, s),
        );
        let out = self.push(
            Self::tensor(xs, y),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
                dims: (b, c, s),
                batch_stats: mode == NormMode::Train,
            },
            &[x, gamma, beta],
        );
        Ok((out, stats))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const OP: &str = "layer_norm";
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or(Error::Rank {
            op: OP,
            expected: 1,
            shape: vec![],
        })?;
        dim_check(OP, "gamma", d, numel(self.shape(gamma)))?;
        dim_check(OP, "beta", d, numel(self.shape(beta)))?;
        let (y, cache) = kernels::layer_norm_forward(
            self.data(x),
            self.data(gamma),
            self.data(beta),
            d,
            LAYER_NORM_EPS,
        );
        Ok(self.push(
            Self::tensor(xs, y),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            &[x, gamma, beta],
        ))
    }

    /// Affine map along the last axis: `x · W + b`, `W: [Din, Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        const OP: &str = "linear";
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        rank_check(OP, &ws, 2)?;
        let din = *xs.last().ok_or(Error::Rank {
            op: OP,
            expected: 1,
            shape: vec![],
        })?;
        dim_check(OP, "in_features", ws[0], din)?;
        dim_check(OP, "bias", ws[1], numel(self.shape(b)))?;
        let y = kernels::linear_forward(self.data(x), self.data(w), self.data(b), ws[0], ws[1]);
        let mut shape = xs;
        *shape.last_mut().unwrap() = ws[1];
        Ok(self.push(Self::tensor(shape, y), Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let k = *xs.last().ok_or(Error::Rank {
            op: "softmax_lastdim",
            expected: 1,
            shape: vec![],
        })?;
        if self.data(x).iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let y = kernels::softmax_rows(self.data(x), k);
        Ok(self.push(Self::tensor(xs, y), Op::Softmax { x }, &[x]))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square, 0.0)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu, 0.0)
    }

    /// `ln(x + eps)`; errors when any `x + eps` is not strictly positive.
    pub fn log(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.unary(x, Unary::Log, eps)
    }

    fn unary(&mut self, x: Var, kind: Unary, eps: f64) -> Result<Var> {
        let xd = self.data(x);
        let y: Vec<f64> = match kind {
            Unary::Square => xd.iter().map(|v| v * v).collect(),
            Unary::Gelu => xd.iter().map(|&v| kernels::gelu(v)).collect(),
            Unary::Log => {
                if let Some(bad) = xd.iter().find(|&&v| v + eps <= 0.0 || v.is_nan()) {
                    return Err(Error::Numeric(format!(
                        "log of non-positive value {bad} (after adding {eps})"
                    )));
                }
                xd.iter().map(|v| (v + eps).ln()).collect()
            }
        };
        let shape = self.shape(x).to_vec();
        Ok(self.push(Self::tensor(shape, y), Op::Unary { x, kind, eps }, &[x]))
    }

    /// Mean pooling over the last axis with window `k` and stride `s`.
    pub fn avg_pool_time(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let len = *xs.last().ok_or(Error::Rank {
            op: "avg_pool_time",
            expected: 3,
            shape: vec![],
        })?;
        if k == 0 || s == 0 || k > len {
            return Err(Error::Window(format!(
                "pool window {k} (stride {s}) does not fit sequence length {len}"
            )));
        }
        let y = kernels::avg_pool_forward(self.data(x), len, k, s);
        let mut shape = xs;
        *shape.last_mut().unwrap() = (len - k) / s + 1;
        Ok(self.push(Self::tensor(shape, y), Op::AvgPool { x, k, s }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = numel(self.shape(x));
        dim_check("reshape", "numel", n, numel(shape))?;
        let y = self.data(x).to_vec();
        Ok(self.push(Self::tensor(shape.to_vec(), y), Op::Reshape { x }, &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        let valid = perm.len() == xs.len()
            && perm
                .iter()
                .all(|&p| p < xs.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::Rank {
                op: "permute",
                expected: perm.len(),
                shape: xs,
            });
        }
        let y = kernels::permute(self.data(x), &xs, perm);
        let shape = perm.iter().map(|&p| xs[p]).collect();
        Ok(self.push(
            Self::tensor(shape, y),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// Cyclic shift along `axis` by `shift` positions (positive = later).
    pub fn roll(&mut self, x: Var, axis: usize, shift: isize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::Rank {
                op: "roll",
                expected: axis + 1,
                shape: xs,
            });
        }
        let y = kernels::roll(self.data(x), &xs, axis, shift);
        Ok(self.push(Self::tensor(xs, y), Op::Roll { x, axis, shift }, &[x]))
    }

    /// Batched product over matching leading axes: `[..., m, k] · [..., k, n]`,
    /// or `[..., m, k] · [..., n, k]ᵀ` with `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        const OP: &str = "matmul";
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() < 2 {
            return Err(Error::Rank {
                op: OP,
                expected: 2,
                shape: as_,
            });
        }
        rank_check(OP, &bs, as_.len())?;
        let r = as_.len();
        for ax in 0..r - 2 {
            dim_check(OP, &format!("batch axis {ax}"), as_[ax], bs[ax])?;
        }
        let (m, k) = (as_[r - 2], as_[r - 1]);
        let (bk, n) = if trans_b {
            (bs[r - 1], bs[r - 2])
        } else {
            (bs[r - 2], bs[r - 1])
        };
        dim_check(OP, "inner", k, bk)?;
        let batch: usize = as_[..r - 2].iter().product();
        let (ad, bd) = (self.data(a), self.data(b));
        let mut y = vec![0.0; batch * m * n];
        for t in 0..batch {
            let am = &ad[t * m * k..(t + 1) * m * k];
            let bm = &bd[t * k * n..(t + 1) * k * n];
            let ym = &mut y[t * m * n..(t + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        let bv = if trans_b {
                            bm[j * k + p]
                        } else {
                            bm[p * n + j]
                        };
                        acc += am[i * k + p] * bv;
                    }
                    ym[i * n + j] = acc;
                }
            }
        }
        let mut shape = as_[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push(
            Self::tensor(shape, y),
            Op::Matmul { a, b, trans_b },
            &[a, b],
        ))
    }

    /// Multi-head scaled dot-product attention restricted to consecutive
    /// non-overlapping windows of `window` steps. Inputs are `[B, L, D]`
    /// with head `h` occupying features `h*D/H .. (h+1)*D/H`; the output has
    /// the heads concatenated in the same layout.
    pub fn window_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        window: usize,
    ) -> Result<Var> {
        const OP: &str = "window_attention";
        let qs = self.shape(q).to_vec();
        rank_check(OP, &qs, 3)?;
        for other in [k, v] {
            let s = self.shape(other);
            rank_check(OP, s, 3)?;
            for ax in 0..3 {
                dim_check(OP, &format!("axis {ax}"), qs[ax], s[ax])?;
            }
        }
        let (batch, len, d_model) = (qs[0], qs[1], qs[2]);
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        if window == 0 || len % window != 0 {
            return Err(Error::Window(format!(
                "sequence length {len} is not divisible by window size {window}"
            )));
        }
        let dims = AttnDims {
            batch,
            len,
            d_model,
            heads,
            window,
        };
        let (y, probs) =
            kernels::window_attention_forward(self.data(q), self.data(k), self.data(v), &dims);
        Ok(self.push(
            Self::tensor(qs, y),
            Op::WindowAttention {
                q,
                k,
                v,
                dims,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let y = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Self::tensor(shape, y), Op::Scale { x, c }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b);
        rank_check("add", bs, as_.len())?;
        for (ax, (&x, &y)) in as_.iter().zip(bs).enumerate() {
            dim_check("add", &format!("axis {ax}"), x, y)?;
        }
        let y = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Self::tensor(as_, y), Op::Add { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, &[x]))
    }

    /// `-(1/N) Σ ln(p[i, y_i] + eps)` over rows of `probs: [N, K]`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize], eps: f64) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let ps = self.shape(probs).to_vec();
        rank_check(OP, &ps, 2)?;
        dim_check(OP, "labels", ps[0], labels.len())?;
        if ps[0] == 0 {
            return Err(Error::Numeric("cross-entropy over an empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= ps[1]) {
            return Err(Error::Dimension {
                op: OP,
                axis: "label value".into(),
                expected: ps[1],
                actual: bad,
            });
        }
        let k = ps[1];
        let pd = self.data(probs);
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -(pd[i * k + y] + eps).ln())
            .sum();
        let loss = total / ps[0] as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
                eps,
            },
            &[probs],
        ))
    }

    /// Euclidean distances `sqrt(|e_i - e_j|² + 1e-12)` between rows of
    /// `emb: [R, E]` for each `(i, j)` pair; output `[P]`.
    pub fn pair_distance(&mut self, emb: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        const OP: &str = "pair_distance";
        let es = self.shape(emb).to_vec();
        rank_check(OP, &es, 2)?;
        let (rows, e) = (es[0], es[1]);
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= rows || j >= rows) {
            return Err(Error::Dimension {
                op: OP,
                axis: "pair index".into(),
                expected: rows,
                actual: i.max(j),
            });
        }
        let ed = self.data(emb);
        let d: Vec<f64> = pairs
            .iter()
            .map(|&(i, j)| {
                let sq: f64 = ed[i * e..(i + 1) * e]
                    .iter()
                    .zip(&ed[j * e..(j + 1) * e])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (sq + DISTANCE_EPS).sqrt()
            })
            .collect();
        Ok(self.push(
            Self::tensor(vec![pairs.len()], d),
            Op::PairDistance {
                emb,
                pairs: pairs.to_vec(),
            },
            &[emb],
        ))
    }

    /// `Σ w_p x_p` over a flat `x`.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        dim_check(
            "weighted_sum",
            "weights",
            numel(self.shape(x)),
            weights.len(),
        )?;
        let s = self.data(x).iter().zip(weights).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            &[x],
        ))
    }

    /// Elementwise `min(x, c)`; the gradient passes only where `x < c`.
    pub fn clamp_max(&mut self, x: Var, c: f64) -> Result<Var> {
        let y = self.data(x).iter().map(|v| v.min(c)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Self::tensor(shape, y), Op::ClampMax { x, c }, &[x]))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape; returns the
    /// gradient of every leaf that required one.
    pub fn backward(mut self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(Error::Rank {
                op: "backward",
                expected: 0,
                shape: ls.to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                // Unreachable from the loss; release its value.
                self.nodes[idx].value = Tensor::zeros(&[0]);
                continue;
            };
            let (head, tail) = self.nodes.split_at(idx);
            backward_node(head, &tail[0], &g, &mut grads);
            self.nodes[idx].value = Tensor::zeros(&[0]);
        }
        // Keep only leaf gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn backward_node(prev: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| prev[v.0].value.data();
    let shp = |v: Var| prev[v.0].value.shape();
    let wants = |v: Var| prev[v.0].needs_grad;
    let mut send = |v: Var, grad: Vec<f64>| {
        if prev[v.0].needs_grad {
            accumulate(&mut grads[v.0], grad);
        }
    };
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
            dims,
        } => {
            let cg = kernels::conv2d_backward(val(*input), val(*kernel), g, dims, wants(*input));
            if let Some(dx) = cg.dx {
                send(*input, dx);
            }
            send(*kernel, cg.dkernel);
            send(*bias, cg.dbias);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            cache,
            dims,
            batch_stats,
        } => {
            let (dx, dg, db) =
                kernels::channel_affine_backward(g, cache, val(*gamma), *dims, *batch_stats);
            send(*x, dx);
            send(*gamma, dg);
            send(*beta, db);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            cache,
        } => {
            let d = val(*gamma).len();
            let (dx, dg, db) = kernels::layer_norm_backward(g, cache, val(*gamma), d);
            send(*x, dx);
            send(*gamma, dg);
            send(*beta, db);
        }
        Op::Linear { x, w, b } => {
            let ws = shp(*w);
            let (dx, dw, db) =
                kernels::linear_backward(val(*x), val(*w), g, ws[0], ws[1], wants(*x));
            if let Some(dx) = dx {
                send(*x, dx);
            }
            send(*w, dw);
            send(*b, db);
        }
        Op::Softmax { x } => {
            let k = *node.value.shape().last().unwrap();
            send(*x, kernels::softmax_rows_backward(node.value.data(), g, k));
        }
        Op::Unary { x, kind, eps } => {
            let xd = val(*x);
            let dx = match kind {
                Unary::Square => xd.iter().zip(g).map(|(v, g)| 2.0 * v * g).collect(),
                Unary::Log => xd.iter().zip(g).map(|(v, g)| g / (v + eps)).collect(),
                Unary::Gelu => xd
                    .iter()
                    .zip(g)
                    .map(|(&v, g)| g * kernels::gelu_grad(v))
                    .collect(),
            };
            send(*x, dx);
        }
        Op::AvgPool { x, k, s } => {
            let len = *shp(*x).last().unwrap();
            send(*x, kernels::avg_pool_backward(g, len, *k, *s));
        }
        Op::Reshape { x } => send(*x, g.to_vec()),
        Op::Permute { x, perm } => {
            let out_shape: Vec<usize> = perm.iter().map(|&p| shp(*x)[p]).collect();
            send(
                *x,
                kernels::permute(g, &out_shape, &kernels::inverse_perm(perm)),
            );
        }
        Op::Roll { x, axis, shift } => {
            send(*x, kernels::roll(g, shp(*x), *axis, -*shift));
        }
        Op::Matmul { a, b, trans_b } => {
            let as_ = shp(*a);
            let bs = shp(*b);
            let r = as_.len();
            let (m, k) = (as_[r - 2], as_[r - 1]);
            let n = if *trans_b { bs[r - 2] } else { bs[r - 1] };
            let batch: usize = as_[..r - 2].iter().product();
            let (ad, bd) = (val(*a), val(*b));
            let mut da = vec![0.0; ad.len()];
            let mut db = vec![0.0; bd.len()];
            for t in 0..batch {
                let am = &ad[t * m * k..(t + 1) * m * k];
                let bm = &bd[t * k * n..(t + 1) * k * n];
                let gm = &g[t * m * n..(t + 1) * m * n];
                let dam = &mut da[t * m * k..(t + 1) * m * k];
                let dbm = &mut db[t * k * n..(t + 1) * k * n];
                for i in 0..m {
                    for j in 0..n {
                        let gij = gm[i * n + j];
                        for p in 0..k {
                            let bidx = if *trans_b { j * k + p } else { p * n + j };
                            dam[i * k + p] += gij * bm[bidx];
                            dbm[bidx] += gij * am[i * k + p];
                        }
                    }
                }
            }
            send(*a, da);
            send(*b, db);
        }
        Op::WindowAttention {
            q,
            k,
            v,
            dims,
            probs,
        } => {
            let (dq, dk, dv) =
                kernels::window_attention_backward(val(*q), val(*k), val(*v), probs, g, dims);
            send(*q, dq);
            send(*k, dk);
            send(*v, dv);
        }
        Op::Scale { x, c } => send(*x, g.iter().map(|v| v * c).collect()),
        Op::Add { a, b } => {
            send(*a, g.to_vec());
            send(*b, g.to_vec());
        }
        Op::Sum { x } => send(*x, vec![g[0]; numel(shp(*x))]),
        Op::CrossEntropy { probs, labels, eps } => {
            let ps = shp(*probs);
            let (n, k) = (ps[0], ps[1]);
            let pd = val(*probs);
            let mut dp = vec![0.0; pd.len()];
            for (i, &y) in labels.iter().enumerate() {
                dp[i * k + y] = -g[0] / (n as f64 * (pd[i * k + y] + eps));
            }
            send(*probs, dp);
        }
        Op::PairDistance { emb, pairs } => {
            let e = shp(*emb)[1];
            let ed = val(*emb);
            let mut de = vec![0.0; ed.len()];
            for (p, &(i, j)) in pairs.iter().enumerate() {
                let d = node.value.data()[p];
                let c = g[p] / d;
                for t in 0..e {
                    let delta = ed[i * e + t] - ed[j * e + t];
                    de[i * e + t] += c * delta;
                    de[j * e + t] -= c * delta;
                }
            }
            send(*emb, de);
        }
        Op::WeightedSum { x, weights } => {
            send(*x, weights.iter().map(|w| w * g[0]).collect());
        }
        Op::ClampMax { x, c } => {
            let dx = val(*x)
                .iter()
                .zip(g)
                .map(|(v, g)| if *v < *c { *g } else { 0.0 })
                .collect();
            send(*x, dx);
        }
    }
}

/// Added under the square root of every pair distance.
pub const DISTANCE_EPS: f64 = 1e-12;
