//! A small reverse-mode tape over `f32` tensors.
//!
//! Nodes are appended in evaluation order; [`Tape::backward`] walks them in
//! reverse. Parameters are borrowed from a [`ParamStore`] and never copied.
//! Volumetric tensors are `(B, C, D, H, W)`, vectors are `(B, F)`, and scalars
//! have shape `[1]`.

pub mod conv;
pub mod fusion;
pub mod norm;
pub mod resample;

use std::collections::HashMap;

use ndarray::IxDyn;

use crate::params::{Gradients, ParamId, ParamStore, Tensor};

use conv::ConvGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    Tanh {
        x: Var,
    },
    Upsample2x {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Film {
        x: Var,
        scale: Var,
        shift: Var,
    },
    ConcatBatch {
        parts: Vec<Var>,
    },
    MaskedFusion {
        anat: Vec<Var>,
        gate_w: Var,
        gate_b: Var,
        masks: Vec<Vec<bool>>,
        weights: Vec<Vec<f32>>,
    },
    /// Scalar with precomputed local derivatives.
    Custom {
        local: Vec<(Var, Tensor)>,
    },
    /// Linear combination of scalars.
    Combine {
        terms: Vec<(Var, f32)>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn dims3(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::from_shape_vec(IxDyn(shape), data).expect("shape matches data")
}

fn slice(t: &Tensor) -> &[f32] {
    t.as_slice().expect("tape tensors are contiguous")
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.value(v)[[0]]
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(value.as_standard_layout().into_owned()),
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Convolution with `(cout, cin, k, k, k)` weights, zero padding `k / 2`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 5, "conv3d input must be (B, C, D, H, W)");
        assert_eq!(xs[1], ws[1], "conv3d channel mismatch");
        let geom = ConvGeometry::new(ws[1], ws[0], ws[2], stride, dims3(&xs));
        let out = conv::conv3d_forward(
            slice(self.value(x)),
            xs[0],
            slice(self.value(w)),
            slice(self.value(b)),
            &geom,
        );
        let [od, oh, ow] = geom.output;
        let value = tensor(&[xs[0], geom.cout, od, oh, ow], out);
        self.push(value, Op::Conv3d { x, w, b, geom }, &[x, w, b])
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let spatial: usize = xs[2..].iter().product();
        let f = norm::instance_norm_forward(
            slice(self.value(x)),
            xs[1],
            spatial,
            slice(self.value(gamma)),
            slice(self.value(beta)),
        );
        let value = tensor(&xs, f.out);
        self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat: f.xhat,
                inv_std: f.inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let value = self.value(x).mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f32::tanh);
        self.push(value, Op::Tanh { x }, &[x])
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let out = resample::upsample2x_forward(slice(self.value(x)), xs[0] * xs[1], dims3(&xs));
        let value = tensor(&[xs[0], xs[1], 2 * xs[2], 2 * xs[3], 2 * xs[4]], out);
        self.push(value, Op::Upsample2x { x }, &[x])
    }

    /// `(B, C, ...)` to `(B, C)` by spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let spatial: usize = xs[2..].iter().product();
        let out: Vec<f32> = slice(self.value(x))
            .chunks(spatial)
            .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / spatial as f64) as f32)
            .collect();
        self.push(tensor(&[xs[0], xs[1]], out), Op::GlobalAvgPool { x }, &[x])
    }

    /// `(B, in)` times `(out, in)` weights plus `(out)` bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs[1], ws[1], "linear input width mismatch");
        let (xv, wv, bv) = (slice(self.value(x)), slice(self.value(w)), slice(self.value(b)));
        let mut out = vec![0.0f32; xs[0] * ws[0]];
        for i in 0..xs[0] {
            for o in 0..ws[0] {
                let row = &wv[o * ws[1]..(o + 1) * ws[1]];
                out[i * ws[0] + o] = bv[o] + row.iter().zip(&xv[i * xs[1]..(i + 1) * xs[1]]).map(|(a, b)| a * b).sum::<f32>();
            }
        }
        self.push(tensor(&[xs[0], ws[0]], out), Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Per-channel affine modulation: `x · scale + shift`, with `scale` and
    /// `shift` of shape `(B, C)`.
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let spatial: usize = xs[2..].iter().product();
        let (sv, hv) = (slice(self.value(scale)), slice(self.value(shift)));
        let mut out = slice(self.value(x)).to_vec();
        for (lane, chunk) in out.chunks_mut(spatial).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v * sv[lane] + hv[lane]);
        }
        self.push(tensor(&xs, out), Op::Film { x, scale, shift }, &[x, scale, shift])
    }

    /// Stacks tensors of equal trailing shape along the batch axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let mut data = Vec::new();
        let mut batch = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s[1..], first[1..], "concat_batch shape mismatch");
            batch += s[0];
            data.extend_from_slice(slice(self.value(p)));
        }
        let mut shape = first;
        shape[0] = batch;
        self.push(tensor(&shape, data), Op::ConcatBatch { parts: parts.to_vec() }, parts)
    }

    /// Gated fusion of `(B, C, ...)` maps; `masks[b][j]` marks modality `j`
    /// of item `b` as available.
    pub fn masked_fusion(&mut self, anat: &[Var], gate_w: Var, gate_b: Var, masks: &[Vec<bool>]) -> Var {
        let shape = self.shape(anat[0]).to_vec();
        let spatial: usize = shape[2..].iter().product();
        assert_eq!(masks.len(), shape[0], "one mask per batch item");
        let slices: Vec<&[f32]> = anat.iter().map(|&a| slice(self.value(a))).collect();
        let f = fusion::fusion_forward(
            &slices,
            shape[0],
            shape[1],
            spatial,
            slice(self.value(gate_w)),
            slice(self.value(gate_b)),
            masks,
        );
        let mut inputs = anat.to_vec();
        inputs.extend([gate_w, gate_b]);
        self.push(
            tensor(&shape, f.out),
            Op::MaskedFusion {
                anat: anat.to_vec(),
                gate_w,
                gate_b,
                masks: masks.to_vec(),
                weights: f.weights,
            },
            &inputs,
        )
    }

    /// Registers a scalar computed outside the tape together with its local
    /// derivative with respect to each input.
    pub fn custom_scalar(&mut self, value: f32, local: Vec<(Var, Tensor)>) -> Var {
        for (v, g) in &local {
            assert_eq!(self.shape(*v), g.shape(), "local gradient shape mismatch");
        }
        let inputs: Vec<Var> = local.iter().map(|(v, _)| *v).collect();
        self.push(tensor(&[1], vec![value]), Op::Custom { local }, &inputs)
    }

    /// `Σ coef · scalar`.
    pub fn combine(&mut self, terms: &[(Var, f32)]) -> Var {
        let total: f32 = terms.iter().map(|&(v, c)| c * self.scalar(v)).sum();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(tensor(&[1], vec![total]), Op::Combine { terms: terms.to_vec() }, &inputs)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.value(root).raw_dim()));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let gs = slice(&g);
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(id) => param_grads[id.index()] = Some(g),
                Op::Conv3d { x, w, b, geom } => {
                    let xs = self.shape(*x);
                    let r = conv::conv3d_backward(
                        slice(self.value(*x)),
                        xs[0],
                        slice(self.value(*w)),
                        gs,
                        geom,
                        self.needs(*x),
                    );
                    if let Some(dx) = r.dx {
                        acc(&mut grads, *x, tensor(xs, dx));
                    }
                    acc(&mut grads, *w, tensor(self.shape(*w), r.dw));
                    acc(&mut grads, *b, tensor(self.shape(*b), r.db));
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    xhat,
                    inv_std,
                    beta,
                } => {
                    let xs = self.shape(*x);
                    let spatial: usize = xs[2..].iter().product();
                    let r = norm::instance_norm_backward(gs, xhat, inv_std, xs[1], spatial, slice(self.value(*gamma)));
                    acc(&mut grads, *x, tensor(xs, r.dx));
                    acc(&mut grads, *gamma, tensor(&[xs[1]], r.dgamma));
                    acc(&mut grads, *beta, tensor(&[xs[1]], r.dbeta));
                }
                Op::LeakyRelu { x, slope } => {
                    let mut dx = g.clone();
                    dx.zip_mut_with(self.value(*x), |d, &xv| {
                        if xv <= 0.0 {
                            *d *= slope
                        }
                    });
                    acc(&mut grads, *x, dx);
                }
                Op::Tanh { x } => {
                    let y = self.nodes[i].value.as_ref().expect("tanh output");
                    let mut dx = g.clone();
                    dx.zip_mut_with(y, |d, &yv| *d *= 1.0 - yv * yv);
                    acc(&mut grads, *x, dx);
                }
                Op::Upsample2x { x } => {
                    let xs = self.shape(*x);
                    let dx = resample::upsample2x_backward(gs, xs[0] * xs[1], dims3(xs));
                    acc(&mut grads, *x, tensor(xs, dx));
                }
                Op::GlobalAvgPool { x } => {
                    let xs = self.shape(*x);
                    let spatial: usize = xs[2..].iter().product();
                    let mut dx = Vec::with_capacity(xs.iter().product());
                    for &gv in gs {
                        dx.extend(std::iter::repeat(gv / spatial as f32).take(spatial));
                    }
                    acc(&mut grads, *x, tensor(xs, dx));
                }
                Op::Linear { x, w, b } => {
                    let (xs, ws) = (self.shape(*x), self.shape(*w));
                    let (xv, wv) = (slice(self.value(*x)), slice(self.value(*w)));
                    let (n, fin, fout) = (xs[0], ws[1], ws[0]);
                    let mut dx = vec![0.0f32; n * fin];
                    let mut dw = vec![0.0f32; fout * fin];
                    let mut db = vec![0.0f32; fout];
                    for r in 0..n {
                        for o in 0..fout {
                            let go = gs[r * fout + o];
                            db[o] += go;
                            for k in 0..fin {
                                dx[r * fin + k] += go * wv[o * fin + k];
                                dw[o * fin + k] += go * xv[r * fin + k];
                            }
                        }
                    }
                    if self.needs(*x) {
                        acc(&mut grads, *x, tensor(xs, dx));
                    }
                    acc(&mut grads, *w, tensor(ws, dw));
                    acc(&mut grads, *b, tensor(&[fout], db));
                }
                Op::Film { x, scale, shift } => {
                    let xs = self.shape(*x);
                    let spatial: usize = xs[2..].iter().product();
                    let (xv, sv) = (slice(self.value(*x)), slice(self.value(*scale)));
                    let lanes = xs[0] * xs[1];
                    let mut dx = vec![0.0f32; gs.len()];
                    let mut dscale = vec![0.0f32; lanes];
                    let mut dshift = vec![0.0f32; lanes];
                    for lane in 0..lanes {
                        let r = lane * spatial..(lane + 1) * spatial;
                        for ((d, &gv), &x) in dx[r.clone()].iter_mut().zip(&gs[r.clone()]).zip(&xv[r]) {
                            *d = gv * sv[lane];
                            dscale[lane] += gv * x;
                            dshift[lane] += gv;
                        }
                    }
                    acc(&mut grads, *x, tensor(xs, dx));
                    acc(&mut grads, *scale, tensor(&[xs[0], xs[1]], dscale));
                    acc(&mut grads, *shift, tensor(&[xs[0], xs[1]], dshift));
                }
                Op::ConcatBatch { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let ps = self.shape(p);
                        let n: usize = ps.iter().product();
                        if self.needs(p) {
                            acc(&mut grads, p, tensor(ps, gs[offset..offset + n].to_vec()));
                        }
                        offset += n;
                    }
                }
                Op::MaskedFusion {
                    anat,
                    gate_w,
                    gate_b,
                    masks,
                    weights,
                } => {
                    let shape = self.shape(anat[0]);
                    let spatial: usize = shape[2..].iter().product();
                    let slices: Vec<&[f32]> = anat.iter().map(|&a| slice(self.value(a))).collect();
                    let r = fusion::fusion_backward(
                        gs,
                        &slices,
                        shape[0],
                        shape[1],
                        spatial,
                        slice(self.value(*gate_w)),
                        masks,
                        weights,
                    );
                    for (&a, da) in anat.iter().zip(r.d_anat) {
                        acc(&mut grads, a, tensor(shape, da));
                    }
                    acc(&mut grads, *gate_w, tensor(self.shape(*gate_w), r.d_gate_w));
                    acc(&mut grads, *gate_b, tensor(self.shape(*gate_b), r.d_gate_b));
                }
                Op::Custom { local } => {
                    let up = gs[0];
                    for (v, lg) in local {
                        if self.needs(*v) {
                            acc(&mut grads, *v, lg.mapv(|x| x * up));
                        }
                    }
                }
                Op::Combine { terms } => {
                    let up = gs[0];
                    for &(v, c) in terms {
                        if self.needs(v) {
                            acc(&mut grads, v, tensor(&[1], vec![up * c]));
                        }
                    }
                }
            }
        }
        Gradients::new(param_grads)
    }
}

#[cfg(test)]
mod tests;
