//! A tiny static op graph. Topologies are built once as a node list in
//! execution order; forward evaluation fills a tape of activations and
//! backward walks the same list in reverse, accumulating parameter
//! gradients in place.

use super::ops;
use super::{ModelParams, Tensor4};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub enum Op {
    /// Reads one of the external input tensors.
    Input(usize),
    /// Same-padded convolution; parameter indices point into the graph's
    /// parameter table (weight, bias).
    Conv {
        w: usize,
        b: usize,
        kernel: usize,
        in_c: usize,
        out_c: usize,
    },
    Relu,
    MaxPool2,
    /// inputs[0] is upsampled 2x and concatenated with inputs[1].
    Upsample2Concat,
    /// Channel concatenation of all inputs in order.
    Concat,
    L2Norm {
        eps: f64,
    },
    /// Identity forward; blocks gradient flow.
    Detach,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Static computation graph plus the parameter table it references.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub params: Vec<ParamSpec>,
    pub num_inputs: usize,
}

impl Graph {
    pub fn new(num_inputs: usize) -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            num_inputs,
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>) -> usize {
        for &i in &inputs {
            assert!(i < self.nodes.len(), "node input out of order");
        }
        self.nodes.push(Node { op, inputs });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, slot: usize) -> usize {
        assert!(slot < self.num_inputs);
        self.push(Op::Input(slot), vec![])
    }

    fn add_param(&mut self, name: &str, shape: Vec<usize>) -> usize {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(ParamSpec {
            name: name.to_string(),
            shape,
        });
        self.params.len() - 1
    }

    pub fn conv(&mut self, input: usize, name: &str, kernel: usize, in_c: usize, out_c: usize) -> usize {
        let w = self.add_param(&format!("{name}.w"), vec![kernel, kernel, in_c, out_c]);
        let b = self.add_param(&format!("{name}.b"), vec![out_c]);
        self.push(
            Op::Conv {
                w,
                b,
                kernel,
                in_c,
                out_c,
            },
            vec![input],
        )
    }

    pub fn relu(&mut self, input: usize) -> usize {
        self.push(Op::Relu, vec![input])
    }

    pub fn conv_relu(&mut self, input: usize, name: &str, kernel: usize, in_c: usize, out_c: usize) -> usize {
        let c = self.conv(input, name, kernel, in_c, out_c);
        self.relu(c)
    }

    pub fn maxpool2(&mut self, input: usize) -> usize {
        self.push(Op::MaxPool2, vec![input])
    }

    pub fn upsample2_concat(&mut self, input: usize, skip: usize) -> usize {
        self.push(Op::Upsample2Concat, vec![input, skip])
    }

    pub fn concat(&mut self, inputs: Vec<usize>) -> usize {
        assert!(inputs.len() >= 2);
        self.push(Op::Concat, inputs)
    }

    pub fn l2_normalize(&mut self, input: usize, eps: f64) -> usize {
        self.push(Op::L2Norm { eps }, vec![input])
    }

    pub fn detach(&mut self, input: usize) -> usize {
        self.push(Op::Detach, vec![input])
    }

    /// Allocates zeroed parameters matching this graph's parameter table.
    pub fn alloc_params<S: Scalar>(&self) -> ModelParams<S> {
        let mut params = ModelParams::new();
        for spec in &self.params {
            params
                .insert(&spec.name, spec.shape.clone())
                .expect("graph parameter names are unique");
        }
        params
    }

    fn check_params<S: Scalar>(&self, params: &ModelParams<S>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape_mismatch(
                "parameter table",
                self.params.len(),
                params.len(),
            ));
        }
        for (i, spec) in self.params.iter().enumerate() {
            let (name, t) = params.by_index(i);
            if name != spec.name || t.shape != spec.shape {
                return Err(Error::Contract(format!(
                    "parameter {i} mismatch: graph has {} {:?}, model has {} {:?}",
                    spec.name, spec.shape, name, t.shape
                )));
            }
        }
        Ok(())
    }

    /// Runs every node and records all activations.
    pub fn forward<S: Scalar>(
        &self,
        inputs: &[Tensor4<S>],
        params: &ModelParams<S>,
    ) -> Result<Tape<S>> {
        if inputs.len() != self.num_inputs {
            return Err(Error::shape_mismatch(
                "graph inputs",
                self.num_inputs,
                inputs.len(),
            ));
        }
        self.check_params(params)?;
        let mut acts: Vec<Tensor4<S>> = Vec::with_capacity(self.nodes.len());
        let mut aux: Vec<Aux> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let (out, a) = match &node.op {
                Op::Input(slot) => (inputs[*slot].clone(), Aux::None),
                Op::Conv {
                    w,
                    b,
                    kernel,
                    in_c,
                    out_c,
                } => {
                    let x = &acts[node.inputs[0]];
                    let wt = params.by_index(*w).1;
                    let bt = params.by_index(*b).1;
                    (
                        ops::conv2d_forward(x, &wt.data, &bt.data, *kernel, *in_c, *out_c)?,
                        Aux::None,
                    )
                }
                Op::Relu => (ops::relu_forward(&acts[node.inputs[0]]), Aux::None),
                Op::MaxPool2 => {
                    let (y, argmax) = ops::maxpool2_forward(&acts[node.inputs[0]])?;
                    (y, Aux::MaxPool(argmax))
                }
                Op::Upsample2Concat => (
                    ops::upsample2_concat_forward(&acts[node.inputs[0]], &acts[node.inputs[1]])?,
                    Aux::None,
                ),
                Op::Concat => {
                    let parts: Vec<&Tensor4<S>> =
                        node.inputs.iter().map(|&i| &acts[i]).collect();
                    (concat_channels(&parts)?, Aux::None)
                }
                Op::L2Norm { eps } => (
                    ops::l2_normalize_forward(&acts[node.inputs[0]], *eps),
                    Aux::None,
                ),
                Op::Detach => (acts[node.inputs[0]].clone(), Aux::None),
            };
            acts.push(out);
            aux.push(a);
        }
        Ok(Tape {
            activations: acts,
            aux,
        })
    }

    /// Backpropagates from the seeded nodes, adding parameter gradients into
    /// `params` gradient buffers (they are not zeroed here).
    pub fn backward<S: Scalar>(
        &self,
        tape: &Tape<S>,
        params: &mut ModelParams<S>,
        seeds: &[(usize, &Tensor4<S>)],
    ) -> Result<()> {
        if tape.activations.len() != self.nodes.len() {
            return Err(Error::Contract(
                "tape does not match graph; backward needs the forward tape".into(),
            ));
        }
        self.check_params(params)?;
        let mut grads: Vec<Option<Tensor4<S>>> = vec![None; self.nodes.len()];
        for &(node, grad) in seeds {
            if node >= self.nodes.len() {
                return Err(Error::Contract(format!("seed node {node} out of range")));
            }
            if !tape.activations[node].same_shape(grad) {
                return Err(Error::shape_mismatch(
                    "backward seed",
                    tape.activations[node].data.len(),
                    grad.data.len(),
                ));
            }
            accumulate(&mut grads[node], grad);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input(_) => {}
                Op::Conv {
                    w,
                    b,
                    kernel,
                    in_c,
                    out_c,
                } => {
                    let x = &tape.activations[node.inputs[0]];
                    let (dx, dw, db) = {
                        let wt = params.by_index(*w).1;
                        ops::conv2d_backward(x, &wt.data, *kernel, *in_c, *out_c, &dy)?
                    };
                    add_into(&mut params.by_index_mut(*w).1.grad, &dw);
                    add_into(&mut params.by_index_mut(*b).1.grad, &db);
                    accumulate(&mut grads[node.inputs[0]], &dx);
                }
                Op::Relu => {
                    let x = &tape.activations[node.inputs[0]];
                    let dx = ops::relu_backward(x, &dy)?;
                    accumulate(&mut grads[node.inputs[0]], &dx);
                }
                Op::MaxPool2 => {
                    let Aux::MaxPool(argmax) = &tape.aux[idx] else {
                        return Err(Error::Contract("missing maxpool records on tape".into()));
                    };
                    let x = &tape.activations[node.inputs[0]];
                    let dx = ops::maxpool2_backward(x.shape(), argmax, &dy)?;
                    accumulate(&mut grads[node.inputs[0]], &dx);
                }
                Op::Upsample2Concat => {
                    let x = &tape.activations[node.inputs[0]];
                    let skip = &tape.activations[node.inputs[1]];
                    let (dx, dskip) = ops::upsample2_concat_backward(x.shape(), skip.c, &dy)?;
                    accumulate(&mut grads[node.inputs[0]], &dx);
                    accumulate(&mut grads[node.inputs[1]], &dskip);
                }
                Op::Concat => {
                    let mut offset = 0;
                    for &i in &node.inputs {
                        let part = &tape.activations[i];
                        let dpart = slice_channels(&dy, offset, part.c);
                        accumulate(&mut grads[i], &dpart);
                        offset += part.c;
                    }
                }
                Op::L2Norm { eps } => {
                    let x = &tape.activations[node.inputs[0]];
                    let y = &tape.activations[idx];
                    let dx = ops::l2_normalize_backward(x, y, &dy, *eps)?;
                    accumulate(&mut grads[node.inputs[0]], &dx);
                }
                Op::Detach => {}
            }
        }
        Ok(())
    }
}

/// Forward-pass record: one activation per node plus per-op bookkeeping.
#[derive(Debug, Clone)]
pub struct Tape<S: Scalar> {
    pub activations: Vec<Tensor4<S>>,
    aux: Vec<Aux>,
}

impl<S: Scalar> Tape<S> {
    pub fn output(&self, node: usize) -> &Tensor4<S> {
        &self.activations[node]
    }
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    MaxPool(Vec<u32>),
}

fn concat_channels<S: Scalar>(parts: &[&Tensor4<S>]) -> Result<Tensor4<S>> {
    let first = parts[0];
    let total_c: usize = parts.iter().map(|p| p.c).sum();
    for p in parts {
        if p.n != first.n || p.h != first.h || p.w != first.w {
            return Err(Error::shape_mismatch(
                "concat raster",
                first.n * first.h * first.w,
                p.n * p.h * p.w,
            ));
        }
    }
    let mut out = Tensor4::zeros(first.n, first.h, first.w, total_c);
    let pixels = first.n * first.h * first.w;
    for px in 0..pixels {
        let mut offset = 0;
        let dst = px * total_c;
        for p in parts {
            let src = px * p.c;
            out.data[dst + offset..dst + offset + p.c]
                .copy_from_slice(&p.data[src..src + p.c]);
            offset += p.c;
        }
    }
    Ok(out)
}

fn slice_channels<S: Scalar>(t: &Tensor4<S>, offset: usize, count: usize) -> Tensor4<S> {
    let mut out = Tensor4::zeros(t.n, t.h, t.w, count);
    let pixels = t.n * t.h * t.w;
    for px in 0..pixels {
        let src = px * t.c + offset;
        out.data[px * count..(px + 1) * count].copy_from_slice(&t.data[src..src + count]);
    }
    out
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor4<S>>, grad: &Tensor4<S>) {
    match slot {
        Some(existing) => add_into(&mut existing.data, &grad.data),
        None => *slot = Some(grad.clone()),
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}
