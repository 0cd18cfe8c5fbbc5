//! Uni-directional GRU encoder and frozen GRU decoder.
//!
//! Rows are samples: a step input is `[B×input_dim]`, a hidden state
//! `[B×hidden_dim]`, and weights multiply from the right (`x·W`).
//!
//! The gate recurrence is the usual one:
//!
//! ```text
//! z  = σ(x·W_z + h·U_z + b_z)
//! r  = σ(x·W_r + h·U_r + b_r)
//! h̃  = tanh(x·W_h + (r⊙h)·U_h + b_h)
//! h' = (1−z)⊙h + z⊙h̃
//! ```
//!
//! The encoder output at each step is the top layer's hidden state. The
//! decoder starts from a zero hidden state fed the action encoding, then runs
//! on its own hidden state with zero input; a linear readout maps each top
//! hidden state back to joint coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::SkeletonSequence;
use crate::error::{PcrpError, Result};
use crate::numcore::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GruLayer<F> {
    pub w_z: Tensor<F>,
    pub w_r: Tensor<F>,
    pub w_h: Tensor<F>,
    pub u_z: Tensor<F>,
    pub u_r: Tensor<F>,
    pub u_h: Tensor<F>,
    pub b_z: Tensor<F>,
    pub b_r: Tensor<F>,
    pub b_h: Tensor<F>,
}

const LAYER_TENSORS: [&str; 9] = ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"];

impl<F: Real> GruLayer<F> {
    fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w_z: Tensor::zeros(&[input_dim, hidden]),
            w_r: Tensor::zeros(&[input_dim, hidden]),
            w_h: Tensor::zeros(&[input_dim, hidden]),
            u_z: Tensor::zeros(&[hidden, hidden]),
            u_r: Tensor::zeros(&[hidden, hidden]),
            u_h: Tensor::zeros(&[hidden, hidden]),
            b_z: Tensor::zeros(&[hidden]),
            b_r: Tensor::zeros(&[hidden]),
            b_h: Tensor::zeros(&[hidden]),
        }
    }

    fn tensors(&self) -> [&Tensor<F>; 9] {
        [&self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z, &self.b_r, &self.b_h]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<F>; 9] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }
}

/// Linear map from the top hidden state to one output frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Readout<F> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

/// Weights of a GRU stack, optionally with a readout.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<F> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub layers: Vec<GruLayer<F>>,
    pub readout: Option<Readout<F>>,
    /// Frozen parameters enter graphs as constants and are never optimized.
    pub frozen: bool,
}

impl<F: Real> GruParams<F> {
    pub fn zeros(input_dim: usize, hidden_dim: usize, layer_count: usize, readout_dim: Option<usize>, frozen: bool) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || layer_count == 0 {
            return Err(PcrpError::Param(format!(
                "GRU dimensions must be positive (input {input_dim}, hidden {hidden_dim}, layers {layer_count})"
            )));
        }
        let layers = (0..layer_count)
            .map(|l| GruLayer::zeros(if l == 0 { input_dim } else { hidden_dim }, hidden_dim))
            .collect();
        let readout = readout_dim.map(|out| Readout {
            weight: Tensor::zeros(&[hidden_dim, out]),
            bias: Tensor::zeros(&[out]),
        });
        Ok(Self {
            input_dim,
            hidden_dim,
            layers,
            readout,
            frozen,
        })
    }

    /// Uniform initialization in `[−1/√C, 1/√C]`, reproducible from `seed`.
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        layer_count: usize,
        readout_dim: Option<usize>,
        frozen: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut p = Self::zeros(input_dim, hidden_dim, layer_count, readout_dim, frozen)?;
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in p.tensors_mut() {
            for x in t.data_mut() {
                *x = F::lit(rng.gen_range(-bound..=bound));
            }
        }
        Ok(p)
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.readout.as_ref().map(|r| r.bias.numel())
    }

    /// Parameter names in a fixed order shared with [`Self::tensors_mut`].
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.layers.len())
            .flat_map(|l| LAYER_TENSORS.iter().map(move |n| format!("l{l}.{n}")))
            .collect();
        if self.readout.is_some() {
            names.push("readout.weight".into());
            names.push("readout.bias".into());
        }
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        let mut out: Vec<&Tensor<F>> = self.layers.iter().flat_map(|l| l.tensors()).collect();
        if let Some(r) = &self.readout {
            out.push(&r.weight);
            out.push(&r.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out: Vec<&mut Tensor<F>> = self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect();
        if let Some(r) = &mut self.readout {
            out.push(&mut r.weight);
            out.push(&mut r.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<G: Real>(&self) -> GruParams<G> {
        let layer = |l: &GruLayer<F>| GruLayer {
            w_z: l.w_z.cast(),
            w_r: l.w_r.cast(),
            w_h: l.w_h.cast(),
            u_z: l.u_z.cast(),
            u_r: l.u_r.cast(),
            u_h: l.u_h.cast(),
            b_z: l.b_z.cast(),
            b_r: l.b_r.cast(),
            b_h: l.b_h.cast(),
        };
        GruParams {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            layers: self.layers.iter().map(layer).collect(),
            readout: self.readout.as_ref().map(|r| Readout {
                weight: r.weight.cast(),
                bias: r.bias.cast(),
            }),
            frozen: self.frozen,
        }
    }

    /// Records the parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph<F>) -> BoundGru {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| if self.frozen { g.constant(t.clone()) } else { g.param(t.clone()) })
            .collect();
        let layers = vars[..self.layers.len() * 9]
            .chunks(9)
            .map(|c| BoundLayer {
                w: [c[0], c[1], c[2]],
                u: [c[3], c[4], c[5]],
                b: [c[6], c[7], c[8]],
            })
            .collect();
        let readout = self.readout.as_ref().map(|_| {
            let n = vars.len();
            (vars[n - 2], vars[n - 1])
        });
        BoundGru {
            hidden_dim: self.hidden_dim,
            frozen: self.frozen,
            layers,
            readout,
            vars,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundLayer {
    w: [Var; 3],
    u: [Var; 3],
    b: [Var; 3],
}

/// Graph handles for one [`GruParams`].
#[derive(Clone, Debug)]
pub struct BoundGru {
    hidden_dim: usize,
    frozen: bool,
    layers: Vec<BoundLayer>,
    readout: Option<(Var, Var)>,
    /// Every parameter handle, in [`GruParams::names`] order.
    pub vars: Vec<Var>,
}

fn gate<F: Real>(g: &mut Graph<F>, x: Option<Var>, w: Var, h: Var, u: Var, b: Var) -> Result<Var> {
    let hu = g.matmul(h, u)?;
    let pre = match x {
        Some(x) => {
            let xw = g.matmul(x, w)?;
            g.add(xw, hu)?
        }
        None => hu,
    };
    g.add(pre, b)
}

/// One GRU layer step. `x = None` stands for an all-zero input.
pub fn gru_cell<F: Real>(g: &mut Graph<F>, x: Option<Var>, h_prev: Var, layer: &BoundLayer) -> Result<Var> {
    let [wz, wr, wh] = layer.w;
    let [uz, ur, uh] = layer.u;
    let [bz, br, bh] = layer.b;
    let z_pre = gate(g, x, wz, h_prev, uz, bz)?;
    let z = g.sigmoid(z_pre);
    let r_pre = gate(g, x, wr, h_prev, ur, br)?;
    let r = g.sigmoid(r_pre);
    let rh = g.mul(r, h_prev)?;
    let cand_pre = gate(g, x, wh, rh, uh, bh)?;
    let cand = g.tanh(cand_pre);
    let delta = g.sub(cand, h_prev)?;
    let step = g.mul(z, delta)?;
    g.add(h_prev, step)
}

impl BoundGru {
    /// Advances every layer by one step; returns the new hidden states.
    pub fn step<F: Real>(&self, g: &mut Graph<F>, x: Option<Var>, hidden: &[Var]) -> Result<Vec<Var>> {
        let mut input = x;
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, &h) in self.layers.iter().zip(hidden) {
            let h_new = gru_cell(g, input, h, layer)?;
            next.push(h_new);
            input = Some(h_new);
        }
        Ok(next)
    }

    fn zero_state<F: Real>(&self, g: &mut Graph<F>, batch: usize) -> Vec<Var> {
        (0..self.layers.len())
            .map(|_| g.constant(Tensor::zeros(&[batch, self.hidden_dim])))
            .collect()
    }

    /// Runs the recurrence from a zero state over `inputs` (one `[B×D]` per
    /// step). Returns every step output; the last one is the action encoding.
    pub fn encode<F: Real>(&self, g: &mut Graph<F>, inputs: &[Var]) -> Result<Vec<Var>> {
        let first = inputs
            .first()
            .ok_or_else(|| PcrpError::Contract("encode needs at least one frame".into()))?;
        let batch = g.shape(*first)[0];
        let mut hidden = self.zero_state(g, batch);
        let mut outputs = Vec::with_capacity(inputs.len());
        for &x in inputs {
            hidden = self.step(g, Some(x), &hidden)?;
            outputs.push(*hidden.last().unwrap());
        }
        Ok(outputs)
    }

    /// Predicts `frames` output frames from the encoding `v` (`[B×C]`).
    pub fn decode<F: Real>(&self, g: &mut Graph<F>, v: Var, frames: usize) -> Result<Vec<Var>> {
        if !self.frozen {
            return Err(PcrpError::Contract("decoder parameters must be frozen".into()));
        }
        let (w, b) = self
            .readout
            .ok_or_else(|| PcrpError::Contract("decoder has no readout".into()))?;
        let batch = g.shape(v)[0];
        let mut hidden = self.zero_state(g, batch);
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let input = if t == 0 { Some(v) } else { None };
            hidden = self.step(g, input, &hidden)?;
            let top = *hidden.last().unwrap();
            let proj = g.matmul(top, w)?;
            out.push(g.add(proj, b)?);
        }
        Ok(out)
    }
}

/// Per-step `[B×J·3]` tensors for a batch of equal-length sequences.
pub fn step_inputs<F: Real>(batch: &[&SkeletonSequence]) -> Result<Vec<Tensor<F>>> {
    let first = batch
        .first()
        .ok_or_else(|| PcrpError::Contract("empty batch".into()))?;
    let (frames, width) = (first.frames(), first.frame_width());
    if let Some(s) = batch.iter().find(|s| s.frames() != frames || s.frame_width() != width) {
        return Err(PcrpError::Shape {
            op: "batch",
            left: vec![frames, width],
            right: vec![s.frames(), s.frame_width()],
        });
    }
    (0..frames)
        .map(|t| {
            let data = batch
                .iter()
                .flat_map(|s| s.frame(t).iter().map(|&x| F::lit(x)))
                .collect();
            Tensor::matrix(batch.len(), width, data)
        })
        .collect()
}

/// Final-step encodings of `batch`, without recording gradients.
pub fn encode_sequences<F: Real>(encoder: &GruParams<F>, batch: &[&SkeletonSequence]) -> Result<Tensor<F>> {
    let mut frozen = encoder.clone();
    frozen.frozen = true;
    let mut g = Graph::new();
    let bound = frozen.bind(&mut g);
    let inputs: Vec<Var> = step_inputs(batch)?.into_iter().map(|t| g.constant(t)).collect();
    if g.shape(inputs[0])[1] != encoder.input_dim {
        return Err(PcrpError::Shape {
            op: "encode",
            left: g.shape(inputs[0]).to_vec(),
            right: vec![encoder.input_dim],
        });
    }
    let outputs = bound.encode(&mut g, &inputs)?;
    Ok(g.value(*outputs.last().unwrap()).clone())
}
