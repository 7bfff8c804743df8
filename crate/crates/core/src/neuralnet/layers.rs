//! Parameter storage and the layers built on the tape.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Neighborhood, Tape, Tensor, Var};

/// Named trainable tensors of one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub tensors: Vec<Tensor>,
    pub names: Vec<String>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.tensors.push(t);
        self.names.push(name.into());
        self.tensors.len() - 1
    }

    /// Uniform in `±1/√fan_in`.
    pub fn add_uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// Overwrites every tensor from a flat slice; returns the number consumed.
    pub fn load_flat(&mut self, values: &[f64]) -> Option<usize> {
        let total = self.scalar_count();
        if values.len() < total {
            return None;
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Some(total)
    }
}

/// Places a store's tensors on a tape, once each.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: bool,
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    /// Trainable parameters report gradients; frozen ones are constants.
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Binder {
            store,
            trainable,
            vars: vec![None; store.len()],
        }
    }

    pub fn get(&mut self, tape: &mut Tape, id: usize) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let t = self.store.tensors[id].clone();
        let v = if self.trainable { tape.param(id, t) } else { tape.constant(t) };
        self.vars[id] = Some(v);
        v
    }
}

/// `y = x·Wᵀ + b` on row vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add_uniform(format!("{name}.weight"), output, input, input, rng);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(1, output));
        Linear { w, b, input, output }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, x: Var) -> Var {
        let w = p.get(tape, self.w);
        let b = p.get(tape, self.b);
        let y = tape.matmul_bt(x, w);
        tape.add_row(y, b)
    }
}

/// `f'_i = W_p f_i + W_n · mean_{j ∈ N(i)} f_j + b` on frames stacked by rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphConv {
    pub w_point: usize,
    pub w_neighbor: usize,
    pub b: usize,
    pub input: usize,
    pub output: usize,
}

impl GraphConv {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        // Both weight blocks read `input` values each, so fan-in is 2·input.
        let w_point = store.add_uniform(format!("{name}.w_point"), output, input, 2 * input, rng);
        let w_neighbor = store.add_uniform(format!("{name}.w_neighbor"), output, input, 2 * input, rng);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(1, output));
        GraphConv {
            w_point,
            w_neighbor,
            b,
            input,
            output,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, x: Var, nbh: &Rc<Neighborhood>) -> Var {
        let wp = p.get(tape, self.w_point);
        let wn = p.get(tape, self.w_neighbor);
        let b = p.get(tape, self.b);
        let own = tape.matmul_bt(x, wp);
        let mean = tape.neighbor_mean(x, nbh);
        let other = tape.matmul_bt(mean, wn);
        let sum = tape.add(own, other);
        tape.add_row(sum, b)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::from_vec(1, dim, vec![1.0; dim]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, dim));
        LayerNorm { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, x: Var) -> Var {
        let g = p.get(tape, self.gain);
        let b = p.get(tape, self.bias);
        let n = tape.layer_norm(x, LAYER_NORM_EPS);
        let scaled = tape.mul_row(n, g);
        tape.add_row(scaled, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "model dim {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// Queries from `x` (`n×d`), keys and values from `memory` (`m×d`);
    /// `allowed` is the row-major `n×m` attention mask.
    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, x: Var, memory: Var, allowed: &[bool]) -> Var {
        let q = self.q.forward(tape, p, x);
        let k = self.k.forward(tape, p, memory);
        let v = self.v.forward(tape, p, memory);
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let heads: Vec<Var> = (0..self.heads)
            .map(|h| {
                let qh = tape.slice_cols(q, h * hd, hd);
                let kh = tape.slice_cols(k, h * hd, hd);
                let vh = tape.slice_cols(v, h * hd, hd);
                let scores = tape.matmul_bt(qh, kh);
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax(scores, Some(allowed));
                tape.matmul(attn, vh)
            })
            .collect();
        let joined = tape.concat_cols(&heads);
        self.o.forward(tape, p, joined)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.inner"), dim, hidden, rng),
            outer: Linear::new(store, &format!("{name}.outer"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, x: Var) -> Var {
        let h = self.inner.forward(tape, p, x);
        let h = tape.relu(h);
        self.outer.forward(tape, p, h)
    }
}

/// Post-norm encoder block: self-attention, then feed-forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        EncoderBlock {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, hidden, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, x: Var, allowed: &[bool]) -> Var {
        let a = self.attn.forward(tape, p, x, x, allowed);
        let x = tape.add(x, a);
        let x = self.norm1.forward(tape, p, x);
        let f = self.ff.forward(tape, p, x);
        let x = tape.add(x, f);
        self.norm2.forward(tape, p, x)
    }
}

/// Post-norm decoder block: masked self-attention, cross-attention over the
/// encoder output, then feed-forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderBlock {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        DecoderBlock {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, hidden, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, x: Var, memory: Var, self_mask: &[bool], cross_mask: &[bool]) -> Var {
        let a = self.self_attn.forward(tape, p, x, x, self_mask);
        let x = tape.add(x, a);
        let x = self.norm1.forward(tape, p, x);
        let c = self.cross_attn.forward(tape, p, x, memory, cross_mask);
        let x = tape.add(x, c);
        let x = self.norm2.forward(tape, p, x);
        let f = self.ff.forward(tape, p, x);
        let x = tape.add(x, f);
        self.norm3.forward(tape, p, x)
    }
}
