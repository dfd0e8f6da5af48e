//! Parameterized building blocks shared by the encoders, the cross-modal
//! encoder and the ASR model.

use ctxasr_nn::{AttnMask, Graph, NodeId, ParamId, ParamStore, Real, SeedTree, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// One forward pass: a graph, the parameters it reads, and the dropout
/// stream used in training mode.
pub struct Pass<'a, F: Real> {
    pub g: Graph<F>,
    pub ps: &'a ParamStore<F>,
    rng: ChaCha8Rng,
    dropout: f64,
}

impl<'a, F: Real> Pass<'a, F> {
    /// Evaluation mode: dropout disabled.
    pub fn eval(ps: &'a ParamStore<F>) -> Self {
        Self {
            g: Graph::new(),
            ps,
            rng: SeedTree::new(0).rng(),
            dropout: 0.0,
        }
    }

    pub fn train(ps: &'a ParamStore<F>, seeds: SeedTree, dropout: f64) -> Self {
        Self {
            g: Graph::training(),
            ps,
            rng: seeds.named("dropout").rng(),
            dropout,
        }
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.g.param(self.ps, id)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> NodeId {
        self.g.constant(t)
    }

    pub fn dropout(&mut self, x: NodeId) -> Result<NodeId> {
        Ok(self.g.dropout(x, self.dropout, &mut self.rng)?)
    }

    pub fn rows(&self, x: NodeId) -> Result<usize> {
        Ok(self.g.value(x)?.rows())
    }

    pub fn cols(&self, x: NodeId) -> Result<usize> {
        Ok(self.g.value(x)?.cols())
    }

    pub fn value(&self, x: NodeId) -> Result<&Tensor<F>> {
        Ok(self.g.value(x)?)
    }
}

/// Registers parameters under a common name prefix with per-name init streams,
/// so initial values do not depend on registration order.
pub struct Init<'s, F: Real> {
    pub store: &'s mut ParamStore<F>,
    seeds: SeedTree,
}

impl<'s, F: Real> Init<'s, F> {
    pub fn new(store: &'s mut ParamStore<F>, seeds: SeedTree) -> Self {
        Self { store, seeds }
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        self.seeds.named(name).rng()
    }

    /// Glorot-uniform `[rows, cols]` matrix.
    pub fn glorot(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform(name, vec![rows, cols], a)
    }

    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, a: f64) -> Result<ParamId> {
        let mut rng = self.rng(name);
        let n = shape.iter().product();
        let data = (0..n).map(|_| F::of(rng.gen_range(-a..=a))).collect();
        Ok(self.store.add(name, Tensor::new(shape, data)?)?)
    }

    pub fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) -> Result<ParamId> {
        let mut rng = self.rng(name);
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                F::of(z * std)
            })
            .collect();
        Ok(self.store.add(name, Tensor::new(shape, data)?)?)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        Ok(self.store.add(name, Tensor::zeros(shape))?)
    }

    pub fn ones(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        Ok(self.store.add(name, Tensor::full(shape, F::one()))?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<F: Real>(init: &mut Init<F>, name: &str, din: usize, dout: usize, bias: bool) -> Result<Self> {
        let w = init.glorot(&format!("{name}.w"), din, dout)?;
        let b = bias.then(|| init.zeros(&format!("{name}.b"), vec![1, dout])).transpose()?;
        Ok(Self { w, b, din, dout })
    }

    /// All-zero weights, so the layer starts out contributing nothing.
    pub fn zeroed<F: Real>(init: &mut Init<F>, name: &str, din: usize, dout: usize, bias: bool) -> Result<Self> {
        let w = init.zeros(&format!("{name}.w"), vec![din, dout])?;
        let b = bias.then(|| init.zeros(&format!("{name}.b"), vec![1, dout])).transpose()?;
        Ok(Self { w, b, din, dout })
    }

    pub fn forward<F: Real>(&self, p: &mut Pass<F>, x: NodeId) -> Result<NodeId> {
        let w = p.param(self.w);
        let b = self.b.map(|b| p.param(b));
        Ok(p.g.linear(x, w, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(init: &mut Init<F>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: init.ones(&format!("{name}.gain"), vec![1, d])?,
            bias: init.zeros(&format!("{name}.bias"), vec![1, d])?,
        })
    }

    pub fn forward<F: Real>(&self, p: &mut Pass<F>, x: NodeId) -> Result<NodeId> {
        let g = p.param(self.gain);
        let b = p.param(self.bias);
        Ok(p.g.layer_norm(x, g, b, LN_EPS)?)
    }
}

/// Options for a multi-head attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionSpec {
    pub d_model: usize,
    /// Width of the key/value source.
    pub d_kv: usize,
    pub heads: usize,
    pub bias: bool,
    /// Start the output projection at zero.
    pub zero_output: bool,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Node handles produced by one attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    /// The key/value source as fed to the layer.
    pub source: NodeId,
    pub keys: NodeId,
    pub attention: NodeId,
    pub output: NodeId,
}

impl MultiHeadAttention {
    pub fn new<F: Real>(init: &mut Init<F>, name: &str, spec: AttentionSpec) -> Result<Self> {
        if spec.heads == 0 || spec.d_model % spec.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by {} heads",
                spec.d_model, spec.heads
            )));
        }
        let d = spec.d_model;
        let o = if spec.zero_output {
            Linear::zeroed(init, &format!("{name}.o"), d, d, spec.bias)?
        } else {
            Linear::new(init, &format!("{name}.o"), d, d, spec.bias)?
        };
        Ok(Self {
            q: Linear::new(init, &format!("{name}.q"), d, d, spec.bias)?,
            k: Linear::new(init, &format!("{name}.k"), spec.d_kv, d, spec.bias)?,
            v: Linear::new(init, &format!("{name}.v"), spec.d_kv, d, spec.bias)?,
            o,
            heads: spec.heads,
        })
    }

    pub fn forward<F: Real>(
        &self,
        p: &mut Pass<F>,
        query: NodeId,
        source: NodeId,
        mask: AttnMask,
    ) -> Result<AttentionTrace> {
        let q = self.q.forward(p, query)?;
        let k = self.k.forward(p, source)?;
        let v = self.v.forward(p, source)?;
        let attention = p.g.attention(q, k, v, self.heads, mask)?;
        let output = self.o.forward(p, attention)?;
        Ok(AttentionTrace {
            source,
            keys: k,
            attention,
            output,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Swish,
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub act: Activation,
}

impl FeedForward {
    pub fn new<F: Real>(
        init: &mut Init<F>,
        name: &str,
        d: usize,
        d_ff: usize,
        act: Activation,
        zero_output: bool,
    ) -> Result<Self> {
        let down = if zero_output {
            Linear::zeroed(init, &format!("{name}.down"), d_ff, d, true)?
        } else {
            Linear::new(init, &format!("{name}.down"), d_ff, d, true)?
        };
        Ok(Self {
            up: Linear::new(init, &format!("{name}.up"), d, d_ff, true)?,
            down,
            act,
        })
    }

    pub fn forward<F: Real>(&self, p: &mut Pass<F>, x: NodeId) -> Result<NodeId> {
        let h = self.up.forward(p, x)?;
        let h = match self.act {
            Activation::Relu => p.g.relu(h)?,
            Activation::Swish => p.g.swish(h)?,
        };
        let h = p.dropout(h)?;
        self.down.forward(p, h)
    }
}

/// Pre-norm transformer encoder block with full self-attention.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new<F: Real>(init: &mut Init<F>, name: &str, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        let spec = AttentionSpec {
            d_model: d,
            d_kv: d,
            heads,
            bias: true,
            zero_output: false,
        };
        Ok(Self {
            norm_attn: LayerNorm::new(init, &format!("{name}.norm_attn"), d)?,
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), spec)?,
            norm_ff: LayerNorm::new(init, &format!("{name}.norm_ff"), d)?,
            ff: FeedForward::new(init, &format!("{name}.ff"), d, d_ff, Activation::Relu, false)?,
        })
    }

    pub fn forward<F: Real>(&self, p: &mut Pass<F>, x: NodeId) -> Result<NodeId> {
        let h = self.norm_attn.forward(p, x)?;
        let a = self.attn.forward(p, h, h, AttnMask::None)?.output;
        let a = p.dropout(a)?;
        let x = p.g.add(x, a)?;
        let h = self.norm_ff.forward(p, x)?;
        let f = self.ff.forward(p, h)?;
        let f = p.dropout(f)?;
        Ok(p.g.add(x, f)?)
    }
}

/// Sinusoidal position table: `sin` on even columns, `cos` on odd ones.
pub fn positional_encode<F: Real>(length: usize, d_model: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(length * d_model);
    for pos in 0..length {
        for j in 0..d_model {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d_model as f64);
            data.push(F::of(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![length, d_model], data).expect("consistent shape")
}

/// Adds the position table to a `len × d` node.
pub fn add_positions<F: Real>(p: &mut Pass<F>, x: NodeId) -> Result<NodeId> {
    let (n, d) = (p.rows(x)?, p.cols(x)?);
    let pe = p.constant(positional_encode(n, d));
    Ok(p.g.add(x, pe)?)
}
