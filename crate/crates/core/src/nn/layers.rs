use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, ParamId, ParamSet, Tensor, Var};

/// `y = x W + b` with `W: [in, out]`, applied row-wise to `x: [m, in]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = ps.add(format!("{name}.weight"), Tensor::uniform(&[in_dim, out_dim], bound, rng));
        let bias = ps.add(format!("{name}.bias"), Tensor::uniform(&[out_dim], bound, rng));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Stack of [`Linear`] layers with ReLU between them (none after the last).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, in_dim: usize, hidden: &[usize], out_dim: usize, rng: &mut R) -> Self {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x);
            if i < last {
                x = g.relu(x);
            }
        }
        x
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gain = ps.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm_rows(x, Self::EPS);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim % heads == 0, "hidden dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(ps, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// `query: [m, d]`, `memory: [n, d]`. `key_mask` is an additive `[1, n]`
    /// bias row (0 for visible keys, a large negative number for hidden ones).
    pub fn forward(&self, g: &mut Graph, query: Var, memory: Var, key_mask: Option<Var>) -> Var {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, memory);
        let v = self.v.forward(g, memory);
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd);
            let kh = g.slice_cols(k, h * hd, hd);
            let vh = g.slice_cols(v, h * hd, hd);
            let s = g.matmul_t(qh, kh);
            let mut s = g.scale(s, scale);
            if let Some(mask) = key_mask {
                s = g.add_row(s, mask);
            }
            let p = g.softmax_rows(s);
            outs.push(g.matmul(p, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.out.forward(g, cat)
    }
}

/// Post-norm transformer encoder block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff: Mlp,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, ff_dim: usize, rng: &mut R) -> Self {
        Self {
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads, rng),
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim),
            ff: Mlp::new(ps, &format!("{name}.ff"), dim, &[ff_dim], dim, rng),
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, key_mask: Option<Var>) -> Var {
        let a = self.attn.forward(g, x, x, key_mask);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, x);
        let f = self.ff.forward(g, x);
        let x = g.add(x, f);
        self.norm2.forward(g, x)
    }
}

/// Post-norm transformer decoder block: self-attention, cross-attention, FFN.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: Mlp,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, ff_dim: usize, rng: &mut R) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), dim, heads, rng),
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim),
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), dim, heads, rng),
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim),
            ff: Mlp::new(ps, &format!("{name}.ff"), dim, &[ff_dim], dim, rng),
            norm3: LayerNorm::new(ps, &format!("{name}.norm3"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var) -> Var {
        let a = self.self_attn.forward(g, x, x, None);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, x);
        let c = self.cross_attn.forward(g, x, memory, None);
        let x = g.add(x, c);
        let x = self.norm2.forward(g, x);
        let f = self.ff.forward(g, x);
        let x = g.add(x, f);
        self.norm3.forward(g, x)
    }
}

/// Fixed sinusoidal position table `[len, dim]`.
pub fn sinusoidal_table(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = (pos as f64 * freq).sin();
            data[pos * dim + 2 * i + 1] = (pos as f64 * freq).cos();
        }
        if dim % 2 == 1 {
            data[pos * dim + dim - 1] = (pos as f64).sin();
        }
    }
    Tensor::new(vec![len, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_param_grads;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let l = Linear::new(&mut ps, "l", 3, 4, &mut rng);
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]));
        let y = l.forward(&mut g, x);
        let y = g.value(y).clone();
        let b = ps.get(l.bias).data();
        assert_eq!(y.row_slice(1), b);
    }

    #[test]
    fn attention_layers_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let enc = EncoderLayer::new(&mut ps, "enc", 8, 2, 12, &mut rng);
        let dec = DecoderLayer::new(&mut ps, "dec", 8, 2, 12, &mut rng);
        let x = Tensor::uniform(&[5, 8], 1.0, &mut rng);
        let q = Tensor::uniform(&[3, 8], 1.0, &mut rng);
        let mask = Tensor::row(vec![0.0, 0.0, 0.0, -1e9, 0.0]);
        let weights = Tensor::uniform(&[3, 8], 1.0, &mut rng);
        let build = |g: &mut Graph| {
            let xv = g.input(x.clone());
            let mv = g.input(mask.clone());
            let m = enc.forward(g, xv, Some(mv));
            let qv = g.input(q.clone());
            let y = dec.forward(g, qv, m);
            let w = g.input(weights.clone());
            let s = g.mul(y, w);
            g.sum(s)
        };
        let report = check_param_grads(&ps, build, 40, 1e-5, &mut rng);
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn sinusoidal_rows_are_distinct() {
        let t = sinusoidal_table(64, 16);
        for i in 1..64 {
            assert!(t.row_slice(i) != t.row_slice(i - 1));
        }
    }
}
