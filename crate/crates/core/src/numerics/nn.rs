//! Layer building blocks composed from graph primitives.

use std::sync::Arc;

use super::{Graph, NumericsError, ParamStore, Rng, Tensor, Var};

type Result<T> = std::result::Result<T, NumericsError>;

/// Fetch a parameter from the store and bind it in the graph.
pub fn p(g: &mut Graph, store: &ParamStore, name: &str) -> Result<Var> {
    let t = store.get(name).ok_or_else(|| NumericsError::Invalid(format!("missing parameter {name}")))?;
    Ok(g.param(name, t))
}

/// Register `{prefix}.w` (`[fan_in, fan_out]`) and `{prefix}.b`.
pub fn init_linear(store: &mut ParamStore, rng: &Rng, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) {
    let std = gain / (fan_in as f64).sqrt();
    let mut r = rng.split(prefix);
    store.insert(format!("{prefix}.w"), r.normal_tensor(&[fan_in, fan_out], std));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

/// Register affine layer-norm parameters `{prefix}.g` / `{prefix}.b`.
pub fn init_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[dim], 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[dim]));
}

/// `x . W + b` over the last axis of `x`.
pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = p(g, store, &format!("{prefix}.w"))?;
    let b = p(g, store, &format!("{prefix}.b"))?;
    let shape = g.shape(x).to_vec();
    let fan_in = *shape.last().unwrap();
    let rows = shape.iter().product::<usize>() / fan_in;
    let fan_out = g.shape(w)[1];
    let flat = g.reshape(x, &[rows, fan_in])?;
    let y = g.matmul(flat, w)?;
    let y = g.add_suffix(y, b)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = fan_out;
    g.reshape(y, &out_shape)
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gamma = p(g, store, &format!("{prefix}.g"))?;
    let beta = p(g, store, &format!("{prefix}.b"))?;
    let n = g.layer_norm(x, 1e-5)?;
    let n = g.mul_suffix(n, gamma)?;
    g.add_suffix(n, beta)
}

/// Additive key mask: 0 for valid keys, a large negative value for padding.
pub fn key_mask_bias(mask: &[bool]) -> Tensor {
    let data = mask.iter().map(|&m| if m { 0.0 } else { -1e9 }).collect();
    Tensor::from_parts(vec![mask.len()], data)
}

/// Scaled dot-product attention over batched `q [B,Nq,d]`, `k [B,Nk,d]`, `v [B,Nk,dv]`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, key_mask: Option<&[bool]>) -> Result<Var> {
    let d = *g.shape(q).last().unwrap();
    let scores = g.matmul_t(q, k, false, true)?;
    let mut scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    if let Some(mask) = key_mask {
        let nk = g.shape(k)[1];
        if mask.len() != nk {
            return Err(NumericsError::ShapeMismatch { op: "attention", expected: vec![nk], got: vec![mask.len()] });
        }
        let bias = g.constant(key_mask_bias(mask));
        scores = g.add_suffix(scores, bias)?;
    }
    let weights = g.softmax(scores, 2)?;
    g.matmul(weights, v)
}

/// `[B, N, H*dh] -> [B*H, N, dh]`
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, n, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, n, d / heads])
}

fn merge_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (bh, n, dh) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[bh / heads, heads, n, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[bh / heads, n, heads * dh])
}

pub fn init_attention(store: &mut ParamStore, rng: &Rng, prefix: &str, dim: usize, kv_dim: usize, out_gain: f64) {
    init_linear(store, rng, &format!("{prefix}.q"), dim, dim, 1.0);
    init_linear(store, rng, &format!("{prefix}.k"), kv_dim, dim, 1.0);
    init_linear(store, rng, &format!("{prefix}.v"), kv_dim, dim, 1.0);
    init_linear(store, rng, &format!("{prefix}.o"), dim, dim, out_gain);
}

/// Multi-head attention of `x [B,Nq,D]` over `ctx [B,Nk,Dk]`, with output projection.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    ctx: Var,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let dim = *g.shape(x).last().unwrap();
    if dim % heads != 0 {
        return Err(NumericsError::Invalid(format!("dim {dim} not divisible by {heads} heads")));
    }
    let q = linear(g, store, &format!("{prefix}.q"), x)?;
    let k = linear(g, store, &format!("{prefix}.k"), ctx)?;
    let v = linear(g, store, &format!("{prefix}.v"), ctx)?;
    let (q, k, v) = if heads > 1 {
        (split_heads(g, q, heads)?, split_heads(g, k, heads)?, split_heads(g, v, heads)?)
    } else {
        (q, k, v)
    };
    let a = attention(g, q, k, v, key_mask)?;
    let a = if heads > 1 { merge_heads(g, a, heads)? } else { a };
    linear(g, store, &format!("{prefix}.o"), a)
}

/// Self-attention over `x [B, N, D]` where item `b` may only attend to the
/// keys with `masks[b][k] == true`.
pub fn masked_self_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    heads: usize,
    masks: &[Vec<bool>],
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, dim) = (s[0], s[1], s[2]);
    if dim % heads != 0 {
        return Err(NumericsError::Invalid(format!("dim {dim} not divisible by {heads} heads")));
    }
    if masks.len() != b || masks.iter().any(|m| m.len() != n) {
        return Err(NumericsError::ShapeMismatch {
            op: "masked_self_attention",
            expected: vec![b, n],
            got: vec![masks.len(), masks.first().map_or(0, Vec::len)],
        });
    }
    let q = linear(g, store, &format!("{prefix}.q"), x)?;
    let k = linear(g, store, &format!("{prefix}.k"), x)?;
    let v = linear(g, store, &format!("{prefix}.v"), x)?;
    let (q, k, v) = (split_heads(g, q, heads)?, split_heads(g, k, heads)?, split_heads(g, v, heads)?);
    let scores = g.matmul_t(q, k, false, true)?;
    let scores = g.scale(scores, 1.0 / ((dim / heads) as f64).sqrt())?;
    let mut bias = Vec::with_capacity(b * heads * n * n);
    for m in masks {
        let row = key_mask_bias(m);
        for _ in 0..heads * n {
            bias.extend_from_slice(row.data());
        }
    }
    let bias = g.constant(Tensor::from_parts(vec![b * heads, n, n], bias));
    let scores = g.add(scores, bias)?;
    let weights = g.softmax(scores, 2)?;
    let a = g.matmul(weights, v)?;
    let a = merge_heads(g, a, heads)?;
    linear(g, store, &format!("{prefix}.o"), a)
}

/// Sinusoidal encoding of `positions` into `dim` channels (sin on even, cos on odd).
pub fn sinusoidal(positions: &[f64], dim: usize) -> Tensor {
    let mut data = vec![0.0; positions.len() * dim];
    for (r, &pos) in positions.iter().enumerate() {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[r * dim + 2 * i] = (pos * freq).sin();
            data[r * dim + 2 * i + 1] = (pos * freq).cos();
        }
    }
    Tensor::from_parts(vec![positions.len(), dim], data).rounded()
}

/// Rows of `table [V, d]` selected by `ids`.
pub fn embedding(g: &mut Graph, table: Var, ids: &[usize]) -> Result<Var> {
    let s = g.shape(table).to_vec();
    let (vocab, d) = (s[0], s[1]);
    let mut index = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= vocab {
            return Err(NumericsError::OutOfRange { op: "embedding", index: id, bound: vocab });
        }
        index.extend((id * d..(id + 1) * d).map(|j| j as isize));
    }
    g.gather(table, Arc::new(index), &[ids.len(), d])
}

/// Patch matrix for a 3x3 convolution with zero padding 1 over `x [B,H,W,C]`.
/// Returns `[B, Ho, Wo, 9*C]`.
pub fn im2col3x3(g: &mut Graph, x: Var, stride: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(NumericsError::InvalidShape(s));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let mut index = Vec::with_capacity(b * ho * wo * 9 * c);
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        let ix = (ox * stride + kx) as isize - 1;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        for ci in 0..c {
                            index.push(if inside {
                                (((bi * h + iy as usize) * w + ix as usize) * c + ci) as isize
                            } else {
                                -1
                            });
                        }
                    }
                }
            }
        }
    }
    g.gather(x, Arc::new(index), &[b, ho, wo, 9 * c])
}

pub fn init_conv3x3(store: &mut ParamStore, rng: &Rng, prefix: &str, cin: usize, cout: usize, gain: f64) {
    init_linear(store, rng, prefix, 9 * cin, cout, gain);
}

pub fn conv3x3(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let cols = im2col3x3(g, x, stride)?;
    linear(g, store, prefix, cols)
}

/// Nearest-neighbour 2x upsampling of `x [B,H,W,C]`.
pub fn upsample2x(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut index = Vec::with_capacity(b * 4 * h * w * c);
    for bi in 0..b {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let base = ((bi * h + y / 2) * w + xx / 2) * c;
                index.extend((base..base + c).map(|j| j as isize));
            }
        }
    }
    g.gather(x, Arc::new(index), &[b, 2 * h, 2 * w, c])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_single_key_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_slice(&[1, 1, 2], &[0.3, -2.0]).unwrap());
        let k = g.constant(Tensor::from_slice(&[1, 1, 2], &[1.5, 0.7]).unwrap());
        let v = g.constant(Tensor::from_slice(&[1, 1, 3], &[4.0, -1.0, 0.5]).unwrap());
        let out = attention(&mut g, q, k, v, None).unwrap();
        assert_eq!(g.value(out).data(), &[4.0, -1.0, 0.5]);
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_slice(&[1, 1, 1], &[1.0]).unwrap());
        let k = g.constant(Tensor::from_slice(&[1, 2, 1], &[1.0, 5.0]).unwrap());
        let v = g.constant(Tensor::from_slice(&[1, 2, 1], &[2.0, 9.0]).unwrap());
        let out = attention(&mut g, q, k, v, Some(&[true, false])).unwrap();
        assert_eq!(g.value(out).data(), &[2.0]);
    }

    #[test]
    fn im2col_center_tap_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_slice(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let cols = im2col3x3(&mut g, x, 1).unwrap();
        let v = g.value(cols).data();
        // tap 4 is the centre of the 3x3 window
        let centre: Vec<f64> = (0..4).map(|i| v[i * 9 + 4]).collect();
        assert_eq!(centre, vec![1.0, 2.0, 3.0, 4.0]);
        // top-left output: the up-left neighbour is padding
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_slice(&[1, 1, 2, 1], &[1.0, 2.0]).unwrap());
        let y = upsample2x(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 4, 1]);
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn sinusoidal_position_zero() {
        let pe = sinusoidal(&[0.0], 4);
        assert_eq!(pe.data(), &[0.0, 1.0, 0.0, 1.0]);
    }
}
