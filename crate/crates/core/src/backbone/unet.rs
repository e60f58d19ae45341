//! The temporal U-Net denoiser.

use super::spec::TEMPORAL_BLOCKS;
use super::{BackboneError, BackboneSpec};
use crate::numerics::{nn, Graph, ParamStore, Rng, Tensor, Var};

type Result<T> = std::result::Result<T, BackboneError>;

struct BlockDef {
    name: &'static str,
    cin: usize,
    cout: usize,
    self_attn: bool,
}

fn blocks(spec: &BackboneSpec) -> Vec<BlockDef> {
    let [c0, c1] = spec.channels;
    let b = |name, cin, cout, self_attn| BlockDef { name, cin, cout, self_attn };
    vec![
        b("l1", c0, c0, false),
        b("l2", c0, c0, false),
        b("l3", c1, c1, true),
        b("l4", c1, c1, true),
        b("l5", c1, c1, true),
        b("l6", c1, c1, true),
        b("dec2", 2 * c1, c1, true),
        b("dec1", c1 + c0, c0, false),
    ]
}

pub(crate) fn init_weights(store: &mut ParamStore, spec: &BackboneSpec, rng: &Rng) {
    let [c0, c1] = spec.channels;
    let td = spec.time_dim;
    nn::init_linear(store, rng, "temb.fc1", td / 2, td, 1.0);
    nn::init_linear(store, rng, "temb.fc2", td, td, 1.0);
    nn::init_conv3x3(store, rng, "conv_in", spec.latent_channels, c0, 1.0);
    nn::init_conv3x3(store, rng, "down1", c0, c1, 1.0);
    for b in blocks(spec) {
        let n = b.name;
        nn::init_norm(store, &format!("{n}.n1"), b.cin);
        nn::init_conv3x3(store, rng, &format!("{n}.c1"), b.cin, b.cout, 1.0);
        nn::init_linear(store, rng, &format!("{n}.t"), td, b.cout, 1.0);
        nn::init_norm(store, &format!("{n}.n2"), b.cout);
        nn::init_conv3x3(store, rng, &format!("{n}.c2"), b.cout, b.cout, 1.0);
        if b.cin != b.cout {
            nn::init_linear(store, rng, &format!("{n}.skip"), b.cin, b.cout, 1.0);
        }
        if b.self_attn {
            nn::init_norm(store, &format!("{n}.sa.n"), b.cout);
            nn::init_attention(store, rng, &format!("{n}.sa"), b.cout, b.cout, 1.0);
        }
        nn::init_norm(store, &format!("{n}.ca.n"), b.cout);
        nn::init_attention(store, rng, &format!("{n}.ca"), b.cout, spec.cond_dim, 1.0);
        nn::init_norm(store, &format!("{n}.ta.n"), b.cout);
        nn::init_attention(store, rng, &format!("{n}.ta"), b.cout, b.cout, 1.0);
    }
    nn::init_norm(store, "out.n", c0);
    // near-zero output head: the untrained model predicts eps ~ 0
    nn::init_conv3x3(store, rng, "out.conv", c0, spec.latent_channels, 0.01);
}

struct Ctx<'a> {
    w: &'a ParamStore,
    spec: &'a BackboneSpec,
    temb: Var,
    cond: Var,
}

/// `[M, H, W, C] -> [M, H*W, C]` and back.
fn tokens(g: &mut Graph, x: Var) -> Result<(Var, [usize; 4])> {
    let s = g.shape(x).to_vec();
    let t = g.reshape(x, &[s[0], s[1] * s[2], s[3]])?;
    Ok((t, [s[0], s[1], s[2], s[3]]))
}

fn block(g: &mut Graph, cx: &Ctx, def: &BlockDef, alpha: f64, x: Var) -> Result<Var> {
    let n = def.name;
    let w = cx.w;
    let heads = cx.spec.heads;

    let h = nn::layer_norm(g, w, &format!("{n}.n1"), x)?;
    let h = g.silu(h)?;
    let h = nn::conv3x3(g, w, &format!("{n}.c1"), h, 1)?;
    let te = g.silu(cx.temb)?;
    let te = nn::linear(g, w, &format!("{n}.t"), te)?;
    let te = g.reshape(te, &[def.cout])?;
    let h = g.add_suffix(h, te)?;
    let h = nn::layer_norm(g, w, &format!("{n}.n2"), h)?;
    let h = g.silu(h)?;
    let h = nn::conv3x3(g, w, &format!("{n}.c2"), h, 1)?;
    let skip = if def.cin != def.cout { nn::linear(g, w, &format!("{n}.skip"), x)? } else { x };
    let x = g.add(skip, h)?;

    let (mut t, dims) = tokens(g, x)?;
    let [m, hh, ww, c] = dims;
    if def.self_attn {
        let a = nn::layer_norm(g, w, &format!("{n}.sa.n"), t)?;
        let a = nn::multi_head_attention(g, w, &format!("{n}.sa"), a, a, heads, None)?;
        t = g.add(t, a)?;
    }

    let q = nn::layer_norm(g, w, &format!("{n}.ca.n"), t)?;
    let cs = g.shape(cx.cond).to_vec();
    let ctx = g.reshape(cx.cond, &[1, cs[0], cs[1]])?;
    let ctx = if m > 1 { g.concat(&vec![ctx; m], 0)? } else { ctx };
    let a = nn::multi_head_attention(g, w, &format!("{n}.ca"), q, ctx, heads, None)?;
    t = g.add(t, a)?;

    // alpha * x + (1 - alpha) * (x + temporal(x)); alpha = 1 skips the path entirely
    if alpha < 1.0 {
        let seq = g.permute(t, &[1, 0, 2])?;
        let a = nn::layer_norm(g, w, &format!("{n}.ta.n"), seq)?;
        let positions: Vec<f64> = (0..m).map(|i| i as f64).collect();
        let pe = g.constant(nn::sinusoidal(&positions, c));
        let a = g.add_suffix(a, pe)?;
        let a = nn::multi_head_attention(g, w, &format!("{n}.ta"), a, a, heads, None)?;
        let a = g.permute(a, &[1, 0, 2])?;
        let a = g.scale(a, 1.0 - alpha)?;
        t = g.add(t, a)?;
    }
    Ok(g.reshape(t, &[m, hh, ww, c])?)
}

/// Result of one pass: the noise prediction (absent when the pass stopped
/// early) and the requested taps in request order.
pub(crate) struct Pass {
    pub eps: Option<Var>,
    pub taps: Vec<Var>,
}

/// Run the denoiser on `latents [M, h, w, c]` at diffusion index `t` with
/// condition tokens `cond [N, cond_dim]`. With `full = false` the pass stops
/// after the deepest requested tap.
pub(crate) fn forward(
    g: &mut Graph,
    w: &ParamStore,
    spec: &BackboneSpec,
    latents: Var,
    t: usize,
    cond: Var,
    taps: &[usize],
    full: bool,
) -> Result<Pass> {
    for &l in taps {
        spec.layer_extents(l)?;
    }
    let stop = if full { usize::MAX } else { taps.iter().copied().max().unwrap_or(0) };
    let defs = blocks(spec);
    let alpha = |name: &str| spec.alphas[TEMPORAL_BLOCKS.iter().position(|b| *b == name).unwrap()];

    let te = g.constant(nn::sinusoidal(&[t as f64], spec.time_dim / 2));
    let te = nn::linear(g, w, "temb.fc1", te)?;
    let te = g.silu(te)?;
    let temb = nn::linear(g, w, "temb.fc2", te)?;
    let cx = Ctx { w, spec, temb, cond };

    let mut tapped: Vec<(usize, Var)> = Vec::new();
    let mut acts: Vec<Var> = Vec::with_capacity(6);
    let mut x = nn::conv3x3(g, w, "conv_in", latents, 1)?;
    for (i, def) in defs[..6].iter().enumerate() {
        if i == 2 {
            x = nn::conv3x3(g, w, "down1", x, 2)?;
        }
        x = block(g, &cx, def, alpha(def.name), x)?;
        acts.push(x);
        let layer = i + 1;
        if taps.contains(&layer) {
            tapped.push((layer, x));
        }
        if layer >= stop {
            break;
        }
    }
    let order = |tapped: &[(usize, Var)]| taps.iter().map(|l| tapped.iter().find(|(k, _)| k == l).unwrap().1).collect();
    if !full {
        return Ok(Pass { eps: None, taps: order(&tapped) });
    }

    let x = g.concat(&[acts[5], acts[3]], 3)?;
    let x = block(g, &cx, &defs[6], alpha("dec2"), x)?;
    let x = nn::upsample2x(g, x)?;
    let x = g.concat(&[x, acts[1]], 3)?;
    let x = block(g, &cx, &defs[7], alpha("dec1"), x)?;
    let x = nn::layer_norm(g, w, "out.n", x)?;
    let x = g.silu(x)?;
    let eps = nn::conv3x3(g, w, "out.conv", x, 1)?;
    Ok(Pass { eps: Some(eps), taps: order(&tapped) })
}

/// Bind `latents` as a constant and run [`forward`] without gradients.
pub(crate) fn run(
    w: &ParamStore,
    spec: &BackboneSpec,
    latents: &Tensor,
    t: usize,
    cond: &Tensor,
    taps: &[usize],
    full: bool,
) -> Result<(Option<Tensor>, Vec<Tensor>)> {
    let mut g = Graph::inference();
    let z = g.constant(latents.clone());
    let c = g.constant(cond.clone());
    let pass = forward(&mut g, w, spec, z, t, c, taps, full)?;
    let eps = pass.eps.map(|v| g.value(v).clone());
    let taps = pass.taps.into_iter().map(|v| g.value(v).clone()).collect();
    Ok((eps, taps))
}
