//! Central finite-difference verification of reverse-mode gradients.

use super::{Graph, NumericsError, ParamStore, Tensor, Var};

type Result<T> = std::result::Result<T, NumericsError>;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn check_step(step: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&step) {
        return Err(NumericsError::Invalid(format!("finite-difference step {step} outside [1e-6, 1e-3]")));
    }
    Ok(())
}

fn eval_scalar(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(NumericsError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Max over coordinates of `|analytic - central| / (|analytic| + |central| + 1e-12)`
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_step(step)?;
    let mut g = Graph::new();
    let x = g.input(point.clone());
    let out = f(&mut g, x)?;
    eval_scalar(&g, out)?;
    g.backward(out)?;
    let analytic = g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval_at = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(t);
        let out = f(&mut g, x)?;
        eval_scalar(&g, out)
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval_at(plus)? - eval_at(minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same measure over every coordinate of every parameter in `params`.
/// `f` binds parameters with [`Graph::param`] and returns the scalar loss.
pub fn grad_check_params<F>(f: F, params: &ParamStore, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_step(step)?;
    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    eval_scalar(&g, out)?;
    g.backward(out)?;
    let grads = g.param_grads();

    let eval_with = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let out = f(&mut g, p)?;
        eval_scalar(&g, out)
    };
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let up = eval_with(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let down = eval_with(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(name).map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}

/// Finite-difference check of every primitive and composite op.
///
/// Each case reduces the op's output to a scalar through a fixed random
/// weighting, so no coordinate has a structurally zero gradient. Binary ops
/// receive two different functions of the probe point so both input slots are
/// exercised. Returns `(op name, max relative error)` per case; run it under
/// [`super::Precision::F64`].
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use super::{nn, Rng};
    let rng = Rng::new(seed).split("op-suite");
    let step = 1e-5;

    type Case = (&'static str, Vec<usize>, Box<dyn Fn(&mut Graph, Var) -> Result<Var>>);
    let two = |g: &mut Graph, x: Var| -> Result<(Var, Var)> {
        let y = g.tanh(x)?;
        let y = g.affine(y, 1.5, 0.25)?;
        Ok((x, y))
    };
    let cases: Vec<Case> = vec![
        ("add", vec![2, 3], Box::new(move |g, x| { let (a, b) = two(g, x)?; g.add(a, b) })),
        ("sub", vec![2, 3], Box::new(move |g, x| { let (a, b) = two(g, x)?; g.sub(a, b) })),
        ("mul", vec![2, 3], Box::new(move |g, x| { let (a, b) = two(g, x)?; g.mul(a, b) })),
        ("add_suffix", vec![2, 3], Box::new(|g, x| { let b = g.slice(x, 0, 1, 2)?; let b = g.reshape(b, &[3])?; let b = g.sigmoid(b)?; g.add_suffix(x, b) })),
        ("mul_suffix", vec![2, 3], Box::new(|g, x| { let b = g.slice(x, 0, 0, 1)?; let b = g.reshape(b, &[3])?; let b = g.tanh(b)?; g.mul_suffix(x, b) })),
        ("affine", vec![4], Box::new(|g, x| g.affine(x, -0.7, 2.0))),
        ("matmul", vec![3, 4], Box::new(|g, x| { let y = g.tanh(x)?; g.matmul_t(x, y, false, true) })),
        ("matmul_ta", vec![3, 4], Box::new(|g, x| { let y = g.tanh(x)?; g.matmul_t(x, y, true, false) })),
        ("matmul_tatb", vec![3, 3], Box::new(|g, x| { let y = g.sigmoid(x)?; g.matmul_t(x, y, true, true) })),
        ("matmul_batched", vec![2, 2, 3], Box::new(|g, x| { let y = g.tanh(x)?; let y = g.transpose(y)?; g.matmul(x, y) })),
        ("reshape", vec![2, 3], Box::new(|g, x| g.reshape(x, &[3, 2]))),
        ("permute", vec![2, 3, 4], Box::new(|g, x| g.permute(x, &[2, 0, 1]))),
        ("transpose", vec![3, 2], Box::new(|g, x| g.transpose(x))),
        ("slice", vec![3, 4], Box::new(|g, x| g.slice(x, 1, 1, 3))),
        ("concat", vec![2, 3], Box::new(|g, x| { let y = g.exp(x)?; g.concat(&[x, y, x], 1) })),
        ("gather", vec![5], Box::new(|g, x| g.gather(x, std::sync::Arc::new(vec![4, -1, 0, 0, 2, 3]), &[2, 3]))),
        ("sum", vec![2, 3, 2], Box::new(|g, x| g.sum(x, &[0, 2]))),
        ("mean", vec![2, 3, 2], Box::new(|g, x| g.mean(x, &[1]))),
        ("softmax_last", vec![3, 4], Box::new(|g, x| g.softmax(x, 1))),
        ("softmax_first", vec![3, 4], Box::new(|g, x| g.softmax(x, 0))),
        ("layer_norm", vec![3, 5], Box::new(|g, x| g.layer_norm(x, 1e-5))),
        ("gelu", vec![6], Box::new(|g, x| g.gelu(x))),
        ("silu", vec![6], Box::new(|g, x| g.silu(x))),
        ("sigmoid", vec![6], Box::new(|g, x| g.sigmoid(x))),
        ("exp", vec![6], Box::new(|g, x| g.exp(x))),
        ("ln", vec![6], Box::new(|g, x| { let y = g.exp(x)?; let y = g.affine(y, 1.0, 0.5)?; g.ln(y) })),
        ("tanh", vec![6], Box::new(|g, x| g.tanh(x))),
        ("powf", vec![6], Box::new(|g, x| { let y = g.sigmoid(x)?; g.powf(y, 2.5) })),
        ("clamp", vec![6], Box::new(|g, x| { let y = g.sigmoid(x)?; g.clamp(y, 1e-7, 1.0 - 1e-7) })),
        ("attention", vec![2, 3, 4], Box::new(|g, x| {
            let k = g.tanh(x)?;
            let v = g.sigmoid(x)?;
            nn::attention(g, x, k, v, Some(&[true, true, false]))
        })),
        ("embedding", vec![4, 3], Box::new(|g, x| nn::embedding(g, x, &[2, 0, 2]))),
        ("im2col3x3", vec![1, 3, 3, 2], Box::new(|g, x| nn::im2col3x3(g, x, 2))),
        ("upsample2x", vec![1, 2, 2, 2], Box::new(|g, x| nn::upsample2x(g, x))),
    ];

    let mut results = Vec::with_capacity(cases.len() + 1);
    for (i, (name, shape, op)) in cases.into_iter().enumerate() {
        let mut r = rng.split_index("case", i as u64);
        let point = r.normal_tensor(&shape, 0.8);
        let probe = |g: &mut Graph, x: Var| -> Result<Var> {
            let y = op(g, x)?;
            let mut wr = rng.split_index("weights", i as u64);
            let w = wr.normal_tensor(g.shape(y), 1.0);
            let w = g.constant(w);
            let prod = g.mul(y, w)?;
            g.sum_all(prod)
        };
        results.push((name, grad_check(probe, &point, step)?));
    }

    // multi-head attention with learned projections, including the sinusoidal table
    let mut store = ParamStore::new();
    let prng = rng.split("mha");
    nn::init_attention(&mut store, &prng, "att", 4, 4, 1.0);
    nn::init_norm(&mut store, "ln", 4);
    let mut r = rng.split("mha-input");
    let input = r.normal_tensor(&[1, 3, 4], 1.0);
    let pe = nn::sinusoidal(&[0.0, 1.0, 2.0], 4).reshaped(&[1, 3, 4])?;
    let weights = r.normal_tensor(&[1, 3, 4], 1.0);
    // the key bias shifts every score of a query equally, so softmax cancels it and
    // its gradient is identically zero; it stays fixed rather than probed
    let fixed = store.filtered(|n| n == "att.k.b");
    let probed = store.filtered(|n| n != "att.k.b");
    let mha = |g: &mut Graph, p: &ParamStore| -> Result<Var> {
        let mut p = p.clone();
        p.extend(fixed.clone());
        let p = &p;
        let x = g.constant(input.clone());
        let pos = g.constant(pe.clone());
        let x = g.add(x, pos)?;
        let h = nn::layer_norm(g, p, "ln", x)?;
        let y = nn::multi_head_attention(g, p, "att", h, h, 2, None)?;
        let w = g.constant(weights.clone());
        let y = g.mul(y, w)?;
        g.sum_all(y)
    };
    results.push(("multi_head_attention", grad_check_params(mha, &probed, step)?));
    Ok(results)
}
