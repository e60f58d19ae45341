use super::{BackboneError, BackboneSpec};
use crate::numerics::{Rng, Tensor};

/// Fixed per-patch linear projection `E(x) = P x + b` with orthonormal rows.
///
/// The first row is the normalized all-ones vector, so channel 0 carries the
/// patch mean; the rest are seeded random directions orthogonalized against
/// it. `b = -P (0.5 * 1)` centres pixel values around mid-grey, and the
/// decoder is the transpose `D(z) = P^T (z - b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    /// `[patch_dim, latent_channels]`, columns are the rows of `P`.
    pub proj: Tensor,
    pub bias: Tensor,
    patch: usize,
    frame: [usize; 3],
}

impl Encoder {
    pub fn new(spec: &BackboneSpec) -> Encoder {
        let k = spec.patch * spec.patch * spec.frame[2];
        let c = spec.latent_channels;
        let mut rng = Rng::new(spec.seed).split("encoder");
        let mut rows: Vec<Vec<f64>> = vec![vec![1.0 / (k as f64).sqrt(); k]];
        while rows.len() < c {
            let mut v: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                rows.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        let mut proj = vec![0.0; k * c];
        for (j, r) in rows.iter().enumerate() {
            for i in 0..k {
                proj[i * c + j] = r[i];
            }
        }
        let bias: Vec<f64> = rows.iter().map(|r| -0.5 * r.iter().sum::<f64>()).collect();
        Encoder {
            proj: Tensor::from_slice(&[k, c], &proj).unwrap().rounded(),
            bias: Tensor::from_slice(&[c], &bias).unwrap().rounded(),
            patch: spec.patch,
            frame: spec.frame,
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.proj.shape()[0], self.proj.shape()[1])
    }

    /// `[T, H, W, C]` frames to `[T, h, w, c]` latents, each frame independently.
    pub fn encode(&self, frames: &Tensor) -> Result<Tensor, BackboneError> {
        let [fh, fw, fc] = self.frame;
        let s = frames.shape();
        if s.len() != 4 || s[1..] != [fh, fw, fc] {
            return Err(BackboneError::Shape(format!("encode: frames {s:?}, expected [T, {fh}, {fw}, {fc}]")));
        }
        let (k, c) = self.dims();
        let p = self.patch;
        let (lh, lw) = (fh / p, fw / p);
        let x = frames.data();
        let w = self.proj.data();
        let mut out = Vec::with_capacity(s[0] * lh * lw * c);
        let mut patch = vec![0.0; k];
        for f in 0..s[0] {
            for py in 0..lh {
                for px in 0..lw {
                    let mut i = 0;
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..fc {
                                patch[i] = x[((f * fh + py * p + dy) * fw + px * p + dx) * fc + ch];
                                i += 1;
                            }
                        }
                    }
                    for j in 0..c {
                        let v: f64 = (0..k).map(|i| patch[i] * w[i * c + j]).sum();
                        out.push(v + self.bias.data()[j]);
                    }
                }
            }
        }
        Ok(Tensor::checked(vec![s[0], lh, lw, c], out)?)
    }

    /// Transpose map back to pixels: `[T, h, w, c]` to `[T, H, W, C]`.
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor, BackboneError> {
        let [fh, fw, fc] = self.frame;
        let (k, c) = self.dims();
        let p = self.patch;
        let (lh, lw) = (fh / p, fw / p);
        let s = latents.shape();
        if s.len() != 4 || s[1..] != [lh, lw, c] {
            return Err(BackboneError::Shape(format!("decode: latents {s:?}, expected [T, {lh}, {lw}, {c}]")));
        }
        let z = latents.data();
        let w = self.proj.data();
        let mut out = vec![0.0; s[0] * fh * fw * fc];
        for f in 0..s[0] {
            for py in 0..lh {
                for px in 0..lw {
                    let zi = ((f * lh + py) * lw + px) * c;
                    let centred: Vec<f64> = (0..c).map(|j| z[zi + j] - self.bias.data()[j]).collect();
                    let mut i = 0;
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..fc {
                                let v: f64 = (0..c).map(|j| centred[j] * w[i * c + j]).sum();
                                out[((f * fh + py * p + dy) * fw + px * p + dx) * fc + ch] = v;
                                i += 1;
                            }
                        }
                    }
                }
            }
        }
        debug_assert_eq!(k, p * p * fc);
        Ok(Tensor::checked(s[..1].iter().copied().chain(self.frame).collect(), out)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_orthonormal() {
        let e = Encoder::new(&BackboneSpec::default());
        let (k, c) = e.dims();
        for a in 0..c {
            for b in 0..c {
                let dot: f64 = (0..k).map(|i| e.proj.data()[i * c + a] * e.proj.data()[i * c + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-6, "{a},{b}: {dot}");
            }
        }
    }

    #[test]
    fn constant_frame_round_trips() {
        let spec = BackboneSpec::default();
        let e = Encoder::new(&spec);
        let x = Tensor::full(&[2, 32, 32, 1], 0.3);
        let back = e.decode(&e.encode(&x).unwrap()).unwrap();
        assert_eq!(back.shape(), x.shape());
        assert!(back.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn wrong_extents_rejected() {
        let e = Encoder::new(&BackboneSpec::default());
        assert!(e.encode(&Tensor::zeros(&[1, 16, 32, 1])).is_err());
        assert!(e.decode(&Tensor::zeros(&[1, 8, 8, 3])).is_err());
    }
}
