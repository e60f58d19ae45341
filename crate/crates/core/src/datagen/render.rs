//! Anti-aliased rasterization of the synthetic scenes.

use std::f64::consts::PI;

use super::scene::{Action, Context, SceneSpec, Species, Viewpoint, FRAME_SIZE};
use super::{DatagenError, VideoClip};
use crate::numerics::{Rng, Tensor};

const SUPERSAMPLE: usize = 4;
const MARKER_OFFSET: f64 = 0.45;
const MARKER_RADIUS: f64 = 0.28;

/// Rectangle a sprite's centre is confined to (before camera jitter).
#[derive(Clone, Copy, Debug)]
struct Arena {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

/// Resolved per-sprite motion parameters.
#[derive(Clone, Debug)]
struct Sprite {
    species: Species,
    action: Action,
    radius: f64,
    intensity: f64,
    start: (f64, f64),
    velocity: (f64, f64),
    osc_dir: (f64, f64),
    osc_amp: f64,
    period: f64,
    phase: f64,
    angle0: f64,
    spin: f64,
}

#[derive(Clone, Debug)]
enum Background {
    Plain(f64),
    Textured(Vec<(f64, f64, f64, f64)>),
    Gradient { dir: (f64, f64), lo: f64, hi: f64 },
}

impl Background {
    fn sample(&self, x: f64, y: f64) -> f64 {
        match self {
            Background::Plain(v) => *v,
            Background::Textured(waves) => {
                let mut v = 0.2;
                for &(fx, fy, ph, amp) in waves {
                    v += amp * (fx * x + fy * y + ph).sin();
                }
                v.clamp(0.0, 1.0)
            }
            Background::Gradient { dir, lo, hi } => {
                let s = FRAME_SIZE as f64;
                let t = ((x - s / 2.0) * dir.0 + (y - s / 2.0) * dir.1) / s + 0.5;
                lo + (hi - lo) * t.clamp(0.0, 1.0)
            }
        }
    }
}

fn inside_polygon(pts: &[(f64, f64)], u: f64, v: f64) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn regular_star(points: usize, outer: f64, inner: f64) -> Vec<(f64, f64)> {
    (0..2 * points)
        .map(|k| {
            let r = if k % 2 == 0 { outer } else { inner };
            let a = PI * k as f64 / points as f64;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

/// Coverage value of a unit-radius shape at local coordinates; 0 outside,
/// 1 on the body, a darker value on the orientation marker.
fn shape_value(species: Species, u: f64, v: f64, triangle: &[(f64, f64)], star: &[(f64, f64)]) -> Option<f64> {
    let body = match species {
        Species::Circle => u * u + v * v <= 1.0,
        Species::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
        Species::Triangle => inside_polygon(triangle, u, v),
        Species::Star => inside_polygon(star, u, v),
        Species::Cross => (u.abs() <= 0.33 && v.abs() <= 1.0) || (v.abs() <= 0.33 && u.abs() <= 1.0),
    };
    if !body {
        return None;
    }
    let du = u - MARKER_OFFSET;
    if du * du + v * v <= MARKER_RADIUS * MARKER_RADIUS {
        Some(0.4)
    } else {
        Some(1.0)
    }
}

impl Sprite {
    fn draw(rng: &mut Rng, species: Species, action: Action, viewpoint: Viewpoint, arena: Arena, frames: usize, scale: f64) -> Sprite {
        let radius = scale
            * match viewpoint {
                Viewpoint::ThirdPerson => rng.uniform_range(3.8, 4.8),
                Viewpoint::Ego => rng.uniform_range(7.5, 9.0),
            };
        let intensity = rng.uniform_range(0.8, 0.95);
        let margin = radius + 1.0;
        let (lo_x, hi_x) = (arena.x0 + margin, arena.x1 - margin);
        let (lo_y, hi_y) = (arena.y0 + margin, arena.y1 - margin);
        let mid = ((lo_x + hi_x) / 2.0, (lo_y + hi_y) / 2.0);
        let mut start = match viewpoint {
            Viewpoint::ThirdPerson => (rng.uniform_range(lo_x, hi_x), rng.uniform_range(lo_y, hi_y)),
            Viewpoint::Ego => {
                // off-centre: pushed towards a random corner of the arena
                let a = rng.uniform_range(0.0, 2.0 * PI);
                let reach = 0.6;
                (mid.0 + reach * (hi_x - mid.0) * a.cos(), mid.1 + reach * (hi_y - mid.1) * a.sin())
            }
        };
        let heading = rng.uniform_range(0.0, 2.0 * PI);
        let (mut vx, mut vy) = (0.0, 0.0);
        if action == Action::Translate {
            let speed = rng.uniform_range(0.6, 1.0);
            let span = (frames - 1) as f64;
            let (dx, dy) = (heading.cos(), heading.sin());
            // largest speed (up to the draw) whose whole path fits the arena
            let fit = |lo: f64, hi: f64, d: f64| if d.abs() < 1e-9 { f64::INFINITY } else { (hi - lo) / (d.abs() * span) };
            let speed = speed.min(fit(lo_x, hi_x, dx)).min(fit(lo_y, hi_y, dy));
            vx = speed * dx;
            vy = speed * dy;
            let place = |lo: f64, hi: f64, travel: f64, r: &mut Rng| {
                let from = lo - travel.min(0.0);
                let to = hi - travel.max(0.0);
                if to > from {
                    r.uniform_range(from, to)
                } else {
                    from
                }
            };
            start = (place(lo_x, hi_x, vx * span, rng), place(lo_y, hi_y, vy * span, rng));
        }
        let osc_amp = rng.uniform_range(2.5, 4.0) * scale;
        if action == Action::Oscillate {
            start.0 = start.0.clamp(lo_x + osc_amp, (hi_x - osc_amp).max(lo_x + osc_amp));
            start.1 = start.1.clamp(lo_y + osc_amp, (hi_y - osc_amp).max(lo_y + osc_amp));
        }
        let spin_sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        Sprite {
            species,
            action,
            radius,
            intensity,
            start,
            velocity: (vx, vy),
            osc_dir: (heading.cos(), heading.sin()),
            osc_amp,
            period: rng.uniform_range(6.0, 10.0),
            phase: rng.uniform_range(0.0, 2.0 * PI),
            angle0: rng.uniform_range(0.0, 2.0 * PI),
            spin: spin_sign * rng.uniform_range(0.25, 0.4),
        }
    }

    /// (centre x, centre y, radius, orientation) at frame `f`.
    fn pose(&self, f: usize) -> (f64, f64, f64, f64) {
        let t = f as f64;
        let wave = (2.0 * PI * t / self.period + self.phase).sin();
        let (mut cx, mut cy) = self.start;
        let mut r = self.radius;
        let mut angle = self.angle0;
        match self.action {
            Action::Translate => {
                cx += self.velocity.0 * t;
                cy += self.velocity.1 * t;
            }
            Action::Oscillate => {
                cx += self.osc_amp * wave * self.osc_dir.0;
                cy += self.osc_amp * wave * self.osc_dir.1;
            }
            Action::Pulse => r *= 1.0 + 0.35 * wave,
            Action::Rotate => angle += self.spin * t,
            Action::Still => {}
        }
        (cx, cy, r, angle)
    }
}

/// Render a scene to a `T x 32 x 32 x 1` clip with values in `[0, 1]`.
pub fn render_clip(id: &str, spec: &SceneSpec) -> Result<VideoClip, DatagenError> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let size = FRAME_SIZE as f64;
    let background = match spec.context {
        Context::Plain => Background::Plain(rng.uniform_range(0.1, 0.2)),
        Context::Textured => Background::Textured(
            (0..3)
                .map(|_| {
                    let a = rng.uniform_range(0.0, 2.0 * PI);
                    let k = rng.uniform_range(0.6, 1.4);
                    (k * a.cos(), k * a.sin(), rng.uniform_range(0.0, 2.0 * PI), rng.uniform_range(0.04, 0.08))
                })
                .collect(),
        ),
        Context::Gradient => {
            let a = rng.uniform_range(0.0, 2.0 * PI);
            Background::Gradient { dir: (a.cos(), a.sin()), lo: rng.uniform_range(0.0, 0.1), hi: rng.uniform_range(0.3, 0.45) }
        }
    };
    let mut sprites = Vec::new();
    match spec.partner {
        None => {
            let arena = Arena { x0: 0.0, x1: size, y0: 0.0, y1: size };
            sprites.push(Sprite::draw(&mut rng, spec.species, spec.action, spec.viewpoint, arena, spec.frames, 1.0));
        }
        Some(partner) => {
            let left = Arena { x0: 0.0, x1: size / 2.0, y0: 0.0, y1: size };
            let right = Arena { x0: size / 2.0, x1: size, y0: 0.0, y1: size };
            sprites.push(Sprite::draw(&mut rng, spec.species, spec.action, spec.viewpoint, left, spec.frames, 0.6));
            sprites.push(Sprite::draw(&mut rng, spec.species, partner, spec.viewpoint, right, spec.frames, 0.6));
        }
    }
    let jitter: Vec<(f64, f64)> = (0..spec.frames)
        .map(|_| match spec.viewpoint {
            Viewpoint::ThirdPerson => (0.0, 0.0),
            Viewpoint::Ego => (rng.uniform_range(-1.5, 1.5), rng.uniform_range(-1.5, 1.5)),
        })
        .collect();

    let triangle: Vec<(f64, f64)> = (0..3).map(|k| {
        let a = 2.0 * PI * k as f64 / 3.0;
        (a.cos(), a.sin())
    }).collect();
    let star = regular_star(5, 1.0, 0.45);
    let px = FRAME_SIZE * FRAME_SIZE;
    let mut data = vec![0.0; spec.frames * px];
    for f in 0..spec.frames {
        let (jx, jy) = jitter[f];
        let frame = &mut data[f * px..(f + 1) * px];
        for y in 0..FRAME_SIZE {
            for x in 0..FRAME_SIZE {
                frame[y * FRAME_SIZE + x] = background.sample(x as f64 + 0.5 + jx, y as f64 + 0.5 + jy);
            }
        }
        for s in &sprites {
            let (cx, cy, r, angle) = s.pose(f);
            let (cx, cy) = (cx - jx, cy - jy);
            let (ca, sa) = (angle.cos(), angle.sin());
            let x_lo = ((cx - r - 1.0).floor().max(0.0)) as usize;
            let x_hi = ((cx + r + 1.0).ceil().min(size)) as usize;
            let y_lo = ((cy - r - 1.0).floor().max(0.0)) as usize;
            let y_hi = ((cy + r + 1.0).ceil().min(size)) as usize;
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    let mut acc = 0.0;
                    let mut hits = 0usize;
                    for sy in 0..SUPERSAMPLE {
                        for sx in 0..SUPERSAMPLE {
                            let px_ = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                            let py_ = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                            let (dx, dy) = ((px_ - cx) / r, (py_ - cy) / r);
                            let u = ca * dx + sa * dy;
                            let v = -sa * dx + ca * dy;
                            if let Some(val) = shape_value(s.species, u, v, &triangle, &star) {
                                acc += val;
                                hits += 1;
                            }
                        }
                    }
                    if hits > 0 {
                        let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
                        let cov = hits as f64 / n;
                        let shade = s.intensity * acc / hits as f64;
                        let idx = y * FRAME_SIZE + x;
                        frame[idx] = frame[idx] * (1.0 - cov) + shade * cov;
                    }
                }
            }
        }
    }
    let frames = Tensor::new(vec![spec.frames, FRAME_SIZE, FRAME_SIZE, 1], data)
        .map_err(|e| DatagenError::InvalidSpec(e.to_string()))?
        .rounded();
    Ok(VideoClip {
        id: id.to_string(),
        frames,
        labels: spec.labels(),
        species: spec.species,
        viewpoint: spec.viewpoint,
        context: spec.context,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(action: Action) -> SceneSpec {
        SceneSpec::new(action, Species::Star, Viewpoint::ThirdPerson, Context::Plain, 16, 42)
    }

    #[test]
    fn still_frames_are_identical() {
        for species in Species::ALL {
            let mut s = spec(Action::Still);
            s.species = *species;
            let clip = render_clip("c", &s).unwrap();
            let first = clip.frame(0);
            for f in 1..clip.len() {
                assert_eq!(clip.frame(f), first);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_clip("a", &spec(Action::Rotate)).unwrap();
        let b = render_clip("a", &spec(Action::Rotate)).unwrap();
        assert_eq!(a.frames, b.frames);
    }

    #[test]
    fn values_in_unit_interval_and_shape() {
        for ctx in Context::ALL {
            let mut s = spec(Action::Pulse);
            s.context = *ctx;
            s.viewpoint = Viewpoint::Ego;
            let clip = render_clip("c", &s).unwrap();
            assert_eq!(clip.frames.shape(), &[16, 32, 32, 1]);
            assert!(clip.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn moving_actions_change_frames() {
        for a in [Action::Translate, Action::Oscillate, Action::Pulse, Action::Rotate] {
            let clip = render_clip("c", &spec(a)).unwrap();
            assert_ne!(clip.frame(0), clip.frame(5), "{a}");
        }
    }

    #[test]
    fn invalid_frame_count() {
        let mut s = spec(Action::Still);
        s.frames = 4;
        assert!(render_clip("c", &s).is_err());
    }
}
