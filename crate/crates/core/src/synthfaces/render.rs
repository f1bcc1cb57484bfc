use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-identity appearance that stays fixed across poses and attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityTraits {
    pub tone: f64,
    pub texture_freq: f64,
    pub texture_angle: f64,
    pub texture_amp: f64,
    pub eye_gap: f64,
    pub head_height: f64,
}

impl IdentityTraits {
    /// Traits of identity `index`. Tone and texture orientation follow a
    /// low-discrepancy sequence over identities so that any two stay
    /// distinguishable.
    pub fn sample(seed: u64, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let golden = 0.618_033_988_749_895;
        let spread = |k: f64| (index as f64 * golden + k).fract();
        Self {
            tone: 0.45 + 0.35 * spread(0.0),
            texture_freq: 7.0 + 7.0 * spread(0.71) + rng.random_range(0.0..0.5),
            texture_angle: std::f64::consts::PI * spread(0.37),
            texture_amp: rng.random_range(0.16..0.2),
            eye_gap: rng.random_range(0.3..0.5),
            head_height: rng.random_range(0.62..0.78),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    /// Degrees in `[-90, 90]`.
    pub yaw: f64,
    /// Years in `[0, 100)`.
    pub age: f64,
    /// 0 or 1.
    pub gender: f64,
    /// `[-1, 1]`, frown to smile.
    pub emotion: f64,
    pub hat: bool,
    pub glasses: bool,
    pub beard: bool,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn blob(du: f64, dv: f64, sigma: f64) -> f64 {
    (-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp()
}

/// Renders a noise-free `h x w` plane with intensities in `[0, 1]`.
pub fn render(face: &Face, id: &IdentityTraits, h: usize, w: usize) -> Vec<f32> {
    let yaw = face.yaw.to_radians();
    let cx = 0.3 * yaw.sin();
    let a = (0.55 - 0.1 * face.gender) * (1.0 - 0.25 * yaw.sin().abs());
    let b = id.head_height;
    let fx = cx + 0.55 * a * yaw.sin();
    let half_gap = id.eye_gap * a * yaw.cos().max(0.15);
    let eye_v = -0.15 * b / 0.7;
    let mouth_v = 0.4 * b / 0.7;
    let mouth_w = 0.45 * a * yaw.cos().max(0.3);
    // The eye turned away from the viewer fades out at large yaw.
    let (left_vis, right_vis) = if yaw >= 0.0 {
        (1.0 - 0.8 * yaw.sin(), 1.0)
    } else {
        (1.0, 1.0 + 0.8 * yaw.sin())
    };

    let mut img = vec![0.0f64; h * w];
    for y in 0..h {
        let v = 2.0 * (y as f64 + 0.5) / h as f64 - 1.0;
        for x in 0..w {
            let u = 2.0 * (x as f64 + 0.5) / w as f64 - 1.0;
            let background = 0.12 + 0.08 * (u + 1.0) / 2.0;
            let r = (((u - cx) / a).powi(2) + (v / b).powi(2)).sqrt();
            let mask = sigmoid((1.0 - r) / 0.06);

            let t = u * id.texture_angle.cos() + v * id.texture_angle.sin();
            let mut skin = id.tone + id.texture_amp * (id.texture_freq * t).sin();

            let eyes = left_vis * blob(u - (fx - half_gap), v - eye_v, 0.07)
                + right_vis * blob(u - (fx + half_gap), v - eye_v, 0.07);
            skin -= 0.45 * eyes;

            let du = (u - fx) / mouth_w;
            if du.abs() < 1.2 {
                let curve = mouth_v - 0.18 * face.emotion * (1.0 - du * du);
                let ink = (-(v - curve).powi(2) / (2.0 * 0.035f64.powi(2))).exp();
                let taper = sigmoid((1.0 - du.abs()) / 0.1);
                skin -= 0.4 * ink * taper;
            }

            if face.glasses && (v - eye_v).abs() < 0.07 && (u - fx).abs() < half_gap + 0.14 {
                skin *= 0.3;
            }
            if face.beard && v > mouth_v - 0.15 {
                skin *= 0.55;
            }

            let mut px = background + mask * (skin - background);
            if face.hat && v < -0.55 * b && v > -1.05 * b && (u - cx).abs() < 1.15 * a {
                px = 0.95;
            }
            img[y * w + x] = px;
        }
    }

    // Ageing: lower contrast and a partial 3x3 blur.
    let k = (face.age / 100.0).clamp(0.0, 1.0);
    let mean = 0.4;
    let blurred: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            let mut s = 0.0;
            let mut n = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        s += img[yy as usize * w + xx as usize];
                        n += 1.0;
                    }
                }
            }
            s / n
        })
        .collect();
    img.iter()
        .zip(&blurred)
        .map(|(&p, &q)| {
            let p = (1.0 - k) * p + k * q;
            (mean + (1.0 - 0.35 * k) * (p - mean)).clamp(0.0, 1.0) as f32
        })
        .collect()
}
