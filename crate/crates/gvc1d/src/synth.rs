//! Deterministic synthetic test videos (planar 8-bit RGB): translating
//! squares, bouncing circles, and periodic texture.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GvcError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motif {
    TranslatingSquares,
    BouncingCircles,
    PeriodicTexture,
}

impl FromStr for Motif {
    type Err = GvcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squares" => Ok(Motif::TranslatingSquares),
            "circles" => Ok(Motif::BouncingCircles),
            "texture" => Ok(Motif::PeriodicTexture),
            other => Err(GvcError::Usage(format!(
                "unknown motif '{other}' (squares | circles | texture)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SyntheticVideoSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub motif: Motif,
    /// Pixels per frame of motion.
    pub velocity: f64,
    pub seed: u64,
}

impl SyntheticVideoSpec {
    pub fn new(width: usize, height: usize, frames: usize, motif: Motif, seed: u64) -> Self {
        SyntheticVideoSpec {
            width,
            height,
            frames,
            motif,
            velocity: 2.0,
            seed,
        }
    }
}

/// Generate all frames; identical output for identical specs.
pub fn generate(spec: &SyntheticVideoSpec) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.motif {
        Motif::TranslatingSquares => squares(spec, &mut rng),
        Motif::BouncingCircles => circles(spec, &mut rng),
        Motif::PeriodicTexture => texture(spec, &mut rng),
    }
}

fn blank(spec: &SyntheticVideoSpec, color: [u8; 3]) -> Vec<u8> {
    let hw = spec.width * spec.height;
    let mut f = Vec::with_capacity(3 * hw);
    for c in color {
        f.extend(std::iter::repeat(c).take(hw));
    }
    f
}

fn put(frame: &mut [u8], spec: &SyntheticVideoSpec, x: i64, y: i64, color: [u8; 3]) {
    if x < 0 || y < 0 || x >= spec.width as i64 || y >= spec.height as i64 {
        return;
    }
    let hw = spec.width * spec.height;
    let p = y as usize * spec.width + x as usize;
    for (c, &v) in color.iter().enumerate() {
        frame[c * hw + p] = v;
    }
}

fn squares(spec: &SyntheticVideoSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    let n_sq = 3usize;
    let mut sq: Vec<(f64, f64, f64, f64, i64, [u8; 3])> = (0..n_sq)
        .map(|_| {
            let size = rng.gen_range(8..=14) as i64;
            (
                rng.gen_range(0.0..spec.width as f64),
                rng.gen_range(0.0..spec.height as f64),
                spec.velocity * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                spec.velocity * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                size,
                [rng.gen_range(80..=255), rng.gen_range(80..=255), rng.gen_range(80..=255)],
            )
        })
        .collect();
    let bg = [20u8, 24, 28];
    (0..spec.frames)
        .map(|_| {
            let mut f = blank(spec, bg);
            for (x, y, vx, vy, size, color) in sq.iter_mut() {
                for dy in 0..*size {
                    for dx in 0..*size {
                        // wrap around so squares translate forever
                        let px = (*x as i64 + dx).rem_euclid(spec.width as i64);
                        let py = (*y as i64 + dy).rem_euclid(spec.height as i64);
                        put(&mut f, spec, px, py, *color);
                    }
                }
                *x += *vx;
                *y += *vy;
            }
            f
        })
        .collect()
}

fn circles(spec: &SyntheticVideoSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    let n_c = 3usize;
    let mut cs: Vec<(f64, f64, f64, f64, f64, [u8; 3])> = (0..n_c)
        .map(|_| {
            let r = rng.gen_range(5.0..9.0);
            (
                rng.gen_range(r..spec.width as f64 - r),
                rng.gen_range(r..spec.height as f64 - r),
                spec.velocity * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                spec.velocity * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                r,
                [rng.gen_range(80..=255), rng.gen_range(80..=255), rng.gen_range(80..=255)],
            )
        })
        .collect();
    let bg = [16u8, 16, 40];
    (0..spec.frames)
        .map(|_| {
            let mut f = blank(spec, bg);
            for (x, y, vx, vy, r, color) in cs.iter_mut() {
                let (xi, yi, ri) = (*x as i64, *y as i64, *r as i64 + 1);
                for dy in -ri..=ri {
                    for dx in -ri..=ri {
                        if (dx * dx + dy * dy) as f64 <= *r * *r {
                            put(&mut f, spec, xi + dx, yi + dy, *color);
                        }
                    }
                }
                *x += *vx;
                *y += *vy;
                if *x < *r || *x > spec.width as f64 - *r {
                    *vx = -*vx;
                    *x = x.clamp(*r, spec.width as f64 - *r);
                }
                if *y < *r || *y > spec.height as f64 - *r {
                    *vy = -*vy;
                    *y = y.clamp(*r, spec.height as f64 - *r);
                }
            }
            f
        })
        .collect()
}

/// Texture that repeats with a period of several frames, exercising the
/// long-term memory (period > 1 frame).
fn texture(spec: &SyntheticVideoSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    let period = 4usize;
    let phases: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.05..0.25),
                rng.gen_range(0.05..0.25),
                rng.gen_range(0.0..6.28),
            )
        })
        .collect();
    (0..spec.frames)
        .map(|t| {
            let shift = (t % period) as f64 * (spec.width as f64 / period as f64);
            let hw = spec.width * spec.height;
            let mut f = vec![0u8; 3 * hw];
            for (c, &(fx, fy, p0)) in phases.iter().enumerate() {
                for y in 0..spec.height {
                    for x in 0..spec.width {
                        let v = crate::detmath::sin(
                            fx * (x as f64 + shift) + fy * y as f64 + p0,
                        );
                        f[c * hw + y * spec.width + x] = ((v + 1.0) * 127.5) as u8;
                    }
                }
            }
            f
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(motif: Motif) -> SyntheticVideoSpec {
        SyntheticVideoSpec::new(64, 64, 6, motif, 7)
    }

    #[test]
    fn deterministic_and_right_sized() {
        for motif in [
            Motif::TranslatingSquares,
            Motif::BouncingCircles,
            Motif::PeriodicTexture,
        ] {
            let a = generate(&spec(motif));
            let b = generate(&spec(motif));
            assert_eq!(a, b, "{motif:?}");
            assert_eq!(a.len(), 6);
            assert!(a.iter().all(|f| f.len() == 3 * 64 * 64));
            // frames actually move
            assert_ne!(a[0], a[1], "{motif:?} should have motion");
        }
    }

    #[test]
    fn texture_is_periodic() {
        let s = spec(Motif::PeriodicTexture);
        let v = generate(&s);
        assert_eq!(v[0], v[4]);
        assert_eq!(v[1], v[5]);
        assert_ne!(v[0], v[2]);
    }

    #[test]
    fn motif_parsing() {
        assert_eq!("squares".parse::<Motif>().unwrap(), Motif::TranslatingSquares);
        assert!("blob".parse::<Motif>().is_err());
    }
}
