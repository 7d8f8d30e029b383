//! Deterministic synthetic scenes with genuine depth variation.
//!
//! Orbiting sphere: a Lambertian-shaded disc of radius `h/6` whose center at
//! time `t` seconds is
//!
//! ```text
//! cx = w/2 + (w/4) cos(2 pi t / 4)
//! cy = h/2 + (h/8) sin(2 pi t / 4)
//! ```
//!
//! Its center disparity oscillates as `min + span * (0.6 + 0.25 sin(2 pi t / 2))`
//! and bulges toward the viewer by up to `0.1 * span` in the middle. The
//! background sits at `min + 0.25 * span` with a vertical color gradient.
//!
//! Gradient sweep: color and disparity ramps across x that scroll by one
//! pixel per frame.
//!
//! The seed picks the sphere hue and the background tint.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::{ContainerError, ContainerWriter};
use crate::frame::{quantize_disparity, ColorImage, DisparityRange, FrameRate, RgbzFrame, StreamHeader};

pub const ORBIT_PERIOD_S: f64 = 4.0;
pub const DEPTH_PERIOD_S: f64 = 2.0;
pub const BACKGROUND_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    OrbitingSphere,
    GradientSweep,
}

impl FromStr for Pattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "orbiting-sphere" => Ok(Self::OrbitingSphere),
            "gradient-sweep" => Ok(Self::GradientSweep),
            other => Err(format!("unknown pattern `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    pub fps: FrameRate,
    pub frames: u32,
    pub pattern: Pattern,
    pub seed: u64,
    pub range: DisparityRange,
}

impl SynthParams {
    pub fn new(width: usize, height: usize, fps: FrameRate, frames: u32, pattern: Pattern) -> Self {
        Self {
            width,
            height,
            fps,
            frames,
            pattern,
            seed: 0,
            range: DisparityRange::default(),
        }
    }

    pub fn header(&self) -> Result<StreamHeader, crate::frame::FrameError> {
        StreamHeader::new(self.width, self.height, self.fps, self.range)
    }
}

/// Sphere center in pixels at `t_s` seconds.
pub fn orbit_center(width: usize, height: usize, t_s: f64) -> (f64, f64) {
    let (w, h) = (width as f64, height as f64);
    let phase = std::f64::consts::TAU * t_s / ORBIT_PERIOD_S;
    (w / 2.0 + w / 4.0 * phase.cos(), h / 2.0 + h / 8.0 * phase.sin())
}

pub fn sphere_radius(height: usize) -> f64 {
    height as f64 / 6.0
}

/// Renders frames one at a time.
pub struct SynthSource {
    params: SynthParams,
    next: u32,
    hue: [f64; 3],
    tint: [f64; 3],
}

impl SynthSource {
    pub fn new(params: SynthParams) -> Result<Self, crate::frame::FrameError> {
        params.header()?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let hue = [
            rng.gen_range(0.4..1.0),
            rng.gen_range(0.4..1.0),
            rng.gen_range(0.4..1.0),
        ];
        let tint = [
            rng.gen_range(0.2..0.6),
            rng.gen_range(0.2..0.6),
            rng.gen_range(0.2..0.6),
        ];
        Ok(Self {
            params,
            next: 0,
            hue,
            tint,
        })
    }

    pub fn header(&self) -> StreamHeader {
        self.params.header().expect("validated in new")
    }

    pub fn render(&self, index: u32) -> RgbzFrame {
        let p = &self.params;
        let ts = p.fps.frame_time_us(u64::from(index));
        let t = ts as f64 / 1e6;
        let (w, h) = (p.width, p.height);
        let mut rgb = vec![[0u8; 3]; w * h];
        let mut disparity = vec![0.0f64; w * h];
        match p.pattern {
            Pattern::OrbitingSphere => self.sphere(t, &mut rgb, &mut disparity),
            Pattern::GradientSweep => self.sweep(index, &mut rgb, &mut disparity),
        }
        let depth = quantize_disparity(w, h, &disparity, &p.range).expect("buffer sized to frame");
        let color = ColorImage::from_rgb(w, h, &rgb).expect("buffer sized to frame");
        RgbzFrame::new(color, depth, ts, u64::from(index)).expect("same dimensions")
    }

    fn sphere(&self, t: f64, rgb: &mut [[u8; 3]], disparity: &mut [f64]) {
        let p = &self.params;
        let (w, h) = (p.width, p.height);
        let (cx, cy) = orbit_center(w, h, t);
        let r = sphere_radius(h);
        let span = p.range.span();
        let center_d = p.range.min() + span * (0.6 + 0.25 * (std::f64::consts::TAU * t / DEPTH_PERIOD_S).sin());
        let background_d = p.range.min() + BACKGROUND_FRACTION * span;
        let light = {
            let l = [-0.4f64, -0.5, 0.77];
            let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
            [l[0] / n, l[1] / n, l[2] / n]
        };
        for y in 0..h {
            let shade = 0.3 + 0.7 * (y as f64 / h as f64);
            let bg = self.tint.map(|c| (255.0 * c * shade) as u8);
            for x in 0..w {
                let i = y * w + x;
                let nx = (x as f64 + 0.5 - cx) / r;
                let ny = (y as f64 + 0.5 - cy) / r;
                let rr = nx * nx + ny * ny;
                if rr < 1.0 {
                    let nz = (1.0 - rr).sqrt();
                    let lambert = (nx * light[0] + ny * light[1] + nz * light[2]).max(0.0);
                    let k = 0.15 + 0.85 * lambert;
                    rgb[i] = self.hue.map(|c| (255.0 * c * k).round() as u8);
                    disparity[i] = center_d + 0.1 * span * nz;
                } else {
                    rgb[i] = bg;
                    disparity[i] = background_d;
                }
            }
        }
    }

    fn sweep(&self, index: u32, rgb: &mut [[u8; 3]], disparity: &mut [f64]) {
        let p = &self.params;
        let (w, h) = (p.width, p.height);
        for y in 0..h {
            for x in 0..w {
                let u = ((x + index as usize) % w) as f64 / w as f64;
                let i = y * w + x;
                rgb[i] = [
                    (255.0 * u * self.tint[0] / 0.6) as u8,
                    (255.0 * (y as f64 / h as f64) * self.hue[1]) as u8,
                    (255.0 * (1.0 - u) * self.hue[2]) as u8,
                ];
                disparity[i] = p.range.min() + p.range.span() * u;
            }
        }
    }
}

impl Iterator for SynthSource {
    type Item = RgbzFrame;

    fn next(&mut self) -> Option<RgbzFrame> {
        if self.next >= self.params.frames {
            return None;
        }
        let f = self.render(self.next);
        self.next += 1;
        Some(f)
    }
}

/// Writes a synthetic `.rgbz` file.
pub fn gen_synthetic(params: SynthParams, out: impl AsRef<Path>) -> Result<(), ContainerError> {
    let source = SynthSource::new(params)?;
    let mut w = ContainerWriter::create(out, &source.header(), params.frames)?;
    for f in source {
        w.write_frame(&f)?;
    }
    w.finish()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::{container_len, read_container};
    use crate::frame::quantize_value;

    fn vga(frames: u32, pattern: Pattern) -> SynthParams {
        SynthParams::new(640, 480, FrameRate::integer(30).unwrap(), frames, pattern)
    }

    fn sphere_centroid(f: &RgbzFrame, background: u8) -> (f64, f64) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..f.height() {
            for x in 0..f.width() {
                if f.depth().code(x, y) > background {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        (sx / n, sy / n)
    }

    #[test]
    fn orbit_formula_points() {
        assert_eq!(orbit_center(640, 480, 0.0), (480.0, 240.0));
        let (x, y) = orbit_center(640, 480, 1.0);
        assert!((x - 320.0).abs() < 1e-9 && (y - 300.0).abs() < 1e-9);
    }

    #[test]
    fn sphere_centroid_follows_orbit() {
        let src = SynthSource::new(vga(31, Pattern::OrbitingSphere)).unwrap();
        let bg = quantize_value(BACKGROUND_FRACTION, &DisparityRange::new(0.0, 1.0).unwrap());
        for (index, t) in [(0, 0.0), (30, 1.0)] {
            let f = src.render(index);
            let (cx, cy) = sphere_centroid(&f, bg);
            let (ex, ey) = orbit_center(640, 480, t);
            assert!(
                (cx - ex).abs() < 0.5 && (cy - ey).abs() < 0.5,
                "frame {index}: ({cx},{cy}) vs ({ex},{ey})"
            );
        }
        assert_ne!(
            sphere_centroid(&src.render(0), bg),
            sphere_centroid(&src.render(30), bg)
        );
    }

    #[test]
    fn sphere_has_depth_variation() {
        let src = SynthSource::new(vga(16, Pattern::OrbitingSphere)).unwrap();
        let f0 = src.render(0);
        let max_code = |f: &RgbzFrame| *f.depth().codes().iter().max().unwrap();
        let min_code = |f: &RgbzFrame| *f.depth().codes().iter().min().unwrap();
        assert!(max_code(&f0) > min_code(&f0) + 50);
        // Quarter of the depth period later the sphere is nearer.
        assert!(max_code(&src.render(15)) > max_code(&f0));
    }

    #[test]
    fn file_size_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.rgbz"), dir.path().join("b.rgbz"));
        let mut p = vga(60, Pattern::OrbitingSphere);
        p.seed = 42;
        gen_synthetic(p, &a).unwrap();
        gen_synthetic(p, &b).unwrap();
        let (ba, bb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(ba.len() as u64, 33 + 60 * (8 + 640 * 480 * 4 + 640 * 480));
        assert_eq!(ba.len() as u64, container_len(640, 480, 60));
        assert!(ba == bb);
        p.seed = 43;
        gen_synthetic(p, &b).unwrap();
        assert!(ba != std::fs::read(&b).unwrap());
    }

    #[test]
    fn gradient_sweep_scrolls() {
        let p = SynthParams::new(8, 2, FrameRate::integer(30).unwrap(), 2, Pattern::GradientSweep);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.rgbz");
        gen_synthetic(p, &path).unwrap();
        let (_, fs) = read_container(&path).unwrap();
        assert_eq!(fs[1].depth().code(0, 0), fs[0].depth().code(1, 0));
        assert_eq!(fs[1].timestamp_us, 33_333);
    }

    #[test]
    fn odd_dimensions_rejected() {
        let p = SynthParams::new(3, 2, FrameRate::integer(30).unwrap(), 1, Pattern::GradientSweep);
        assert!(SynthSource::new(p).is_err());
    }

    #[test]
    fn unwritable_path_errors() {
        let p = SynthParams::new(2, 2, FrameRate::integer(30).unwrap(), 1, Pattern::GradientSweep);
        assert!(gen_synthetic(p, "/nonexistent-dir/x.rgbz").is_err());
    }
}
