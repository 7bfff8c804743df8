//! Procedural paired coarse/fine cloth-like sequences.
//!
//! Both resolutions sample one analytic space map `M_s` on the unit square
//! sheet; the fine sheet is additionally offset by a wrinkle height field
//! before the map is applied, so wrinkles follow the bent surface.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mesh::{grid, Mesh, MeshSequence, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    Bend,
    Twist,
    Wave,
    Spin,
}

impl Motion {
    pub const ALL: [Motion; 4] = [Motion::Bend, Motion::Twist, Motion::Wave, Motion::Spin];
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Motion::Bend => "bend",
            Motion::Twist => "twist",
            Motion::Wave => "wave",
            Motion::Spin => "spin",
        })
    }
}

impl FromStr for Motion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bend" => Ok(Motion::Bend),
            "twist" => Ok(Motion::Twist),
            "wave" => Ok(Motion::Wave),
            "spin" => Ok(Motion::Spin),
            other => Err(Error::Config(format!("unknown motion family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub coarse: (usize, usize),
    pub fine: (usize, usize),
    pub frame_count: usize,
    pub seed: u64,
    pub motion: Motion,
    /// Peak wrinkle height, in sheet units (the sheet is 1 × 1).
    pub wrinkle_amplitude: f64,
    /// Wrinkle crests per unit length.
    pub wrinkle_frequency: f64,
    /// Total rotation of the spin family over the sequence.
    pub spin_total: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            coarse: (9, 9),
            fine: (33, 33),
            frame_count: 60,
            seed: 0,
            motion: Motion::Bend,
            wrinkle_amplitude: 0.03,
            wrinkle_frequency: 3.0,
            spin_total: 4.0 * PI,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (cx, cy) = self.coarse;
        let (fx, fy) = self.fine;
        if cx < 2 || cy < 2 {
            return Err(Error::Config(format!("coarse grid {cx}x{cy} is too small")));
        }
        if fx * fy <= cx * cy || fx < cx || fy < cy {
            return Err(Error::Config(format!(
                "fine grid {fx}x{fy} must be finer than coarse grid {cx}x{cy}"
            )));
        }
        if self.frame_count < 4 {
            return Err(Error::Config(format!("frame_count {} < 4", self.frame_count)));
        }
        for (name, v) in [
            ("wrinkle_amplitude", self.wrinkle_amplitude),
            ("wrinkle_frequency", self.wrinkle_frequency),
            ("spin_total", self.spin_total),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be a non-negative number")));
            }
        }
        Ok(())
    }
}

/// Seeded parameters of one generated motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionParams {
    pub motion: Motion,
    /// In-plane direction of bending / wave travel / wrinkle crests.
    pub direction: f64,
    pub wrinkle_direction: f64,
    /// Peak bend or twist angle, or peak wave height.
    pub peak: f64,
    /// Number of rise-and-fall cycles over the sequence.
    pub cycles: f64,
    pub wave_number: f64,
    pub spin_total: f64,
}

impl MotionParams {
    pub fn sample(cfg: &SyntheticConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let direction = rng.gen_range(-0.3..0.3);
        let wrinkle_direction = direction + PI / 2.0 + rng.gen_range(-0.2..0.2);
        let (peak, wave_number) = match cfg.motion {
            Motion::Bend => (rng.gen_range(0.6 * PI..0.9 * PI), 0.0),
            Motion::Twist => (rng.gen_range(0.4 * PI..0.7 * PI), 0.0),
            Motion::Wave => (rng.gen_range(0.06..0.1), rng.gen_range(0.8..1.2)),
            Motion::Spin => (0.0, 0.0),
        };
        let cycles = if rng.gen_bool(0.5) { 1.0 } else { 1.5 };
        MotionParams {
            motion: cfg.motion,
            direction,
            wrinkle_direction,
            peak,
            cycles,
            wave_number,
            spin_total: cfg.spin_total,
        }
    }

    /// Motion intensity in `[0, 1]` at sequence phase `s ∈ [0, 1]`; zero at `s = 0`.
    pub fn intensity(&self, s: f64) -> f64 {
        match self.motion {
            Motion::Spin => (PI * s).sin().abs(),
            _ => 0.5 * (1.0 - (2.0 * PI * self.cycles * s).cos()),
        }
    }

    /// Position at phase `s` of the sheet point `(x, y)` lifted by `h` along the rest normal.
    pub fn map(&self, s: f64, x: f64, y: f64, h: f64) -> Vec3 {
        let (c, sn) = (self.direction.cos(), self.direction.sin());
        // Local frame: u across the bend axis, v along it, centred on the sheet.
        let (dx, dy) = (x - 0.5, y - 0.5);
        let u = c * dx + sn * dy;
        let v = -sn * dx + c * dy;
        let to_world = |u: f64, v: f64, z: f64| Vec3::new(0.5 + c * u - sn * v, 0.5 + sn * u + c * v, z);
        let k = self.intensity(s);
        match self.motion {
            Motion::Bend => {
                let kappa = self.peak * k;
                let arc = u + 0.5;
                let (su, cu) = ((kappa * arc).sin(), (kappa * arc).cos());
                let (bu, bz) = if kappa.abs() < 1e-12 {
                    (arc, 0.0)
                } else {
                    (su / kappa, (1.0 - cu) / kappa)
                };
                to_world(bu - 0.5 - h * su, v, bz + h * cu)
            }
            Motion::Twist => {
                let phi = self.peak * k * (u + 0.5);
                let (sp, cp) = (phi.sin(), phi.cos());
                to_world(u, v * cp - h * sp, v * sp + h * cp)
            }
            Motion::Wave => {
                let arg = 2.0 * PI * self.wave_number * (u + 0.5) - 2.0 * PI * s;
                let lift = self.peak * k * (arg.sin() + (2.0 * PI * s).sin());
                to_world(u, v, lift + h)
            }
            Motion::Spin => {
                let theta = self.spin_total * s;
                let (st, ct) = (theta.sin(), theta.cos());
                Vec3::new(0.5 + ct * dx - st * dy, 0.5 + st * dx + ct * dy, h)
            }
        }
    }

    /// Wrinkle height at `(x, y)` and phase `s`; zero on the line through the origin corner.
    pub fn wrinkle(&self, cfg: &SyntheticConfig, s: f64, x: f64, y: f64) -> f64 {
        let (c, sn) = (self.wrinkle_direction.cos(), self.wrinkle_direction.sin());
        cfg.wrinkle_amplitude * self.intensity(s) * (2.0 * PI * cfg.wrinkle_frequency * (c * x + sn * y)).sin()
    }
}

/// The paired dataset plus the motion parameters that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub coarse: MeshSequence,
    pub fine: MeshSequence,
    pub params: MotionParams,
}

pub fn phase(t: usize, frame_count: usize) -> f64 {
    t as f64 / (frame_count - 1) as f64
}

/// Generates the paired sequences. Frame 0 of both is the flat rest grid.
pub fn gen_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let params = MotionParams::sample(cfg);
    let coarse_ref = grid(cfg.coarse.0, cfg.coarse.1, 1.0, 1.0)?;
    let fine_ref = grid(cfg.fine.0, cfg.fine.1, 1.0, 1.0)?;
    let sample = |mesh: &Mesh, wrinkled: bool| -> Vec<Vec<Vec3>> {
        (0..cfg.frame_count)
            .map(|t| {
                let s = phase(t, cfg.frame_count);
                mesh.vertices()
                    .iter()
                    .map(|p| {
                        let h = if wrinkled { params.wrinkle(cfg, s, p.x, p.y) } else { 0.0 };
                        params.map(s, p.x, p.y, h)
                    })
                    .collect()
            })
            .collect()
    };
    let coarse_frames = sample(&coarse_ref, false);
    let fine_frames = sample(&fine_ref, true);
    Ok(Dataset {
        coarse: MeshSequence::new(coarse_ref, coarse_frames)?,
        fine: MeshSequence::new(fine_ref, fine_frames)?,
        params,
    })
}
