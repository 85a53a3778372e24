//! Synthetic IVUS/OCT pullback pairs with analytic ground truth.
//!
//! The anatomy is described along an anatomical axis `z` (mm), which is also
//! the IVUS pullback axis. An OCT frame at pullback position `q` images the
//! anatomy at `z = g(q)`, where `g` is the piecewise-linear inverse of the
//! configured warp, and is displaced counterclockwise by the rotation field
//! `theta(z)`.
//!
//! Noise comes from ChaCha8 (`rand_chacha`) seeded with `seed` via
//! `seed_from_u64`; IVUS frames draw from stream 1 and OCT frames from stream 2,
//! frame by frame in order. Gaussian noise uses `rand_distr::Normal`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pullback::{Modality, Pullback, RawFrame, SideBranch, BIN_DEG, N_BINS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SideBranchSpec {
    pub position_mm: f64,
    pub angle_deg: f64,
    pub extent_deg: f64,
    /// Peak area as a fraction of the maximum lumen area.
    pub area: f64,
    /// Longitudinal extent of the ostium.
    pub length_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalciumSpec {
    pub start_mm: f64,
    pub end_mm: f64,
    pub angle_start_deg: f64,
    pub arc_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub lumen_area_sd: f64,
    pub radius_sd: f64,
    pub side_branch_sd: f64,
    pub calcium_flip_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub vessel_length_mm: f64,
    pub ivus_ed_spacing_mm: f64,
    /// IVUS frames per cardiac cycle; every `n`-th frame is end-diastolic.
    pub ivus_frames_per_ed: usize,
    pub oct_spacing_mm: f64,
    /// `(z_mm, area_mm2)` control points.
    pub lumen_area_points: Vec<[f64; 2]>,
    /// Relative amplitude of the elliptical radius modulation.
    pub eccentricity: f64,
    /// `(z_mm, deg)` control points for the ellipse major axis.
    pub ellipse_axis_points: Vec<[f64; 2]>,
    pub side_branches: Vec<SideBranchSpec>,
    pub calcium_deposits: Vec<CalciumSpec>,
    /// `(z_mm, oct_mm)` control points: anatomy at `z` appears at OCT pullback
    /// position `oct_mm`. Empty means no warp.
    pub warp_points: Vec<[f64; 2]>,
    /// `(z_mm, deg)` control points of the OCT rotation field.
    pub rotation_points: Vec<[f64; 2]>,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let length = 50.0;
        SynthConfig {
            vessel_length_mm: length,
            ivus_ed_spacing_mm: 0.5,
            ivus_frames_per_ed: 1,
            oct_spacing_mm: 0.4,
            lumen_area_points: vec![[0.0, 9.0], [length, 5.0]],
            eccentricity: 0.1,
            ellipse_axis_points: vec![[0.0, 0.0]],
            side_branches: Vec::new(),
            calcium_deposits: Vec::new(),
            warp_points: Vec::new(),
            rotation_points: vec![[0.0, 0.0]],
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Fractional OCT frame per IVUS end-diastolic frame.
    pub true_mapping: Vec<f64>,
    /// OCT rotation in degrees `[0, 360)` per IVUS end-diastolic frame.
    pub true_rotation: Vec<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
}

fn strictly_increasing(points: &[[f64; 2]], both: bool) -> bool {
    points.windows(2).all(|w| w[1][0] > w[0][0] && (!both || w[1][1] > w[0][1]))
        && points.iter().all(|p| p[0].is_finite() && p[1].is_finite())
}

impl SynthConfig {
    /// Warp control points, with the identity over the vessel when none are configured.
    pub fn warp(&self) -> Vec<[f64; 2]> {
        if self.warp_points.is_empty() {
            vec![[0.0, 0.0], [self.vessel_length_mm, self.vessel_length_mm]]
        } else {
            self.warp_points.clone()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |msg: String| Err(SynthError::InvalidConfig(msg));
        let len = self.vessel_length_mm;
        if !(len > 0.0 && len.is_finite()) {
            return fail(format!("vessel_length_mm = {len}"));
        }
        if !(self.ivus_ed_spacing_mm > 0.0 && self.oct_spacing_mm > 0.0) {
            return fail("spacings must be > 0".into());
        }
        if self.ivus_frames_per_ed == 0 {
            return fail("ivus_frames_per_ed must be >= 1".into());
        }
        let warp = self.warp();
        if warp.len() < 2 || !strictly_increasing(&warp, true) {
            return fail("warp_points must hold >= 2 points strictly increasing in both coordinates".into());
        }
        let first = warp[0];
        let last = warp[warp.len() - 1];
        if first != [0.0, 0.0] || (last[0] - len).abs() > 1e-9 {
            return fail("warp_points must start at (0, 0) and end at z = vessel_length_mm".into());
        }
        if self.lumen_area_points.is_empty()
            || !strictly_increasing(&self.lumen_area_points, false)
            || self.lumen_area_points.iter().any(|p| !(p[1] > 0.0))
        {
            return fail("lumen_area_points must be non-empty, increasing in z, with positive areas".into());
        }
        for (name, pts) in [
            ("ellipse_axis_points", &self.ellipse_axis_points),
            ("rotation_points", &self.rotation_points),
        ] {
            if pts.is_empty() || !strictly_increasing(pts, false) {
                return fail(format!("{name} must be non-empty and increasing in z"));
            }
        }
        if !(0.0..1.0).contains(&self.eccentricity) {
            return fail("eccentricity must lie in [0, 1)".into());
        }
        for sb in &self.side_branches {
            if !(0.0..=1.0).contains(&sb.area) || !(sb.extent_deg > 0.0 && sb.extent_deg < 360.0) || !(sb.length_mm > 0.0) {
                return fail(format!("bad side branch at {} mm", sb.position_mm));
            }
        }
        for ca in &self.calcium_deposits {
            if !(ca.end_mm >= ca.start_mm) || !(ca.arc_deg > 0.0 && ca.arc_deg <= 360.0) {
                return fail(format!("bad calcium deposit at {} mm", ca.start_mm));
            }
        }
        let n = &self.noise;
        if [n.lumen_area_sd, n.radius_sd, n.side_branch_sd].iter().any(|v| !(*v >= 0.0))
            || !(0.0..=1.0).contains(&n.calcium_flip_prob)
        {
            return fail("noise levels must be >= 0 and calcium_flip_prob in [0, 1]".into());
        }
        Ok(())
    }

    /// A randomized vessel: ~`length_mm` long, 3 to 6 side branches, 1 to 3
    /// calcium deposits, a smooth warp within +/-2 mm, a rotation field
    /// varying by at most 40 degrees around a random offset, moderate noise.
    /// `length_mm` should be at least 20; shorter vessels may get fewer branches.
    pub fn random_vessel(seed: u64, length_mm: f64) -> SynthConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = length_mm;
        let step = 2.5;
        let knots: Vec<f64> = (0..=(l / step).round() as usize).map(|k| (k as f64 * step).min(l)).collect();

        let lumen_area_points = knots
            .iter()
            .step_by(2)
            .map(|&z| [z, 9.0 - 4.0 * z / l + rng.random_range(-1.5..1.5)])
            .collect();
        let axis0 = rng.random_range(0.0..180.0);
        let axis1 = axis0 + rng.random_range(-60.0..60.0);

        let n_sb = rng.random_range(3..=6);
        let mut positions: Vec<f64> = Vec::new();
        // short vessels may not fit every branch 5 mm apart; give up after a bounded number of draws
        for _ in 0..10_000 {
            if positions.len() == n_sb {
                break;
            }
            let p = rng.random_range(4.0..l - 4.0);
            if positions.iter().all(|q: &f64| (p - q).abs() >= 5.0) {
                positions.push(p);
            }
        }
        positions.sort_by(f64::total_cmp);
        let side_branches = positions
            .into_iter()
            .map(|position_mm| SideBranchSpec {
                position_mm,
                angle_deg: rng.random_range(0.0..360.0),
                extent_deg: rng.random_range(30.0..70.0),
                area: rng.random_range(0.15..0.5),
                length_mm: rng.random_range(1.0..2.5),
            })
            .collect();
        let n_ca = rng.random_range(1..=3);
        let calcium_deposits = (0..n_ca)
            .map(|_| {
                let start = rng.random_range(3.0..l - 10.0);
                CalciumSpec {
                    start_mm: start,
                    end_mm: start + rng.random_range(2.0..8.0),
                    angle_start_deg: rng.random_range(0.0..360.0),
                    arc_deg: rng.random_range(40.0..160.0),
                }
            })
            .collect();

        let warp_amp = rng.random_range(-2.0..2.0);
        let warp_cycles = rng.random_range(1..=2) as f64;
        let warp_points = knots
            .iter()
            .map(|&z| [z, z + warp_amp * (PI * warp_cycles * z / l).sin()])
            .collect();
        let rot_base = rng.random_range(0.0..360.0);
        let rot_amp = rng.random_range(10.0..20.0);
        let rot_phase = rng.random_range(0.0..2.0 * PI);
        let rotation_points = knots
            .iter()
            .map(|&z| [z, rot_base + rot_amp * (PI * z / l + rot_phase).sin()])
            .collect();

        SynthConfig {
            vessel_length_mm: l,
            lumen_area_points,
            eccentricity: rng.random_range(0.05..0.2),
            ellipse_axis_points: vec![[0.0, axis0], [l, axis1]],
            side_branches,
            calcium_deposits,
            warp_points,
            rotation_points,
            noise: NoiseSpec {
                lumen_area_sd: 0.15,
                radius_sd: 0.02,
                side_branch_sd: 0.02,
                calcium_flip_prob: 0.005,
            },
            seed,
            ..SynthConfig::default()
        }
    }
}

/// Piecewise-linear interpolation through `(x, y)` points, constant outside.
fn interp(points: &[[f64; 2]], x: f64) -> f64 {
    let first = points[0];
    let last = points[points.len() - 1];
    if x <= first[0] {
        return first[1];
    }
    if x >= last[0] {
        return last[1];
    }
    let hi = points.partition_point(|p| p[0] <= x);
    let (a, b) = (points[hi - 1], points[hi]);
    a[1] + (b[1] - a[1]) * (x - a[0]) / (b[0] - a[0])
}

fn swapped(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    points.iter().map(|p| [p[1], p[0]]).collect()
}

fn in_arc(angle: f64, start: f64, arc: f64) -> bool {
    (angle - start).rem_euclid(360.0) <= arc
}

fn frame_count(length: f64, spacing: f64) -> usize {
    (length / spacing + 1e-9).floor() as usize + 1
}

struct Renderer<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
}

impl Renderer<'_> {
    fn gauss(&mut self, sd: f64) -> f64 {
        if sd > 0.0 {
            Normal::new(0.0, sd).expect("sd checked").sample(&mut self.rng)
        } else {
            0.0
        }
    }

    /// Frame imaging the anatomy at `z`, displaced counterclockwise by `theta` degrees.
    fn frame(&mut self, frame_index: usize, position_mm: f64, is_ed: bool, z: f64, theta: f64) -> RawFrame {
        let cfg = self.cfg;
        let noise = &cfg.noise;

        let area = (interp(&cfg.lumen_area_points, z) + self.gauss(noise.lumen_area_sd)).max(0.05);
        let r0 = (area / PI).sqrt();
        let axis = interp(&cfg.ellipse_axis_points, z);
        let mut lumen_radius_profile = Vec::with_capacity(N_BINS);
        for b in 0..N_BINS {
            let anat = (b as f64 * BIN_DEG - theta - axis).to_radians();
            let r = r0 * (1.0 + cfg.eccentricity * (2.0 * anat).cos()) + self.gauss(noise.radius_sd);
            lumen_radius_profile.push(r.max(0.05));
        }

        let branch = cfg
            .side_branches
            .iter()
            .filter_map(|sb| {
                let half = sb.length_mm / 2.0;
                let u = (z - sb.position_mm).abs() / half;
                (u <= 1.0).then(|| (sb, sb.area * (1.0 - 0.5 * u * u)))
            })
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let side_branch = match branch {
            Some((sb, a)) => {
                let a = (a + self.gauss(noise.side_branch_sd)).clamp(0.0, 1.0);
                let centre = sb.angle_deg + theta;
                let to_bin = |deg: f64| ((deg / BIN_DEG).round() as i64).rem_euclid(N_BINS as i64) as usize;
                (a > 0.0).then(|| SideBranch {
                    bin_start: to_bin(centre - sb.extent_deg / 2.0),
                    bin_end: to_bin(centre + sb.extent_deg / 2.0),
                    area: a,
                })
            }
            None => None,
        };

        let deposits: Vec<&CalciumSpec> = cfg
            .calcium_deposits
            .iter()
            .filter(|c| (c.start_mm..=c.end_mm).contains(&z))
            .collect();
        let mut calcium_arc = Vec::with_capacity(N_BINS);
        for b in 0..N_BINS {
            let anat = b as f64 * BIN_DEG - theta;
            let mut hit = deposits.iter().any(|c| in_arc(anat, c.angle_start_deg, c.arc_deg));
            if noise.calcium_flip_prob > 0.0 && self.rng.random_bool(noise.calcium_flip_prob) {
                hit = !hit;
            }
            calcium_arc.push(hit);
        }

        RawFrame {
            frame_index,
            position_mm,
            is_ed,
            lumen_area_mm2: area,
            lumen_radius_profile,
            side_branch,
            calcium_arc,
        }
    }
}

fn rotation_at(cfg: &SynthConfig, z: f64) -> f64 {
    interp(&cfg.rotation_points, z)
}

fn reduce_deg(deg: f64) -> f64 {
    let v = deg.rem_euclid(360.0);
    if v >= 360.0 {
        0.0
    } else {
        v
    }
}

/// Renders the IVUS pullback, the warped and rotated OCT pullback, and the
/// ground truth at every IVUS end-diastolic frame.
pub fn generate_pair(cfg: &SynthConfig) -> Result<(Pullback, Pullback, GroundTruth), SynthError> {
    cfg.validate()?;
    let len = cfg.vessel_length_mm;

    let ivus_step = cfg.ivus_ed_spacing_mm / cfg.ivus_frames_per_ed as f64;
    let mut ivus_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ivus_rng.set_stream(1);
    let mut render = Renderer { cfg, rng: ivus_rng };
    let ivus_frames: Vec<RawFrame> = (0..frame_count(len, ivus_step))
        .map(|k| {
            let z = k as f64 * ivus_step;
            render.frame(k, z, k % cfg.ivus_frames_per_ed == 0, z, 0.0)
        })
        .collect();

    let warp = cfg.warp();
    let oct_to_z = swapped(&warp);
    let oct_len = warp[warp.len() - 1][1];
    let mut oct_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    oct_rng.set_stream(2);
    let mut render = Renderer { cfg, rng: oct_rng };
    let oct_frames: Vec<RawFrame> = (0..frame_count(oct_len, cfg.oct_spacing_mm))
        .map(|k| {
            let q = k as f64 * cfg.oct_spacing_mm;
            let z = interp(&oct_to_z, q);
            render.frame(k, q, false, z, rotation_at(cfg, z))
        })
        .collect();

    let (true_mapping, true_rotation) = ivus_frames
        .iter()
        .filter(|f| f.is_ed)
        .map(|f| {
            let z = f.position_mm;
            (
                interp(&warp, z) / cfg.oct_spacing_mm,
                reduce_deg(rotation_at(cfg, z)),
            )
        })
        .unzip();

    Ok((
        Pullback::new(Modality::Ivus, ivus_frames),
        Pullback::new(Modality::Oct, oct_frames),
        GroundTruth {
            true_mapping,
            true_rotation,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pullback::validate;

    fn landmarks() -> SynthConfig {
        SynthConfig {
            side_branches: vec![SideBranchSpec {
                position_mm: 20.0,
                angle_deg: 90.0,
                extent_deg: 40.0,
                area: 0.3,
                length_mm: 2.0,
            }],
            calcium_deposits: vec![CalciumSpec {
                start_mm: 30.0,
                end_mm: 34.0,
                angle_start_deg: 350.0,
                arc_deg: 60.0,
            }],
            ..SynthConfig::default()
        }
    }

    #[test]
    fn identity_pair_has_proportional_mapping() {
        let (ivus, oct, gt) = generate_pair(&landmarks()).unwrap();
        assert!(validate(&ivus).is_empty());
        assert!(validate(&oct).is_empty());
        assert_eq!(ivus.len(), 101);
        assert_eq!(oct.len(), 126);
        assert_eq!(gt.true_mapping.len(), 101);
        for (k, m) in gt.true_mapping.iter().enumerate() {
            assert!((m - k as f64 * 0.5 / 0.4).abs() < 1e-9);
        }
        assert!(gt.true_rotation.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn constant_rotation_field() {
        let cfg = SynthConfig {
            rotation_points: vec![[0.0, 10.0]],
            ..landmarks()
        };
        let (_, oct, gt) = generate_pair(&cfg).unwrap();
        assert!(gt.true_rotation.iter().all(|&r| r == 10.0));
        // branch centred at 90 deg shows up centred at 100 deg = bin 50
        let f = oct.frames.iter().find(|f| f.side_branch.is_some()).unwrap();
        let sb = f.side_branch.unwrap();
        assert_eq!((sb.bin_start + sb.bin_end) / 2, 50);
    }

    #[test]
    fn calcium_arc_wraps() {
        let (ivus, _, _) = generate_pair(&landmarks()).unwrap();
        let f = &ivus.frames[64];
        let lit: Vec<usize> = (0..N_BINS).filter(|&b| f.calcium_arc[b]).collect();
        assert!(lit.contains(&0) && lit.contains(&175) && lit.contains(&25));
        assert!(!lit.contains(&90));
    }

    #[test]
    fn same_seed_same_output() {
        let cfg = SynthConfig::random_vessel(11, 50.0);
        assert_eq!(generate_pair(&cfg).unwrap(), generate_pair(&cfg).unwrap());
        let other = SynthConfig { seed: 12, ..cfg.clone() };
        assert_ne!(generate_pair(&cfg).unwrap().0, generate_pair(&other).unwrap().0);
    }

    #[test]
    fn random_vessels_are_valid() {
        for seed in 0..20 {
            let cfg = SynthConfig::random_vessel(seed, 50.0);
            cfg.validate().unwrap();
            assert!((3..=6).contains(&cfg.side_branches.len()));
            assert!((1..=3).contains(&cfg.calcium_deposits.len()));
            let (ivus, oct, gt) = generate_pair(&cfg).unwrap();
            assert!(validate(&ivus).is_empty());
            assert!(validate(&oct).is_empty());
            assert!(gt.true_mapping.windows(2).all(|w| w[0] <= w[1]));
            for w in &cfg.warp_points {
                assert!((w[1] - w[0]).abs() <= 2.0 + 1e-9);
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let bad_warp = SynthConfig {
            warp_points: vec![[0.0, 0.0], [30.0, 20.0], [20.0, 30.0], [50.0, 50.0]],
            ..SynthConfig::default()
        };
        assert!(matches!(generate_pair(&bad_warp), Err(SynthError::InvalidConfig(_))));
        let bad_spacing = SynthConfig {
            oct_spacing_mm: 0.0,
            ..SynthConfig::default()
        };
        assert!(generate_pair(&bad_spacing).is_err());
    }

    #[test]
    fn ed_flags_follow_cycle_length() {
        let cfg = SynthConfig {
            ivus_frames_per_ed: 3,
            ..landmarks()
        };
        let (ivus, _, gt) = generate_pair(&cfg).unwrap();
        assert_eq!(ivus.len(), 301);
        assert_eq!(ivus.ed_count(), 101);
        assert_eq!(gt.true_mapping.len(), 101);
    }
}
