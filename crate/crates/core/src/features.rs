//! Longitudinal feature sequences and per-frame circumferential profiles.

use thiserror::Error;

use crate::pullback::{Modality, Pullback, RawFrame, N_BINS};

/// Features per frame fed to the longitudinal alignment.
pub const N_LONG_FEATURES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LongFeatureVector {
    pub lumen_area_norm: f64,
    pub side_branch_area_norm: f64,
    pub calcium_degree: f64,
    pub norm_position: f64,
}

impl LongFeatureVector {
    pub fn to_array(self) -> [f64; N_LONG_FEATURES] {
        [
            self.lumen_area_norm,
            self.side_branch_area_norm,
            self.calcium_degree,
            self.norm_position,
        ]
    }

    pub fn from_array(v: [f64; N_LONG_FEATURES]) -> Self {
        LongFeatureVector {
            lumen_area_norm: v[0],
            side_branch_area_norm: v[1],
            calcium_degree: v[2],
            norm_position: v[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongFeatureSequence {
    pub modality: Modality,
    pub vectors: Vec<LongFeatureVector>,
    /// Position of each vector's source frame within the pullback.
    pub source_frame_indices: Vec<usize>,
}

impl LongFeatureSequence {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn channel(&self, k: usize) -> Vec<f64> {
        self.vectors.iter().map(|v| v.to_array()[k]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircProfile {
    /// Mean-subtracted centroid-to-boundary distance (mm).
    pub radius_centered: Vec<f64>,
    pub side_branch: Vec<f64>,
    pub calcium: Vec<f64>,
}

impl CircProfile {
    pub fn has_side_branch(&self) -> bool {
        self.side_branch.iter().any(|&v| v > 0.0)
    }

    pub fn calcium_fraction(&self) -> f64 {
        self.calcium.iter().filter(|&&c| c > 0.0).count() as f64 / self.calcium.len() as f64
    }

    /// Displaces every channel counterclockwise by `bins`: output bin `b`
    /// holds input bin `b - bins`.
    pub fn rotated(&self, bins: usize) -> CircProfile {
        let rot = |v: &[f64]| {
            let n = v.len();
            (0..n).map(|b| v[(b + n - bins % n) % n]).collect()
        };
        CircProfile {
            radius_centered: rot(&self.radius_centered),
            side_branch: rot(&self.side_branch),
            calcium: rot(&self.calcium),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("maximum lumen area is {0}, cannot normalize")]
    DegenerateVessel(f64),
    #[error("{modality} sequence keeps {kept} frames after downsampling, need at least 2")]
    TooFewFrames { modality: Modality, kept: usize },
    #[error("sequence modality {sequence} does not match pullback modality {pullback}")]
    ModalityMismatch { sequence: Modality, pullback: Modality },
}

/// One feature vector per frame; areas are normalized by the vessel's maximum lumen area.
pub fn extract_long_features(p: &Pullback) -> Result<LongFeatureSequence, FeatureError> {
    let max_area = p
        .frames
        .iter()
        .map(|f| f.lumen_area_mm2)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(max_area > 0.0) {
        return Err(FeatureError::DegenerateVessel(max_area));
    }
    let last = p.frames.len().saturating_sub(1).max(1) as f64;

    let vectors = p
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| LongFeatureVector {
            lumen_area_norm: (f.lumen_area_mm2 / max_area).clamp(0.0, 1.0),
            side_branch_area_norm: f.side_branch.map_or(0.0, |sb| sb.area.clamp(0.0, 1.0)),
            calcium_degree: f.calcium_fraction(),
            norm_position: i as f64 / last,
        })
        .collect();

    Ok(LongFeatureSequence {
        modality: p.modality,
        vectors,
        source_frame_indices: (0..p.frames.len()).collect(),
    })
}

/// Taps of a Gaussian truncated at `ceil(3 sigma)`, index 0 is the centre.
fn half_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    (0..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Smooths one channel; the kernel is renormalized over the taps that fall inside the sequence.
pub fn smooth_channel(values: &[f64], sigma: f64) -> Vec<f64> {
    if !(sigma > 0.0) || values.len() < 2 {
        return values.to_vec();
    }
    let half = half_kernel(sigma);
    let n = values.len() as isize;
    let radius = half.len() as isize - 1;

    (0..n)
        .map(|i| {
            let centre = values[i as usize];
            let mut weight = 0.0;
            let mut offset = 0.0;
            for k in -radius..=radius {
                let j = i + k;
                if (0..n).contains(&j) {
                    let w = half[k.unsigned_abs()];
                    weight += w;
                    // accumulate deviations from the centre so constant runs stay bit-exact
                    offset += w * (values[j as usize] - centre);
                }
            }
            centre + offset / weight
        })
        .collect()
}

pub fn gaussian_smooth(seq: &LongFeatureSequence, sigma: f64) -> LongFeatureSequence {
    if !(sigma > 0.0) {
        return seq.clone();
    }
    let channels: Vec<Vec<f64>> = (0..N_LONG_FEATURES)
        .map(|k| smooth_channel(&seq.channel(k), sigma))
        .collect();
    let vectors = (0..seq.len())
        .map(|i| {
            let mut v = [0.0; N_LONG_FEATURES];
            for (k, ch) in channels.iter().enumerate() {
                v[k] = ch[i].clamp(0.0, 1.0);
            }
            LongFeatureVector::from_array(v)
        })
        .collect();
    LongFeatureSequence {
        modality: seq.modality,
        vectors,
        source_frame_indices: seq.source_frame_indices.clone(),
    }
}

/// IVUS keeps the end-diastolic frames, OCT keeps every second frame starting at the first.
pub fn downsample(seq: &LongFeatureSequence, p: &Pullback) -> Result<LongFeatureSequence, FeatureError> {
    if seq.modality != p.modality {
        return Err(FeatureError::ModalityMismatch {
            sequence: seq.modality,
            pullback: p.modality,
        });
    }
    let keep = |pos: usize| match p.modality {
        Modality::Ivus => p.frames[pos].is_ed,
        Modality::Oct => pos % 2 == 0,
    };
    let (vectors, source_frame_indices): (Vec<_>, Vec<_>) = seq
        .vectors
        .iter()
        .zip(&seq.source_frame_indices)
        .filter(|(_, &src)| keep(src))
        .map(|(v, &src)| (*v, src))
        .unzip();
    if vectors.len() < 2 {
        return Err(FeatureError::TooFewFrames {
            modality: p.modality,
            kept: vectors.len(),
        });
    }
    Ok(LongFeatureSequence {
        modality: seq.modality,
        vectors,
        source_frame_indices,
    })
}

pub fn extract_circ_profile(f: &RawFrame) -> CircProfile {
    let n = f.lumen_radius_profile.len().max(1) as f64;
    let mean = sorted_sum(&f.lumen_radius_profile) / n;
    let radius_centered = f.lumen_radius_profile.iter().map(|r| r - mean).collect();

    let side_branch = (0..N_BINS)
        .map(|b| match f.side_branch {
            Some(sb) if sb.covers(b) => sb.area,
            _ => 0.0,
        })
        .collect();
    let calcium = f
        .calcium_arc
        .iter()
        .map(|&c| if c { 1.0 } else { 0.0 })
        .collect();

    CircProfile {
        radius_centered,
        side_branch,
        calcium,
    }
}

/// Sum in ascending order, so the result does not depend on the order of `values`.
pub(crate) fn sorted_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pullback::tests::frame;
    use crate::pullback::SideBranch;

    fn seq_from(channel: &[f64]) -> LongFeatureSequence {
        LongFeatureSequence {
            modality: Modality::Oct,
            vectors: channel
                .iter()
                .map(|&v| LongFeatureVector::from_array([v, v, v, v]))
                .collect(),
            source_frame_indices: (0..channel.len()).collect(),
        }
    }

    #[test]
    fn normalizes_area_position_and_calcium() {
        let mut frames: Vec<_> = (0..3).map(|i| frame(i, true)).collect();
        for (f, a) in frames.iter_mut().zip([2.0, 4.0, 8.0]) {
            f.lumen_area_mm2 = a;
        }
        for b in 0..45 {
            frames[1].calcium_arc[b * 4] = true;
        }
        frames[2].side_branch = Some(SideBranch {
            bin_start: 0,
            bin_end: 3,
            area: 1.4,
        });
        let seq = extract_long_features(&Pullback::new(Modality::Ivus, frames)).unwrap();
        assert_eq!(seq.channel(0), vec![0.25, 0.5, 1.0]);
        assert_eq!(seq.channel(1), vec![0.0, 0.0, 1.0]);
        assert_eq!(seq.channel(2), vec![0.0, 0.25, 0.0]);
        assert_eq!(seq.channel(3), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn positions_in_mm_do_not_matter() {
        let frames: Vec<_> = (0..5).map(|i| frame(i, true)).collect();
        let mut moved = frames.clone();
        for (i, f) in moved.iter_mut().enumerate() {
            f.position_mm = (i * i) as f64 * 3.1;
        }
        let a = extract_long_features(&Pullback::new(Modality::Oct, frames)).unwrap();
        let b = extract_long_features(&Pullback::new(Modality::Oct, moved)).unwrap();
        assert_eq!(a.vectors, b.vectors);
    }

    #[test]
    fn smoothing_constant_and_identity() {
        let s = seq_from(&[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(gaussian_smooth(&s, 1.7), s);
        let s = seq_from(&[0.1, 0.9, 0.3]);
        assert_eq!(gaussian_smooth(&s, 0.0), s);
    }

    #[test]
    fn smoothing_impulse_matches_hand_kernel() {
        // sigma = 1, radius 3: taps e^{-k^2/2}. Output i is w(i-2) / sum of taps inside [0, 4] around i.
        let w = |k: i32| (-(k * k) as f64 / 2.0).exp();
        let norm = |i: i32| (-3..=3).filter(|k| (0..5).contains(&(i + k))).map(w).sum::<f64>();
        let expected: Vec<f64> = (0..5).map(|i| w(i - 2) / norm(i)).collect();

        let out = smooth_channel(&[0.0, 0.0, 1.0, 0.0, 0.0], 1.0);
        for (o, e) in out.iter().zip(&expected) {
            assert!((o - e).abs() < 1e-15, "{o} vs {e}");
        }
        assert!((out[0] - out[4]).abs() < 1e-15);
        assert!((out[1] - out[3]).abs() < 1e-15);
        // boundary renormalization inflates the mass of a short impulse response
        let total: f64 = out.iter().sum();
        assert!((total - 1.071_143_093_4).abs() < 1e-9, "{total}");

        // away from the boundaries the response is the normalized kernel and sums to 1
        let mut long = vec![0.0; 13];
        long[6] = 1.0;
        let out = smooth_channel(&long, 1.0);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for k in 0..=6 {
            assert!((out[6 - k] - out[6 + k]).abs() < 1e-15);
        }
    }

    #[test]
    fn downsample_ivus_keeps_ed_frames() {
        let frames: Vec<_> = (0..51).map(|i| frame(i, i % 25 == 0)).collect();
        let p = Pullback::new(Modality::Ivus, frames);
        let seq = extract_long_features(&p).unwrap();
        let ds = downsample(&seq, &p).unwrap();
        assert_eq!(ds.source_frame_indices, vec![0, 25, 50]);
        assert_eq!(ds.len(), 3);
    }

    #[test]
    fn downsample_oct_keeps_even_positions() {
        for (n, expected) in [(10, vec![0, 2, 4, 6, 8]), (3, vec![0, 2])] {
            let frames: Vec<_> = (0..n).map(|i| frame(i, false)).collect();
            let p = Pullback::new(Modality::Oct, frames);
            let ds = downsample(&extract_long_features(&p).unwrap(), &p).unwrap();
            assert_eq!(ds.source_frame_indices, expected);
        }
        let frames: Vec<_> = (0..2).map(|i| frame(i, false)).collect();
        let p = Pullback::new(Modality::Oct, frames);
        assert_eq!(
            downsample(&extract_long_features(&p).unwrap(), &p),
            Err(FeatureError::TooFewFrames {
                modality: Modality::Oct,
                kept: 1
            })
        );
    }

    #[test]
    fn circ_profile_channels() {
        let mut f = frame(0, true);
        f.lumen_radius_profile = vec![2.0; N_BINS];
        let prof = extract_circ_profile(&f);
        assert!(prof.radius_centered.iter().all(|&r| r == 0.0));
        assert!(prof.calcium.iter().all(|&c| c == 0.0));
        assert!(!prof.has_side_branch());

        f.side_branch = Some(SideBranch {
            bin_start: 10,
            bin_end: 20,
            area: 0.3,
        });
        let prof = extract_circ_profile(&f);
        for (b, v) in prof.side_branch.iter().enumerate() {
            let want = if (10..=20).contains(&b) { 0.3 } else { 0.0 };
            assert_eq!(*v, want, "bin {b}");
        }

        f.side_branch = Some(SideBranch {
            bin_start: 175,
            bin_end: 5,
            area: 0.3,
        });
        let prof = extract_circ_profile(&f);
        let lit: Vec<_> = (0..N_BINS).filter(|&b| prof.side_branch[b] > 0.0).collect();
        assert_eq!(lit, vec![0, 1, 2, 3, 4, 5, 175, 176, 177, 178, 179]);
    }

    #[test]
    fn centered_radius_has_zero_mean() {
        let mut f = frame(0, true);
        f.lumen_radius_profile = (0..N_BINS)
            .map(|b| 1.5 + 0.3 * (b as f64 * 0.07).cos() + 0.01 * b as f64)
            .collect();
        let prof = extract_circ_profile(&f);
        let mean: f64 = prof.radius_centered.iter().sum::<f64>() / N_BINS as f64;
        assert!(mean.abs() < 1e-9);
    }
}
