//! End-to-end registration of one IVUS/OCT pullback pair.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circumferential::{
    interpolate_rotations, rotation_cost_matrix, rotation_path, select_anchors, AnchorPair, CircError,
};
use crate::config::EngineConfig;
use crate::dtw::{self, CostMatrix, DistanceMatrix, Grid};
use crate::features::{downsample, extract_circ_profile, extract_long_features, gaussian_smooth, FeatureError};
use crate::pullback::{Modality, Pullback, BIN_DEG};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorRotation {
    #[serde(flatten)]
    pub pair: AnchorPair,
    pub rotation_deg: f64,
}

/// Serialized registration output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// IVUS end-diastolic frames (pullback positions) the per-frame arrays refer to.
    pub ivus_frames: Vec<usize>,
    /// Fractional OCT frame per IVUS end-diastolic frame.
    pub full_mapping: Vec<f64>,
    /// OCT rotation in degrees `[0, 360)` per IVUS end-diastolic frame.
    pub per_frame_rotation: Vec<f64>,
    pub anchors: Vec<AnchorRotation>,
    /// Anchors whose rotation cost row carried no data term.
    pub zeroed_rows: Vec<usize>,
    /// Warp path over the downsampled sequences.
    pub path: Vec<(usize, usize)>,
    pub config: EngineConfig,
    pub warnings: Vec<String>,
}

impl RegistrationResult {
    /// No anchor pair was found and every rotation defaulted to zero.
    pub fn is_degenerate(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Registration output plus the intermediate matrices.
#[derive(Debug, Clone)]
pub struct Registration {
    pub result: RegistrationResult,
    pub distance: DistanceMatrix,
    pub cost: CostMatrix,
    pub rotation_cost: Grid,
    pub elapsed_ms: f64,
}

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("expected an {expected} pullback, got {got}")]
    WrongModality { expected: Modality, got: Modality },
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

pub fn register(ivus: &Pullback, oct: &Pullback, cfg: &EngineConfig) -> Result<Registration, RegistrationError> {
    let started = Instant::now();
    for (p, expected) in [(ivus, Modality::Ivus), (oct, Modality::Oct)] {
        if p.modality != expected {
            return Err(RegistrationError::WrongModality {
                expected,
                got: p.modality,
            });
        }
    }

    let x = downsample(&gaussian_smooth(&extract_long_features(ivus)?, cfg.sigma), ivus)?;
    let y = downsample(&gaussian_smooth(&extract_long_features(oct)?, cfg.sigma), oct)?;
    let long = dtw::align(&x, &y, &cfg.long_weights);
    let ivus_frames = x.source_frame_indices.clone();

    let ivus_profiles: Vec<_> = ivus.frames.par_iter().map(extract_circ_profile).collect();
    let oct_profiles: Vec<_> = oct.frames.par_iter().map(extract_circ_profile).collect();

    let mut warnings = Vec::new();
    let (anchors, zeroed_rows, rotation_cost, per_frame_rotation) = match select_anchors(
        &ivus_frames,
        &long.full_mapping,
        &ivus_profiles,
        &oct_profiles,
        cfg.calcium_anchor_threshold,
    ) {
        Ok(anchors) => {
            let r = rotation_cost_matrix(
                &anchors,
                &ivus_profiles,
                &oct_profiles,
                &cfg.circ_weights,
                cfg.calcium_anchor_threshold,
                cfg.strict_sidebranch_zeroing,
            );
            let positions: Vec<f64> = anchors.iter().map(|a| ivus.frames[a.ivus_frame].position_mm).collect();
            let bins = rotation_path(&r.values, cfg.path_params(), &positions);
            let degrees: Vec<f64> = bins.iter().map(|&b| b as f64 * BIN_DEG).collect();
            let anchor_frames: Vec<usize> = anchors.iter().map(|a| a.ivus_frame).collect();
            let per_frame = interpolate_rotations(&anchor_frames, &degrees, &ivus_frames);
            let anchors = anchors
                .into_iter()
                .zip(degrees)
                .map(|(pair, rotation_deg)| AnchorRotation { pair, rotation_deg })
                .collect();
            (anchors, r.zeroed_rows, r.values, per_frame)
        }
        Err(CircError::NoAnchors) => {
            warnings.push(format!("{}; rotations default to 0", CircError::NoAnchors));
            (Vec::new(), Vec::new(), Grid::from_vec(0, 0, Vec::new()), vec![0.0; ivus_frames.len()])
        }
    };

    let result = RegistrationResult {
        ivus_frames,
        full_mapping: long.full_mapping,
        per_frame_rotation,
        anchors,
        zeroed_rows,
        path: long.path,
        config: cfg.clone(),
        warnings,
    };
    Ok(Registration {
        result,
        distance: long.distance,
        cost: long.cost,
        rotation_cost,
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Registers independent vessel pairs concurrently; output order follows input order.
pub fn register_batch(
    pairs: &[(Pullback, Pullback)],
    cfg: &EngineConfig,
) -> Vec<Result<Registration, RegistrationError>> {
    pairs.par_iter().map(|(ivus, oct)| register(ivus, oct, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_pair, SynthConfig};

    #[test]
    fn rejects_swapped_modalities() {
        let (ivus, oct, _) = generate_pair(&SynthConfig::random_vessel(1, 30.0)).unwrap();
        assert!(matches!(
            register(&oct, &ivus, &EngineConfig::default()),
            Err(RegistrationError::WrongModality { .. })
        ));
    }

    #[test]
    fn featureless_pair_degrades_to_zero_rotation() {
        let (ivus, oct, _) = generate_pair(&SynthConfig::default()).unwrap();
        let reg = register(&ivus, &oct, &EngineConfig::default()).unwrap();
        assert!(reg.result.is_degenerate());
        assert_eq!(reg.result.warnings.len(), 1);
        assert!(reg.result.per_frame_rotation.iter().all(|&r| r == 0.0));
        assert_eq!(reg.result.full_mapping.len(), ivus.ed_count());
    }

    #[test]
    fn batch_matches_serial() {
        let pairs: Vec<_> = (0..3)
            .map(|s| {
                let (i, o, _) = generate_pair(&SynthConfig::random_vessel(s, 30.0)).unwrap();
                (i, o)
            })
            .collect();
        let cfg = EngineConfig::default();
        let batch = register_batch(&pairs, &cfg);
        for ((i, o), b) in pairs.iter().zip(batch) {
            assert_eq!(register(i, o, &cfg).unwrap().result, b.unwrap().result);
        }
    }
}
