//! Shared fixtures for the matcher benchmarks: a synthetic scene's labeled
//! features with exact camera priors and a terrain grid sampled from the
//! scene's true surface.

use nalgebra::Vector2;
use orthofuse::matching::{match_pair, sequential_pairs, MatchConfig, MatchPair, PairPrior};
use orthofuse::synth::{gen_feature_truth, gen_scene, preset, FeatureParams};
use orthofuse::{CameraIntrinsics, FeatureSet, RigidTransform, TerrainGrid};

pub struct Fixture {
    pub k: CameraIntrinsics,
    pub features: Vec<FeatureSet>,
    pub priors: Vec<RigidTransform>,
    pub dtm: TerrainGrid,
    pub pairs: Vec<(usize, usize)>,
}

impl Fixture {
    pub fn from_preset(name: &str) -> Result<Self, orthofuse::Error> {
        let spec = preset(name)?;
        let scene = gen_scene(&spec)?;
        let truth = gen_feature_truth(&scene, &FeatureParams::from_spec(&spec))?;
        let priors = scene.truth.frame_poses.clone();
        // cover every camera position with room for the footprints
        let pad = 3.0 * spec.trajectory.altitude;
        let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
        for p in &priors {
            let t = p.translation().xy();
            lo = lo.inf(&t);
            hi = hi.sup(&t);
        }
        let cell = 1.0;
        let size = (hi - lo).add_scalar(2.0 * pad) / cell;
        let terrain = &scene.truth.terrain;
        let dtm = TerrainGrid::from_fn(lo.add_scalar(-pad), cell, size.y.ceil() as usize, size.x.ceil() as usize, |x, y| terrain.height(x, y))?;
        Ok(Self {
            k: scene.k,
            features: truth.sets,
            pairs: sequential_pairs(priors.len(), MatchConfig::default().overlap),
            priors,
            dtm,
        })
    }

    pub fn prior(&self, a: usize, b: usize) -> PairPrior<'_> {
        PairPrior {
            k: &self.k,
            pose_a: &self.priors[a],
            pose_b: &self.priors[b],
            terrain: &self.dtm,
        }
    }

    pub fn match_one(&self, cfg: &MatchConfig, a: usize, b: usize) -> Result<Vec<MatchPair>, orthofuse::Error> {
        Ok(match_pair(cfg, &self.features[a], &self.features[b], Some(&self.prior(a, b)))?)
    }

    /// Total matches over every sequential pair.
    pub fn match_all(&self, cfg: &MatchConfig) -> Result<usize, orthofuse::Error> {
        self.pairs.iter().map(|&(a, b)| self.match_one(cfg, a, b).map(|m| m.len())).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use orthofuse::matching::MatcherKind;

    #[test]
    fn tiny_fixture_matches_with_every_matcher() {
        let f = Fixture::from_preset("tiny").unwrap();
        assert_eq!(f.features.len(), f.priors.len());
        let (lo, hi) = f.dtm.extent();
        for p in &f.priors {
            let t = p.translation();
            assert!(t.x > lo.x && t.y > lo.y && t.x < hi.x && t.y < hi.y);
        }
        for matcher in [MatcherKind::Bf, MatcherKind::BfOpt, MatcherKind::Kd, MatcherKind::KdOpt] {
            let cfg = MatchConfig { matcher, ..Default::default() };
            assert!(f.match_one(&cfg, 0, 1).unwrap().len() > 50, "{matcher:?}");
        }
    }
}
