//! Synthetic multi-traversal benchmark.
//!
//! Two procedurally generated worlds: one for training and one for
//! evaluation. Every traversal follows the same loop with aligned poses, and
//! each carries its own noise profile. A separate query traversal is offset
//! along the loop and has per-frame noise varying from clean to its full
//! profile.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{
    quantile_thresholds, recall_at_n_outcomes, recall_at_rejection_level,
    recall_at_rejection_outcomes, spearman,
};
use crate::mapstore::{init_map, merge_session, MapConfig, ParentMap};
use crate::model::{ModelConfig, ModelParams};
use crate::pipeline::{embed_scans, query_outcomes, session_entries};
use crate::scan_synth::{
    apply_noise, generate_trajectory, polar_to_cartesian, render_polar_scan, CartesianScan,
    NoiseProfile, Pose, RouteSpec, ScanGeometry, WorldModel, WorldSpec,
};
use crate::training::{train, RotationPolicy, TrainConfig, TrainingSession};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub geometry: ScanGeometry,
    pub world: WorldSpec,
    pub loop_radius: f64,
    pub n_frames: usize,
    pub frame_spacing: f64,
    /// One profile per mapping traversal.
    pub traversal_noise: Vec<NoiseProfile>,
    pub query_noise: NoiseProfile,
    /// Arc-length shift of the query traversal, meters.
    pub query_offset: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        let profile =
            |speckle_sigma, saturation_prob, occlusion_sectors, blur_azimuths| NoiseProfile {
                speckle_sigma,
                saturation_prob,
                occlusion_sectors,
                occlusion_width: 0.8,
                blur_azimuths,
                jitter: 0.5,
            };
        Self {
            geometry: ScanGeometry::desk(),
            world: WorldSpec::default(),
            loop_radius: 80.0,
            n_frames: 83,
            frame_spacing: 6.0,
            traversal_noise: vec![
                profile(0.05, 0.0, 0, 0),
                profile(0.15, 0.1, 0, 1),
                profile(0.1, 0.03, 1, 0),
                profile(0.2, 0.2, 1, 2),
                profile(0.1, 0.05, 0, 1),
            ],
            query_noise: NoiseProfile {
                jitter: 1.0,
                ..profile(0.2, 0.2, 1, 2)
            },
            query_offset: 3.0,
        }
    }
}

impl BenchmarkSpec {
    /// Same layout with every traversal noise-free.
    pub fn noiseless(&self) -> Self {
        Self {
            traversal_noise: vec![NoiseProfile::default(); self.traversal_noise.len()],
            query_noise: NoiseProfile::default(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.traversal_noise.is_empty() {
            return Err(Error::config("benchmark needs at least one traversal"));
        }
        for p in self.traversal_noise.iter().chain([&self.query_noise]) {
            p.validate()?;
        }
        Ok(())
    }

    fn route(&self, offset: f64) -> RouteSpec {
        RouteSpec::Loop {
            cx: 0.0,
            cy: 0.0,
            radius: self.loop_radius,
            offset,
        }
    }
}

/// One rendered pass along a route.
#[derive(Debug, Clone, PartialEq)]
pub struct Traversal {
    pub name: String,
    pub poses: Vec<Pose>,
    pub scans: Vec<CartesianScan>,
    /// Injected noise severity per frame.
    pub severities: Vec<f64>,
}

/// Renders and corrupts every pose, frame noise drawn from `noise_seed`.
pub fn render_traversal(
    name: &str,
    world: &WorldModel,
    geometry: &ScanGeometry,
    poses: &[Pose],
    profile: &NoiseProfile,
    noise_seed: u64,
) -> Result<Traversal> {
    geometry.validate()?;
    profile.validate()?;
    let frames = poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| {
            let polar = render_polar_scan(
                world,
                pose,
                i as u64,
                geometry.azimuths,
                geometry.bins,
                geometry.bin_size,
            )?;
            let clean = polar_to_cartesian(&polar, geometry.side, geometry.cell_size)?;
            Ok(apply_noise(
                &clean,
                &profile.frame_config(noise_seed, i as u64),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (scans, severities) = frames.into_iter().unzip();
    Ok(Traversal {
        name: name.to_string(),
        poses: poses.to_vec(),
        scans,
        severities,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    /// Traversals of the training world, one per noise profile.
    pub train: Vec<Traversal>,
    /// Aligned traversals of the evaluation world.
    pub mapping: Vec<Traversal>,
    pub query: Traversal,
}

fn derive(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

pub fn build_benchmark(spec: &BenchmarkSpec, seed: u64) -> Result<Benchmark> {
    spec.validate()?;
    let train_world = WorldModel::generate(&spec.world, derive(seed, 1))?;
    let test_world = WorldModel::generate(&spec.world, derive(seed, 2))?;
    let poses = generate_trajectory(
        &test_world,
        &spec.route(0.0),
        spec.n_frames,
        spec.frame_spacing,
    )?;
    let query_poses = generate_trajectory(
        &test_world,
        &spec.route(spec.query_offset),
        spec.n_frames,
        spec.frame_spacing,
    )?;

    let mut train = Vec::new();
    let mut mapping = Vec::new();
    for (i, profile) in spec.traversal_noise.iter().enumerate() {
        let name = format!("session_{i:02}");
        train.push(render_traversal(
            &name,
            &train_world,
            &spec.geometry,
            &poses,
            profile,
            derive(seed, 100 + i as u64),
        )?);
        mapping.push(render_traversal(
            &name,
            &test_world,
            &spec.geometry,
            &poses,
            profile,
            derive(seed, 200 + i as u64),
        )?);
    }
    let query = render_traversal(
        "query",
        &test_world,
        &spec.geometry,
        &query_poses,
        &spec.query_noise,
        derive(seed, 300),
    )?;
    Ok(Benchmark {
        train,
        mapping,
        query,
    })
}

/// Model and optimiser settings used on the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkProtocol {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for BenchmarkProtocol {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                rings: 2,
                sectors: 8,
                lv_hidden: 16,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                learning_rate: 1e-4,
                temperature: 0.1,
                epochs: 30,
                rotation: RotationPolicy::None,
                ..TrainConfig::default()
            },
        }
    }
}

/// Headline numbers of one benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub seed: u64,
    /// Recall@1 of the query traversal against each single-session map.
    pub single_recall: Vec<f64>,
    /// Recall@1 against the map built from session 0 and maintained with the rest.
    pub maintained_recall: f64,
    /// Recall@1 of the maintained map with no queries rejected and at 50% rejection.
    pub recall_at_0: f64,
    pub recall_at_50: f64,
    /// Spearman correlation of injected severity and predicted U over every
    /// evaluation-world scan.
    pub severity_rho: f64,
}

impl TrialSummary {
    pub fn mean_single_recall(&self) -> f64 {
        self.single_recall.iter().sum::<f64>() / self.single_recall.len() as f64
    }
}

pub fn training_sessions(traversals: &[Traversal]) -> Result<Vec<TrainingSession>> {
    traversals
        .iter()
        .map(|t| TrainingSession::new(t.scans.clone(), t.poses.clone()))
        .collect()
}

/// Builds the benchmark, trains on the training world and evaluates single
/// and maintained maps on the evaluation world.
pub fn run_trial(
    spec: &BenchmarkSpec,
    protocol: &BenchmarkProtocol,
    seed: u64,
) -> Result<TrialSummary> {
    let bench = build_benchmark(spec, seed)?;
    let init = ModelParams::<f64>::init(protocol.model, seed)?;
    let cfg = TrainConfig {
        seed,
        ..protocol.train
    };
    let (params, _) = train(&training_sessions(&bench.train)?, &init, &cfg)?;

    let embeds = bench
        .mapping
        .iter()
        .map(|t| embed_scans(&params, &t.scans))
        .collect::<Result<Vec<_>>>()?;
    let queries = embed_scans(&params, &bench.query.scans)?;
    let sessions = bench
        .mapping
        .iter()
        .zip(&embeds)
        .map(|(t, e)| session_entries(e, &t.poses, &t.name))
        .collect::<Result<Vec<_>>>()?;

    let mut single_recall = Vec::with_capacity(sessions.len());
    for s in &sessions {
        let map = init_map(s, MapConfig::default())?;
        single_recall.push(recall_at_n_outcomes(
            &query_outcomes(&map, &queries, &bench.query.poses, 1)?,
            1,
        )?);
    }
    let map = maintained_map(&sessions)?;
    let outcomes = query_outcomes(&map, &queries, &bench.query.poses, 1)?;
    let curve = recall_at_rejection_outcomes(&outcomes, &quantile_thresholds(&outcomes));
    let recall_at_50 = recall_at_rejection_level(&curve, 0.5)
        .ok_or_else(|| Error::domain("no rejection level reaches 50%"))?;

    let mut severities = Vec::new();
    let mut us = Vec::new();
    for (t, e) in bench
        .mapping
        .iter()
        .zip(&embeds)
        .chain([(&bench.query, &queries)])
    {
        severities.extend_from_slice(&t.severities);
        us.extend(e.iter().map(|x| x.uncertainty));
    }
    Ok(TrialSummary {
        seed,
        single_recall,
        maintained_recall: recall_at_n_outcomes(&outcomes, 1)?,
        recall_at_0: curve.first().map(|p| p.recall_at_1).unwrap_or(0.0),
        recall_at_50,
        severity_rho: spearman(&severities, &us)?,
    })
}

/// Founds a map on the first session and merges the others in order.
pub fn maintained_map(sessions: &[Vec<crate::mapstore::MapEntry>]) -> Result<ParentMap> {
    let (first, rest) = sessions
        .split_first()
        .ok_or_else(|| Error::domain("no sessions to map"))?;
    let mut map = init_map(first, MapConfig::default())?;
    for s in rest {
        merge_session(&mut map, s)?;
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchmarkSpec {
        BenchmarkSpec {
            world: WorldSpec {
                landmark_count: 400,
                ..WorldSpec::default()
            },
            n_frames: 6,
            ..BenchmarkSpec::default()
        }
    }

    #[test]
    fn layout_and_alignment() {
        let b = build_benchmark(&small(), 3).unwrap();
        assert_eq!(b.mapping.len(), 5);
        assert_eq!(b.train.len(), 5);
        assert!(b
            .mapping
            .iter()
            .all(|t| t.poses == b.mapping[0].poses && t.scans.len() == 6));
        assert_ne!(b.train[0].scans, b.mapping[0].scans);
        assert_ne!(b.query.poses[0], b.mapping[0].poses[0]);
        assert_eq!(b, build_benchmark(&small(), 3).unwrap());
    }

    #[test]
    fn noiseless_has_zero_severity() {
        let b = build_benchmark(&small().noiseless(), 1).unwrap();
        assert!(b
            .mapping
            .iter()
            .chain([&b.query])
            .all(|t| t.severities.iter().all(|s| *s == 0.0)));
    }
}
