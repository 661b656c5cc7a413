//! Per-frame driver: render, correspond, solve, warp, fuse, grow the graph.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{mpsc, Arc};
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::align::{
    build_correspondences, solve, EnergyBreakdown, EnergyWeights, Gating, Problem, SolverOptions,
    SolverReport, Termination,
};
use crate::fusion::{
    fuse_frame, register, remove_violating, unsupported, update_graph, warp_geometry, warp_nodes,
    FuseStats, FusionConfig, SurfelGeometry,
};
use crate::measurement::synthetic::{DEFAULT_RIGIDNESS, NUM_LABELS};
use crate::measurement::{
    generate_synthetic, load_sequence, CameraIntrinsics, FlowMap, IngestConfig, MeasurementError,
    MeasurementFrame, NoiseConfig, SceneKind, SurfacePoint, SyntheticScene,
};
use crate::render::{render, RenderMaps, ALIGN_SCALE, FUSION_SCALE};
use crate::warpfield::{bind_surfels, DeformationGraph, GraphMode, RigidnessTable, WarpField};
use crate::Grid;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error("frame {frame}: {message}")]
    Frame { frame: usize, message: String },
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowSource {
    #[serde(rename = "gt")]
    GroundTruth,
    #[serde(rename = "files")]
    Files,
}

impl FromStr for FlowSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gt" => Ok(Self::GroundTruth),
            "files" => Ok(Self::Files),
            _ => Err(format!("unknown flow source '{s}' (expected gt or files)")),
        }
    }
}

/// Flat run configuration, read from TOML. Missing keys take defaults,
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub w_picp: f64,
    pub w_2d: f64,
    pub w_areg: f64,
    pub max_outer: usize,
    pub sweeps: usize,
    pub rel_tol: f64,
    pub lambda: f64,
    pub max_backtracks: usize,
    /// Correspondence distance gate, meters.
    pub tau_corr: f64,
    /// Correspondence normal gate, degrees.
    pub theta_corr_deg: f64,
    /// Node support radius, meters.
    pub sigma: f64,
    pub delta_m: f64,
    pub delta_m_unrecognized: f64,
    pub semantic_fusion: bool,
    pub tau_violate: f64,
    pub tau_stale: usize,
    pub nodes_per_surfel: usize,
    pub node_neighbors: usize,
    pub label_vote_k: usize,
    /// Rigidness per class, entry `k - 1` for class `k`.
    pub rigidness: Vec<f64>,
    pub graph_mode: GraphMode,
    /// Defaults to ground truth for presets and files for directories.
    pub flow_source: Option<FlowSource>,
    /// Gaussian depth filter sigma in pixels, `0` disables. Synthetic frames
    /// are filtered only when depth noise is enabled.
    pub denoise_sigma: f64,
    pub max_depth_jump: f64,
    /// Label classes including the unrecognized class.
    pub num_labels: u16,
    pub depth_noise: f64,
    pub label_flip_fraction: f64,
    /// Class relabeled as unrecognized after the first synthetic frame.
    pub erase_class: Option<u16>,
    pub seed: u64,
    pub frames: Option<usize>,
    pub dump_ply: bool,
    pub dump_graph: bool,
    pub dump_render: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let w = EnergyWeights::default();
        let s = SolverOptions::default();
        let f = FusionConfig::default();
        Self {
            w_picp: w.w_picp,
            w_2d: w.w_2d,
            w_areg: w.w_areg,
            max_outer: s.max_outer,
            sweeps: s.sweeps,
            rel_tol: s.rel_tol,
            lambda: s.lambda,
            max_backtracks: s.max_backtracks,
            tau_corr: f.gating.max_distance,
            theta_corr_deg: f.gating.max_normal_angle_deg,
            sigma: f.sigma,
            delta_m: f.delta_m,
            delta_m_unrecognized: f.delta_m_unrecognized,
            semantic_fusion: f.semantic_fusion,
            tau_violate: f.tau_violate,
            tau_stale: f.tau_stale,
            nodes_per_surfel: 4,
            node_neighbors: f.node_neighbors,
            label_vote_k: f.label_vote_k,
            rigidness: DEFAULT_RIGIDNESS.to_vec(),
            graph_mode: GraphMode::Sad,
            flow_source: None,
            denoise_sigma: 1.0,
            max_depth_jump: 0.03,
            num_labels: NUM_LABELS,
            depth_noise: 0.0,
            label_flip_fraction: 0.0,
            erase_class: None,
            seed: 0,
            frames: None,
            dump_ply: false,
            dump_graph: false,
            dump_render: false,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.weights().validate().map_err(PipelineError::Config)?;
        let positive = [
            ("sigma", self.sigma),
            ("tau_corr", self.tau_corr),
            ("theta_corr_deg", self.theta_corr_deg),
            ("tau_violate", self.tau_violate),
            ("max_depth_jump", self.max_depth_jump),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.delta_m < 0.0 || self.delta_m_unrecognized < 0.0 {
            return bad("delta_m values must be non-negative".into());
        }
        if self.nodes_per_surfel == 0 || self.node_neighbors == 0 || self.label_vote_k == 0 {
            return bad("neighbor counts must be at least 1".into());
        }
        if self.num_labels < 2 {
            return bad("num_labels must be at least 2".into());
        }
        if self.rigidness.len() != self.num_labels as usize {
            return bad(format!(
                "rigidness lists {} classes, expected {}",
                self.rigidness.len(),
                self.num_labels
            ));
        }
        if self.rigidness.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad("rigidness values must be positive".into());
        }
        if self.denoise_sigma < 0.0 || self.depth_noise < 0.0 {
            return bad("denoise_sigma and depth_noise must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.label_flip_fraction) {
            return bad("label_flip_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn weights(&self) -> EnergyWeights {
        EnergyWeights {
            w_picp: self.w_picp,
            w_2d: self.w_2d,
            w_areg: self.w_areg,
        }
    }

    pub fn solver(&self) -> SolverOptions {
        SolverOptions {
            max_outer: self.max_outer,
            sweeps: self.sweeps,
            rel_tol: self.rel_tol,
            lambda: self.lambda,
            max_backtracks: self.max_backtracks,
        }
    }

    pub fn gating(&self) -> Gating {
        Gating {
            max_distance: self.tau_corr,
            max_normal_angle_deg: self.theta_corr_deg,
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            gating: self.gating(),
            delta_m: self.delta_m,
            delta_m_unrecognized: self.delta_m_unrecognized,
            semantic_fusion: self.semantic_fusion,
            tau_violate: self.tau_violate,
            tau_stale: self.tau_stale,
            sigma: self.sigma,
            label_vote_k: self.label_vote_k,
            node_neighbors: self.node_neighbors,
        }
    }

    pub fn rigidness_table(&self) -> RigidnessTable {
        RigidnessTable(self.rigidness.clone())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub render_a: f64,
    pub correspond: f64,
    pub solve: f64,
    pub warp: f64,
    pub render_g: f64,
    pub fuse: f64,
    pub graph: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub name: String,
    pub class: u16,
    pub surfels: usize,
    pub mean_mm: f64,
    /// Mean ground-truth displacement of these surfels since they were created.
    pub motion_mm: f64,
    /// Share of this object's first-frame surfels whose label is the object's class.
    pub label_retention: Option<f64>,
}

/// Distances between surfels and the ground-truth position of the material
/// point each was created from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub mean_mm: f64,
    pub median_mm: f64,
    pub motion_mm: f64,
    pub objects: Vec<ObjectMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub surfels: usize,
    pub nodes: usize,
    pub new_nodes: usize,
    pub correspondences: usize,
    pub fused: usize,
    pub appended: usize,
    pub removed: usize,
    /// Surfels left unwarped because every blend weight vanished.
    pub degenerate_warps: usize,
    pub solver_iterations: usize,
    pub energies: Vec<EnergyBreakdown>,
    pub termination: Option<Termination>,
    pub error: Option<ErrorMetrics>,
    pub timings_ms: StageTimings,
}

/// One frame ready for processing.
#[derive(Clone, Debug)]
pub struct FrameInput {
    pub meas: MeasurementFrame,
    pub flow: Option<FlowMap>,
    /// Ground-truth material point per pixel, synthetic input only.
    pub anchors: Option<Grid<Option<SurfacePoint>>>,
}

#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub metrics: FrameMetrics,
    pub report: Option<SolverReport>,
    /// `T_i(p_i) - p_i` for the nodes that existed before this frame.
    pub node_displacements: Vec<Vector3<f64>>,
    pub render_a: Option<RenderMaps>,
    pub render_g: Option<RenderMaps>,
}

/// Reconstruction state carried between frames.
#[derive(Debug)]
pub struct Pipeline {
    cfg: PipelineConfig,
    intrinsics: CameraIntrinsics,
    scene: Option<Arc<SyntheticScene>>,
    pub geometry: SurfelGeometry,
    pub graph: DeformationGraph,
    /// Last solved transforms, reused as the next frame's initialization.
    pub warp: WarpField,
    frames: usize,
    prev_nodes: usize,
    last_stats: FuseStats,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl Pipeline {
    pub fn new(
        cfg: PipelineConfig,
        intrinsics: CameraIntrinsics,
        scene: Option<Arc<SyntheticScene>>,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        intrinsics.validate()?;
        Ok(Self {
            cfg,
            intrinsics,
            scene,
            geometry: SurfelGeometry::default(),
            graph: DeformationGraph::default(),
            warp: WarpField::default(),
            frames: 0,
            prev_nodes: 0,
            last_stats: FuseStats::default(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn frames_processed(&self) -> usize {
        self.frames
    }

    pub fn process(&mut self, input: &FrameInput) -> Result<FrameOutput, PipelineError> {
        let start = Instant::now();
        let meas = &input.meas;
        let frame = meas.index;
        let fail = |message: String| PipelineError::Frame { frame, message };
        if meas.width() != self.intrinsics.width || meas.height() != self.intrinsics.height {
            return Err(fail("measurement size differs from the camera".into()));
        }
        let fusion = self.cfg.fusion();
        let mut timings = StageTimings::default();
        let mut report = None;
        let mut correspondences = 0;
        let mut degenerate = 0;
        let mut node_displacements = Vec::new();
        let mut render_a = None;
        let mut render_g = None;
        self.prev_nodes = self.graph.len();

        let registration = if self.geometry.is_empty() {
            Grid::new(meas.width(), meas.height(), None)
        } else {
            let t = Instant::now();
            let ra = render(&self.geometry, &self.intrinsics, ALIGN_SCALE);
            timings.render_a = ms(t);

            let t = Instant::now();
            let zeros;
            let flow = match &input.flow {
                Some(f) => f,
                None => {
                    zeros = FlowMap::zeros(meas.width(), meas.height());
                    &zeros
                }
            };
            if flow.width() != meas.width() || flow.height() != meas.height() {
                return Err(fail("flow size differs from the measurement".into()));
            }
            let corr = build_correspondences(
                meas,
                flow,
                &ra,
                &self.geometry,
                &self.graph,
                &self.warp,
                &fusion.gating,
            );
            correspondences = corr.len();
            timings.correspond = ms(t);

            let t = Instant::now();
            let problem = Problem {
                correspondences: &corr,
                graph: &self.graph,
                weights: self.cfg.weights(),
            };
            let (warp, rep) = solve(&problem, &self.warp, &self.cfg.solver());
            if rep.termination == Termination::Failed {
                return Err(fail(format!(
                    "solver failed: {}",
                    rep.error.clone().unwrap_or_default()
                )));
            }
            self.warp = warp;
            report = Some(rep);
            timings.solve = ms(t);

            let t = Instant::now();
            let (warped, flags) = warp_geometry(&self.geometry, &self.graph, &self.warp);
            degenerate = flags.iter().filter(|f| **f).count();
            self.geometry = warped;
            let before: Vec<Vector3<f64>> = self.graph.nodes.iter().map(|n| n.position).collect();
            warp_nodes(&mut self.graph, &self.warp);
            node_displacements = self
                .graph
                .nodes
                .iter()
                .zip(before)
                .map(|(n, p)| n.position - p)
                .collect();
            timings.warp = ms(t);

            let t = Instant::now();
            let rg = render(&self.geometry, &self.intrinsics, FUSION_SCALE);
            let reg = register(meas, &rg, &self.geometry, &fusion.gating);
            timings.render_g = ms(t);
            render_a = Some(ra);
            render_g = Some(rg);
            reg
        };

        let t = Instant::now();
        let stats = fuse_frame(
            &mut self.geometry,
            meas,
            &registration,
            &fusion,
            input.anchors.as_ref(),
        );
        let removal = remove_violating(&self.geometry, meas, &stats.fused_flags, &fusion);
        let removed = removal.iter().filter(|r| **r).count();
        self.geometry.compact(&removal);
        timings.fuse = ms(t);

        let t = Instant::now();
        let new_nodes = update_graph(
            &self.geometry,
            &mut self.graph,
            &fusion,
            self.cfg.graph_mode,
            &self.cfg.rigidness_table(),
        )
        .map_err(|e| fail(e.to_string()))?;
        self.warp.grow_to(self.graph.len());
        self.graph.bindings = bind_surfels(
            &self.geometry.positions(),
            &self.graph,
            self.cfg.nodes_per_surfel,
        )
        .map_err(|e| fail(e.to_string()))?;
        timings.graph = ms(t);
        timings.total = ms(start);

        self.frames += 1;
        let metrics = FrameMetrics {
            frame,
            surfels: self.geometry.len(),
            nodes: self.graph.len(),
            new_nodes,
            correspondences,
            fused: stats.fused,
            appended: stats.appended,
            removed,
            degenerate_warps: degenerate,
            solver_iterations: report.as_ref().map_or(0, |r| r.iterations),
            energies: report
                .as_ref()
                .map_or_else(Vec::new, |r| r.energies.clone()),
            termination: report.as_ref().map(|r| r.termination),
            error: self.error_metrics(frame),
            timings_ms: timings,
        };
        self.last_stats = stats;
        Ok(FrameOutput {
            metrics,
            report,
            node_displacements,
            render_a,
            render_g,
        })
    }

    fn error_metrics(&self, frame: usize) -> Option<ErrorMetrics> {
        let scene = self.scene.as_ref()?;
        let n = scene.objects.len();
        let mut errors = Vec::new();
        let mut per: Vec<(usize, f64, f64, usize, usize)> = vec![(0, 0.0, 0.0, 0, 0); n];
        let mut motion = 0.0;
        for s in &self.geometry.surfels {
            let Some(a) = s.anchor else { continue };
            let now = scene.world_position(&a, frame);
            let e = (s.vertex - now).norm() * 1e3;
            let m = (now - scene.world_position(&a, s.born)).norm() * 1e3;
            errors.push(e);
            motion += m;
            let o = &mut per[a.object];
            o.0 += 1;
            o.1 += e;
            o.2 += m;
            if s.born == 0 {
                o.3 += 1;
                if s.label() == scene.objects[a.object].class {
                    o.4 += 1;
                }
            }
        }
        if errors.is_empty() {
            return None;
        }
        let count = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / count;
        errors.sort_by(f64::total_cmp);
        let median = errors[errors.len() / 2];
        let objects = scene
            .objects
            .iter()
            .zip(per)
            .map(|(o, (c, e, m, born0, kept))| ObjectMetrics {
                name: o.name.clone(),
                class: o.class,
                surfels: c,
                mean_mm: if c > 0 { e / c as f64 } else { 0.0 },
                motion_mm: if c > 0 { m / c as f64 } else { 0.0 },
                label_retention: (born0 > 0).then(|| kept as f64 / born0 as f64),
            })
            .collect();
        Some(ErrorMetrics {
            mean_mm: mean,
            median_mm: median,
            motion_mm: motion / count,
            objects,
        })
    }

    /// Violated state invariants after the last processed frame; empty when
    /// everything holds.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Some(i) = self
            .warp
            .transforms
            .iter()
            .position(|q| !q.is_normalized(1e-9))
        {
            v.push(format!("node {i} transform is not a unit dual quaternion"));
        }
        if self.warp.len() != self.graph.len() {
            v.push("warp field and graph sizes differ".into());
        }
        for (i, s) in self.geometry.surfels.iter().enumerate() {
            let sum: f64 = s.label_dist.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || s.label_dist.iter().any(|p| *p < 0.0) {
                v.push(format!("surfel {i} label distribution sums to {sum}"));
                break;
            }
            if (s.normal.norm() - 1.0).abs() > 1e-6 || s.radius.is_nan() || s.radius <= 0.0 {
                v.push(format!(
                    "surfel {i} has a non-unit normal or non-positive radius"
                ));
                break;
            }
        }
        let lost = unsupported(&self.geometry, &self.graph, self.cfg.sigma).len();
        if lost > 0 {
            v.push(format!("{lost} surfels farther than sigma from every node"));
        }
        if self.graph.len() < self.prev_nodes {
            v.push("node count decreased".into());
        }
        for (j, nbrs) in self.graph.neighbors.iter().enumerate() {
            let mut sorted = nbrs.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if nbrs.contains(&j) || sorted.len() != nbrs.len() {
                v.push(format!("node {j} has a self loop or duplicate neighbor"));
                break;
            }
        }
        if self
            .graph
            .directed_edges()
            .any(|e| e.2.is_nan() || e.2 <= 0.0)
        {
            v.push("non-positive edge weight".into());
        }
        if self.graph.bindings.len() != self.geometry.len()
            || (!self.geometry.is_empty() && self.graph.bindings.per_surfel() == 0)
        {
            v.push("surfel bindings out of date".into());
        }
        let s = &self.last_stats;
        if s.fused + s.appended != s.attempts {
            v.push(format!(
                "fused {} + appended {} != attempts {}",
                s.fused, s.appended, s.attempts
            ));
        }
        v
    }

    /// Writes the requested per-frame dumps into `dir`.
    pub fn write_dumps(&self, dir: &Path, out: &FrameOutput) -> Result<(), PipelineError> {
        let frame = out.metrics.frame;
        let io = |path: PathBuf| move |source| PipelineError::Output { path, source };
        if self.cfg.dump_ply {
            let path = dir.join(format!("frame_{frame:06}.ply"));
            let mut f = BufWriter::new(File::create(&path).map_err(io(path.clone()))?);
            self.geometry.write_ply(&mut f).map_err(io(path.clone()))?;
            f.flush().map_err(io(path))?;
        }
        if self.cfg.dump_graph {
            let path = dir.join(format!("graph_{frame:06}.json"));
            let text = serde_json::to_string_pretty(&self.graph.dump(Some(&self.warp)))
                .expect("graph dump serializes");
            fs::write(&path, text).map_err(io(path))?;
        }
        if self.cfg.dump_render {
            for (tag, maps) in [("a", &out.render_a), ("g", &out.render_g)] {
                if let Some(maps) = maps {
                    write_render(dir, &format!("render_{frame:06}_{tag}"), maps)?;
                }
            }
        }
        Ok(())
    }
}

fn write_render(dir: &Path, stem: &str, maps: &RenderMaps) -> Result<(), PipelineError> {
    let (w, h) = (maps.width() as u32, maps.height() as u32);
    let save = |name: String, img: image::DynamicImage| {
        let path = dir.join(name);
        img.save(&path).map_err(|e| PipelineError::Output {
            path,
            source: std::io::Error::other(e),
        })
    };
    let color = image::RgbImage::from_fn(w, h, |x, y| {
        image::Rgb(*maps.color.get(x as usize, y as usize))
    });
    save(format!("{stem}.color.png"), color.into())?;
    let normal = image::RgbImage::from_fn(w, h, |x, y| {
        let n = maps.normal.get(x as usize, y as usize);
        let c = |v: f64| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        image::Rgb([c(n.x), c(n.y), c(n.z)])
    });
    save(format!("{stem}.normal.png"), normal.into())?;
    let depth = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(w, h, |x, y| {
        let z = maps.vertex.get(x as usize, y as usize).z;
        image::Luma([(z * 1e3).round().clamp(0.0, 65535.0) as u16])
    });
    save(format!("{stem}.depth.png"), depth.into())?;
    Ok(())
}

/// Where frames come from.
#[derive(Clone, Debug, PartialEq)]
pub enum InputSource {
    Preset(SceneKind),
    Directory(PathBuf),
}

impl FromStr for InputSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.strip_prefix("preset:") {
            Some(name) => SceneKind::from_name(name)
                .map(Self::Preset)
                .ok_or_else(|| format!("unknown preset '{name}'")),
            None => Ok(Self::Directory(PathBuf::from(s))),
        }
    }
}

type FrameIter = Box<dyn Iterator<Item = Result<FrameInput, PipelineError>> + Send>;

pub struct OpenedInput {
    pub intrinsics: CameraIntrinsics,
    pub scene: Option<Arc<SyntheticScene>>,
    pub frames: FrameIter,
}

/// Resolves an input source into a lazy frame stream.
pub fn open_input(
    source: &InputSource,
    cfg: &PipelineConfig,
) -> Result<OpenedInput, PipelineError> {
    let flow_source = cfg.flow_source.unwrap_or(match source {
        InputSource::Preset(_) => FlowSource::GroundTruth,
        InputSource::Directory(_) => FlowSource::Files,
    });
    let denoise = (cfg.denoise_sigma > 0.0).then_some(cfg.denoise_sigma);
    match source {
        InputSource::Preset(kind) => {
            if flow_source == FlowSource::Files {
                return Err(PipelineError::Config(
                    "flow source 'files' needs a directory input".into(),
                ));
            }
            let scene = match cfg.frames {
                Some(n) => SyntheticScene::preset_with_frames(*kind, n),
                None => SyntheticScene::preset(*kind),
            };
            if scene.num_labels != cfg.num_labels {
                return Err(PipelineError::Config(format!(
                    "presets use {} label classes, config has {}",
                    scene.num_labels, cfg.num_labels
                )));
            }
            let k = SyntheticScene::default_intrinsics();
            let noise = NoiseConfig {
                depth_std: cfg.depth_noise,
                label_flip_fraction: cfg.label_flip_fraction,
                erase_class_after_first: cfg.erase_class,
                seed: cfg.seed,
            };
            let ingest = IngestConfig {
                // Filtering biases noise-free depth near edges.
                denoise_sigma: if cfg.depth_noise > 0.0 { denoise } else { None },
                max_depth_jump: cfg.max_depth_jump,
                num_labels: cfg.num_labels,
            };
            let frames = scene.frames;
            let stream = generate_synthetic(scene, k, noise)?;
            let scene = Arc::clone(stream.scene());
            let iter = (0..frames).map(move |i| {
                let f = stream.render_frame(i)?;
                let meas = MeasurementFrame::build(&f.raw, stream.intrinsics(), &ingest)?;
                Ok(FrameInput {
                    meas,
                    flow: f.flow,
                    anchors: Some(f.truth.anchors),
                })
            });
            Ok(OpenedInput {
                intrinsics: k,
                scene: Some(scene),
                frames: Box::new(iter),
            })
        }
        InputSource::Directory(dir) => {
            if flow_source == FlowSource::GroundTruth {
                return Err(PipelineError::Config(
                    "ground-truth flow is only available for presets".into(),
                ));
            }
            let ingest = IngestConfig {
                denoise_sigma: denoise,
                max_depth_jump: cfg.max_depth_jump,
                num_labels: cfg.num_labels,
            };
            let reader = load_sequence(dir, &ingest)?;
            let k = *reader.intrinsics();
            let limit = cfg.frames.unwrap_or(usize::MAX);
            let iter = reader.take(limit).map(|r| {
                let (meas, flow) = r?;
                Ok(FrameInput {
                    meas,
                    flow,
                    anchors: None,
                })
            });
            Ok(OpenedInput {
                intrinsics: k,
                scene: None,
                frames: Box::new(iter),
            })
        }
    }
}

/// Runs a whole sequence. Frame `t + 1` is loaded on a separate thread while
/// frame `t` is processed. With an output directory, writes `metrics.jsonl`
/// and the configured dumps.
pub fn run(
    cfg: &PipelineConfig,
    source: &InputSource,
    output: Option<&Path>,
    mut on_frame: impl FnMut(&Pipeline, &FrameOutput),
) -> Result<Vec<FrameMetrics>, PipelineError> {
    let opened = open_input(source, cfg)?;
    let mut pipeline = Pipeline::new(cfg.clone(), opened.intrinsics, opened.scene)?;
    let mut metrics_file = match output {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|source| PipelineError::Output {
                path: dir.to_path_buf(),
                source,
            })?;
            let path = dir.join("metrics.jsonl");
            let f = File::create(&path).map_err(|source| PipelineError::Output { path, source })?;
            Some(BufWriter::new(f))
        }
        None => None,
    };

    let mut all = Vec::new();
    let mut frames = opened.frames;
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel::<Result<FrameInput, PipelineError>>(1);
        scope.spawn(move || {
            for item in frames.by_ref() {
                let stop = item.is_err();
                if tx.send(item).is_err() || stop {
                    break;
                }
            }
        });
        for item in rx {
            let input = item?;
            let out = pipeline.process(&input)?;
            log::info!(
                "frame {}: {} surfels, {} nodes, {} correspondences",
                out.metrics.frame,
                out.metrics.surfels,
                out.metrics.nodes,
                out.metrics.correspondences
            );
            if let Some(dir) = output {
                pipeline.write_dumps(dir, &out)?;
            }
            if let Some(f) = metrics_file.as_mut() {
                let line = serde_json::to_string(&out.metrics).expect("metrics serialize");
                writeln!(f, "{line}").map_err(|source| PipelineError::Output {
                    path: output.unwrap().join("metrics.jsonl"),
                    source,
                })?;
            }
            on_frame(&pipeline, &out);
            all.push(out.metrics);
        }
        Ok::<(), PipelineError>(())
    })?;
    if let (Some(mut f), Some(dir)) = (metrics_file, output) {
        f.flush().map_err(|source| PipelineError::Output {
            path: dir.join("metrics.jsonl"),
            source,
        })?;
    }
    Ok(all)
}
