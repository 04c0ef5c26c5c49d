//! Deterministic procedural generator of multi-view pseudo-angiographic
//! studies with ground-truth scores.
//!
//! Each study has a hidden severity per vessel in [0, 1]. Views render a
//! dark curvilinear pseudo-vessel over background noise, pulsating with a
//! sinusoidal contraction cycle at the configured frame rate. With
//! probability `view_informativeness` a view of a diseased vessel shows the
//! lesion: a local constriction whose width loss and contrast fade are
//! proportional to severity. At least one view per diseased vessel is
//! forced informative, so every nonzero label is visible somewhere in the
//! study; the rest of the views may be uninformative, which is exactly the
//! view-selection problem the fusion heads must solve.
//!
//! Ground-truth scores are a linear map of severity, rounded to one
//! decimal: `score = severity * score_max`. Generation is a pure function
//! of (config, seed): per-study seeds derive from a hash of the dataset
//! seed and the study index, so studies can be generated in any order or in
//! parallel with byte-identical output.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::study::{
    save_manifest, save_view_frames, Dominance, Labels, Manifest, Study, StudyRecord, Vessel,
    View, ViewRecord,
};
use crate::Result;

/// Generator parameters. All fields have defaults so a config file only
/// needs to override what it cares about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_studies: usize,
    /// Inclusive range of RCA views per study.
    pub views_rca: (usize, usize),
    /// Inclusive range of LCA views per study.
    pub views_lca: (usize, usize),
    /// Inclusive range of frames per view.
    pub frames: (usize, usize),
    pub height: usize,
    pub width: usize,
    /// Target share of studies with total score 0.
    pub zero_fraction_total: f64,
    /// Target share of studies with RCA score 0.
    pub zero_fraction_rca: f64,
    /// Target share of studies with LCA score 0.
    pub zero_fraction_lca: f64,
    pub score_max_rca: f64,
    pub score_max_lca: f64,
    /// Probability that a view of a diseased vessel renders the lesion.
    pub view_informativeness: f64,
    /// Smallest severity drawn for a diseased vessel.
    pub min_severity: f64,
    /// Share of left-dominant studies (affects RCA rendering only).
    pub left_dominance_fraction: f64,
    /// Share of studies tagged with a prior bypass.
    pub bypass_fraction: f64,
    pub frame_rate: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_studies: 0,
            views_rca: (1, 3),
            views_lca: (3, 5),
            frames: (20, 60),
            height: 64,
            width: 64,
            zero_fraction_total: 0.52,
            zero_fraction_rca: 0.883,
            zero_fraction_lca: 0.65,
            score_max_rca: 23.0,
            score_max_lca: 61.0,
            view_informativeness: 0.6,
            min_severity: 0.1,
            left_dominance_fraction: 0.3,
            bypass_fraction: 0.1,
            frame_rate: 15,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("zero_fraction_total", self.zero_fraction_total),
            ("zero_fraction_rca", self.zero_fraction_rca),
            ("zero_fraction_lca", self.zero_fraction_lca),
            ("view_informativeness", self.view_informativeness),
            ("left_dominance_fraction", self.left_dominance_fraction),
            ("bypass_fraction", self.bypass_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        for (name, (lo, hi)) in [
            ("views_rca", self.views_rca),
            ("views_lca", self.views_lca),
            ("frames", self.frames),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is empty")));
            }
        }
        if self.score_max_rca <= 0.0 || self.score_max_lca <= 0.0 {
            return Err(Error::Config("score maxima must be positive".into()));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config("height and width must be >= 16".into()));
        }
        if !(0.0..1.0).contains(&self.min_severity) {
            return Err(Error::Config("min_severity must be in [0, 1)".into()));
        }
        if self.frame_rate == 0 {
            return Err(Error::Config("frame_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Hidden per-vessel lesion severity in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeverityLatent {
    pub rca: f64,
    pub lca: f64,
}

/// Ground-truth score for a severity: linear in severity, `score_max` at
/// severity 1, rounded to one decimal.
pub fn severity_to_score(severity: f64, vessel: Vessel, config: &SynthConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::SeverityOutOfRange(severity));
    }
    let max = match vessel {
        Vessel::Rca => config.score_max_rca,
        Vessel::Lca => config.score_max_lca,
    };
    Ok(round1(severity * max))
}

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

/// Per-study seed: a splitmix64 hash of the dataset seed and study index.
pub fn study_seed(seed: u64, study_index: u64) -> u64 {
    let mut z = seed ^ study_index.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Sample the zero/nonzero state and severities for one study.
///
/// The total-zero share is sampled first and always matches
/// `zero_fraction_total`. Conditional on a nonzero total, the three states
/// (only LCA diseased, only RCA diseased, both diseased) get weights
/// `zero_fraction_rca - zero_fraction_total`, `zero_fraction_lca -
/// zero_fraction_total` and the remainder, clamped at zero and
/// renormalized. With the default targets the marginals are infeasible
/// jointly (they sum past 1), so the renormalization lands the per-vessel
/// zero shares within about one point of their targets while the total
/// share stays exact.
fn sample_severity(config: &SynthConfig, rng: &mut ChaCha8Rng) -> SeverityLatent {
    let u: f64 = rng.gen();
    let u_state: f64 = rng.gen();
    // Severity draws happen unconditionally to keep the stream layout fixed.
    let s_rca_raw = rng.gen_range(config.min_severity..=1.0);
    let s_lca_raw = rng.gen_range(config.min_severity..=1.0);
    if u < config.zero_fraction_total {
        return SeverityLatent { rca: 0.0, lca: 0.0 };
    }
    let a = (config.zero_fraction_rca - config.zero_fraction_total).max(0.0); // only LCA
    let b = (config.zero_fraction_lca - config.zero_fraction_total).max(0.0); // only RCA
    let c = (1.0 - config.zero_fraction_total - a - b).max(0.0); // both
    let sum = a + b + c;
    let (a, b) = if sum > 0.0 {
        (a / sum, b / sum)
    } else {
        (0.0, 0.0) // degenerate: everything lands in the "both" state
    };
    if u_state < a {
        SeverityLatent {
            rca: 0.0,
            lca: s_lca_raw,
        }
    } else if u_state < a + b {
        SeverityLatent {
            rca: s_rca_raw,
            lca: 0.0,
        }
    } else {
        SeverityLatent {
            rca: s_rca_raw,
            lca: s_lca_raw,
        }
    }
}

/// Per-view slice of the study plan.
#[derive(Debug, Clone)]
struct ViewPlan {
    vessel: Vessel,
    informative: bool,
    render_seed: u64,
    n_frames: usize,
}

/// Everything the renderer needs for one view.
#[derive(Debug, Clone)]
struct RenderParams {
    height: usize,
    width: usize,
    n_frames: usize,
    frame_rate: u32,
    severity: f64,
    informative: bool,
    /// Dominance shaping applies to RCA views only.
    dominance: Dominance,
    vessel: Vessel,
}

const VESSEL_INTENSITY: f64 = 40.0;
const BACKGROUND_BASE: f64 = 170.0;
/// Fraction of the local width removed at severity 1.
const CONSTRICTION_DEPTH: f64 = 0.9;
/// Contrast fade added at the constriction center at severity 1. Stamping
/// only darkens, so a fade past the background level makes the lumen
/// disappear there, like a total occlusion.
const CONSTRICTION_FADE: f64 = 160.0;
/// Arc-length half-width of the constriction bump.
const CONSTRICTION_EXTENT: f64 = 0.15;
/// Heart rate of the contraction cycle, in Hz.
const PULSE_HZ: f64 = 1.2;

/// Cubic Lagrange interpolation through values at tau = 0, 1/3, 2/3, 1.
fn lagrange4(c: &[f64; 4], tau: f64) -> f64 {
    let nodes = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    let mut out = 0.0;
    for i in 0..4 {
        let mut l = 1.0;
        for j in 0..4 {
            if i != j {
                l *= (tau - nodes[j]) / (nodes[i] - nodes[j]);
            }
        }
        out += c[i] * l;
    }
    out
}

fn stamp_disc(frames: &mut Array3<u8>, t: usize, cy: f64, cx: f64, radius: f64, intensity: f64) {
    let (_, h, w) = frames.dim();
    let r_ceil = radius.ceil() as isize;
    let cy_i = cy.round() as isize;
    let cx_i = cx.round() as isize;
    let value = intensity.clamp(0.0, 255.0) as u8;
    for dy in -r_ceil..=r_ceil {
        for dx in -r_ceil..=r_ceil {
            let y = cy_i + dy;
            let x = cx_i + dx;
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                continue;
            }
            let dist2 = (y as f64 - cy) * (y as f64 - cy) + (x as f64 - cx) * (x as f64 - cx);
            if dist2 <= radius * radius {
                let px = &mut frames[[t, y as usize, x as usize]];
                if value < *px {
                    *px = value;
                }
            }
        }
    }
}

/// Render one view. The same seed with `informative` toggled renders the
/// identical scene with and without the lesion.
fn render_view(params: &RenderParams, seed: u64) -> Array3<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (params.height, params.width);
    let hf = h as f64;
    let wf = w as f64;

    // Scene draws, in fixed order.
    let ctrl: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.25 * wf..0.75 * wf));
    let constrict_tau: f64 = rng.gen_range(0.3..0.7);
    let pulse_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let sway_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let width_jitter: f64 = rng.gen_range(0.9..1.1);
    let shade_cx: f64 = rng.gen_range(0.0..wf);
    let shade_cy: f64 = rng.gen_range(0.0..hf);

    let base_width = (hf / 13.0).max(2.5) * width_jitter;
    let is_rca = params.vessel == Vessel::Rca;
    let left_dominant = params.dominance == Dominance::Left;
    // Left dominance: the RCA is shorter and slightly thinner; right
    // dominance: full length plus a distal branch.
    let tau_end = if is_rca && left_dominant { 0.68 } else { 1.0 };
    let width_scale = if is_rca && left_dominant { 0.85 } else { 1.0 };
    let has_branch = is_rca && !left_dominant;

    let mut frames = Array3::zeros((params.n_frames, h, w));
    let steps = 3 * h;
    for t in 0..params.n_frames {
        let time = t as f64 / params.frame_rate as f64;
        let pulse = 1.0 + 0.15 * (std::f64::consts::TAU * PULSE_HZ * time + pulse_phase).sin();
        let sway = 1.5 * (std::f64::consts::TAU * PULSE_HZ * time + sway_phase).sin();

        // Background: smooth radial shading plus per-pixel noise.
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 - shade_cx) / wf;
                let dy = (y as f64 - shade_cy) / hf;
                let shade = 30.0 * (dx * dx + dy * dy).sqrt();
                let noise: f64 = rng.gen_range(-18.0..18.0);
                frames[[t, y, x]] = (BACKGROUND_BASE - shade + noise).clamp(0.0, 255.0) as u8;
            }
        }

        // Main vessel.
        for s in 0..=steps {
            let tau = tau_end * s as f64 / steps as f64;
            let cy = tau * (hf - 1.0);
            let cx = lagrange4(&ctrl, tau) + sway;
            let mut width_mul = 1.0;
            let mut fade = 0.0;
            if params.informative && params.severity > 0.0 {
                let u = (tau - constrict_tau) / CONSTRICTION_EXTENT;
                let bump = (-2.5 * u * u).exp();
                width_mul = 1.0 - CONSTRICTION_DEPTH * params.severity * bump;
                fade = CONSTRICTION_FADE * params.severity * bump;
            }
            let radius = (base_width * width_scale * pulse * width_mul / 2.0).max(0.35);
            stamp_disc(&mut frames, t, cy, cx, radius, VESSEL_INTENSITY + fade);
        }

        // Distal branch on right-dominant RCA views.
        if has_branch {
            let tau_b = 0.55;
            let by = tau_b * (hf - 1.0);
            let bx = lagrange4(&ctrl, tau_b) + sway;
            let dir = if bx < wf / 2.0 { 1.0 } else { -1.0 };
            let branch_steps = steps / 3;
            for s in 0..=branch_steps {
                let u = s as f64 / branch_steps as f64;
                let cy = by + u * (hf - 1.0 - by) * 0.8;
                let cx = bx + dir * u * 0.3 * wf * (0.4 + 0.6 * u);
                let radius = (base_width * pulse * 0.5 / 2.0).max(0.3);
                stamp_disc(&mut frames, t, cy, cx, radius, VESSEL_INTENSITY + 15.0);
            }
        }
    }
    frames
}

/// Draw plan for one study; a fixed draw order keeps the random stream
/// stable no matter how the result is consumed.
struct StudyPlan {
    severity: SeverityLatent,
    dominance: Dominance,
    bypass: bool,
    views: Vec<ViewPlan>,
}

fn plan_study(config: &SynthConfig, rng: &mut ChaCha8Rng) -> StudyPlan {
    let dominance = if rng.gen::<f64>() < config.left_dominance_fraction {
        Dominance::Left
    } else {
        Dominance::Right
    };
    let severity = sample_severity(config, rng);
    let bypass = rng.gen::<f64>() < config.bypass_fraction;
    let n_rca = rng.gen_range(config.views_rca.0..=config.views_rca.1);
    let n_lca = rng.gen_range(config.views_lca.0..=config.views_lca.1);

    let mut views = Vec::with_capacity(n_rca + n_lca);
    for (vessel, count, sev) in [
        (Vessel::Rca, n_rca, severity.rca),
        (Vessel::Lca, n_lca, severity.lca),
    ] {
        let start = views.len();
        for _ in 0..count {
            let informative = rng.gen::<f64>() < config.view_informativeness;
            let render_seed: u64 = rng.gen();
            let n_frames = rng.gen_range(config.frames.0..=config.frames.1);
            views.push(ViewPlan {
                vessel,
                informative,
                render_seed,
                n_frames,
            });
        }
        // A diseased vessel must be visible in at least one view.
        if sev > 0.0 && !views[start..].iter().any(|v| v.informative) {
            views[start].informative = true;
        }
    }
    StudyPlan {
        severity,
        dominance,
        bypass,
        views,
    }
}

/// Generate one study in memory. Deterministic in (config.seed, study_index).
pub fn gen_study(config: &SynthConfig, study_index: usize) -> Result<Study> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(study_seed(config.seed, study_index as u64));
    let plan = plan_study(config, &mut rng);

    let rca_score = severity_to_score(plan.severity.rca, Vessel::Rca, config)?;
    let lca_score = severity_to_score(plan.severity.lca, Vessel::Lca, config)?;
    let views = plan
        .views
        .iter()
        .map(|vp| {
            let severity = match vp.vessel {
                Vessel::Rca => plan.severity.rca,
                Vessel::Lca => plan.severity.lca,
            };
            let frames = render_view(
                &RenderParams {
                    height: config.height,
                    width: config.width,
                    n_frames: vp.n_frames,
                    frame_rate: config.frame_rate,
                    severity,
                    informative: vp.informative,
                    dominance: plan.dominance,
                    vessel: vp.vessel,
                },
                vp.render_seed,
            );
            View {
                vessel: vp.vessel,
                frames,
                frame_rate: config.frame_rate,
            }
        })
        .collect();

    Ok(Study {
        study_id: format!("synth_{study_index:05}"),
        views,
        labels: Labels {
            syntax_total: Some(round1(rca_score + lca_score)),
            syntax_rca: Some(rca_score),
            syntax_lca: Some(lca_score),
            dominance: Some(plan.dominance),
            bypass: plan.bypass,
        },
    })
}

/// Generate the full dataset in the on-disk study layout and return the
/// manifest (also written to `out_dir/manifest.json`).
pub fn gen_dataset(config: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut records = Vec::with_capacity(config.n_studies);
    for index in 0..config.n_studies {
        let study = gen_study(config, index)?;
        let mut view_records = Vec::with_capacity(study.views.len());
        for (v, view) in study.views.iter().enumerate() {
            let rel = format!("studies/{}/view_{v:02}", study.study_id);
            save_view_frames(&out_dir.join(&rel), &view.frames)?;
            view_records.push(ViewRecord {
                vessel: view.vessel,
                path: rel,
                frame_rate: view.frame_rate,
            });
        }
        records.push(StudyRecord {
            id: study.study_id.clone(),
            views: view_records,
            labels: study.labels.clone(),
        });
    }
    let manifest = Manifest {
        version: Manifest::CURRENT_VERSION,
        studies: records,
    };
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Label-level summary of a manifest, as printed by the synth command.
#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub n_studies: usize,
    pub zero_total_share: f64,
    pub zero_rca_share: f64,
    pub zero_lca_share: f64,
    pub mean_views_rca: f64,
    pub mean_views_lca: f64,
    pub left_dominant_share: f64,
}

pub fn summarize(manifest: &Manifest) -> DatasetSummary {
    let n = manifest.studies.len().max(1);
    let zero = |get: fn(&Labels) -> Option<f64>| {
        manifest
            .studies
            .iter()
            .filter(|s| get(&s.labels) == Some(0.0))
            .count() as f64
            / n as f64
    };
    let mean_views = |vessel: Vessel| {
        manifest
            .studies
            .iter()
            .map(|s| s.views.iter().filter(|v| v.vessel == vessel).count())
            .sum::<usize>() as f64
            / n as f64
    };
    DatasetSummary {
        n_studies: manifest.studies.len(),
        zero_total_share: zero(|l| l.syntax_total),
        zero_rca_share: zero(|l| l.syntax_rca),
        zero_lca_share: zero(|l| l.syntax_lca),
        mean_views_rca: mean_views(Vessel::Rca),
        mean_views_lca: mean_views(Vessel::Lca),
        left_dominant_share: manifest
            .studies
            .iter()
            .filter(|s| s.labels.dominance == Some(Dominance::Left))
            .count() as f64
            / n as f64,
    }
}
