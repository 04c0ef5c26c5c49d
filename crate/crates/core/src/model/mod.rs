//! The multi-view scoring model: per-view 3D convolutional embeddings, a
//! fusion head over the view set, and an affine output producing a
//! log-score per vessel. Study-level scores compose as
//! `total = rca + lca` after the inverse log transform.

pub mod backbone;
pub mod checkpoint;
pub mod conv;
pub mod heads;
pub mod nn;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::sampler::{view_to_clip, AugmentPolicy, Clip, DEFAULT_CLIP_LEN};
use crate::study::{views_by_vessel, Study, Vessel, View};
use crate::Result;

use backbone::{Backbone, Res3d18Net, Tiny3dNet, RES3D18_EMBED_DIM};
use heads::{AttnHead, AttnParams, FusionHead, LstmHead, MeanHead};

/// Which 3D backbone extracts per-view embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneVariant {
    /// Desk-scale 4-stage conv net; trainable on CPU.
    #[serde(rename = "tiny3d")]
    Tiny3d,
    /// 18-layer residual video network (512-d embeddings, ~32M params).
    /// Kinetics-pretrained weights are loaded from a converted checkpoint
    /// when available; fresh initialization otherwise.
    #[serde(rename = "residual3d_18_pretrained", alias = "residual3d_18")]
    Residual3d18,
}

/// Backbone hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    /// Embedding width; must be 512 for the residual backbone.
    pub embed_dim: usize,
    /// Spatial input size (height, width) the sampler resizes clips to.
    pub input_size: (usize, usize),
    /// Temporal input length.
    #[serde(default = "default_clip_len")]
    pub clip_len: usize,
}

fn default_clip_len() -> usize {
    DEFAULT_CLIP_LEN
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            variant: BackboneVariant::Tiny3d,
            embed_dim: 64,
            input_size: (112, 112),
            clip_len: DEFAULT_CLIP_LEN,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variant == BackboneVariant::Residual3d18 && self.embed_dim != RES3D18_EMBED_DIM {
            return Err(Error::Config(format!(
                "residual3d_18 produces {RES3D18_EMBED_DIM}-d embeddings, embed_dim {} does not match",
                self.embed_dim
            )));
        }
        if self.clip_len == 0 || self.input_size.0 == 0 || self.input_size.1 == 0 {
            return Err(Error::Config("zero-sized backbone input".into()));
        }
        Ok(())
    }
}

fn default_hidden_dim() -> usize {
    128
}

/// Fusion head selection. The attention head applies no positional
/// encoding, so it treats the views as an unordered set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FusionHeadConfig {
    Mean,
    Recurrent {
        #[serde(default = "default_hidden_dim")]
        hidden_dim: usize,
    },
    Attention {
        #[serde(flatten)]
        attn: AttnParams,
    },
}

impl FusionHeadConfig {
    pub fn recurrent() -> Self {
        FusionHeadConfig::Recurrent {
            hidden_dim: default_hidden_dim(),
        }
    }

    pub fn attention() -> Self {
        FusionHeadConfig::Attention {
            attn: AttnParams::default(),
        }
    }
}

/// Serializable identity of a vessel model; checked on checkpoint load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselModelConfig {
    pub vessel: Vessel,
    pub backbone: BackboneConfig,
    pub head: FusionHeadConfig,
}

/// One branch: backbone + fusion head + output affine, trained per vessel.
///
/// Parameters live in two flat vectors: `backbone_params` and `head_params`
/// (fusion weights plus the output affine). The split is what makes the
/// stage-2 backbone freeze a trivial byte-level guarantee.
#[derive(Debug, Clone)]
pub struct VesselModel {
    pub vessel: Vessel,
    pub backbone_cfg: BackboneConfig,
    pub head_cfg: FusionHeadConfig,
    pub backbone: Backbone,
    pub head: FusionHead,
    pub backbone_params: Vec<f64>,
    pub backbone_buffers: Vec<f64>,
    pub head_params: Vec<f64>,
}

pub(crate) fn build_backbone(cfg: &BackboneConfig) -> Result<Backbone> {
    cfg.validate()?;
    Ok(match cfg.variant {
        BackboneVariant::Tiny3d => Backbone::Tiny(Tiny3dNet::new(cfg.embed_dim)?),
        BackboneVariant::Residual3d18 => Backbone::Res18(Res3d18Net::new()),
    })
}

pub(crate) fn build_head(cfg: &FusionHeadConfig, embed_dim: usize) -> (FusionHead, nn::ParamLayout) {
    let mut layout = nn::ParamLayout::new();
    let head = match cfg {
        FusionHeadConfig::Mean => FusionHead::Mean(MeanHead::new(&mut layout, embed_dim)),
        FusionHeadConfig::Recurrent { hidden_dim } => {
            FusionHead::Recurrent(LstmHead::new(&mut layout, embed_dim, *hidden_dim))
        }
        FusionHeadConfig::Attention { attn } => {
            FusionHead::Attention(AttnHead::new(&mut layout, embed_dim, *attn))
        }
    };
    (head, layout)
}

impl VesselModel {
    /// Fresh model with deterministic seed-derived initialization.
    pub fn new(
        vessel: Vessel,
        backbone_cfg: BackboneConfig,
        head_cfg: FusionHeadConfig,
        seed: u64,
    ) -> Result<Self> {
        let backbone = build_backbone(&backbone_cfg)?;
        let (head, head_layout) = build_head(&head_cfg, backbone.embed_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (backbone_params, backbone_buffers) = backbone.init(&mut rng);
        let mut head_params = vec![0.0; head_layout.total_len()];
        head.init(&mut head_params, &mut rng);
        Ok(VesselModel {
            vessel,
            backbone_cfg,
            head_cfg,
            backbone,
            head,
            backbone_params,
            backbone_buffers,
            head_params,
        })
    }

    pub fn config(&self) -> VesselModelConfig {
        VesselModelConfig {
            vessel: self.vessel,
            backbone: self.backbone_cfg,
            head: self.head_cfg,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.backbone.embed_dim()
    }

    /// Preprocess one view into this model's input clip (no augmentation).
    pub fn clip_for(&self, view: &View) -> Result<Clip> {
        let (h, w) = self.backbone_cfg.input_size;
        view_to_clip(view, self.backbone_cfg.clip_len, h, w, AugmentPolicy::None, 0)
    }

    fn check_clip(&self, clip: &Clip) -> Result<()> {
        let (h, w) = self.backbone_cfg.input_size;
        let expected = (3, self.backbone_cfg.clip_len, h, w);
        if clip.frames.dim() != expected {
            return Err(Error::ShapeMismatch(format!(
                "clip shape {:?} does not match backbone input {:?}",
                clip.frames.dim(),
                expected
            )));
        }
        Ok(())
    }

    /// Per-view embedding in inference mode (deterministic, batch-free).
    pub fn embed_view(&self, clip: &Clip) -> Result<Array1<f64>> {
        self.check_clip(clip)?;
        Ok(self
            .backbone
            .forward_eval(&self.backbone_params, &self.backbone_buffers, &clip.frames))
    }

    /// Embeddings for a batch of clips; element i equals the single-clip
    /// result for clip i.
    pub fn embed_batch(&self, clips: &[Clip]) -> Result<Vec<Array1<f64>>> {
        clips.iter().map(|c| self.embed_view(c)).collect()
    }

    /// Fuse an ordered list of embeddings into one vector.
    pub fn fuse(&self, embeddings: &[Array1<f64>]) -> Result<Array1<f64>> {
        let embs = stack_embeddings(embeddings)?;
        self.head.fuse(&self.head_params, &embs)
    }

    /// Raw model output (log-score for regression, logit for dominance)
    /// for the given same-vessel views.
    pub fn predict_raw(&self, views: &[&View]) -> Result<f64> {
        if views.is_empty() {
            return Err(Error::MissingVesselViews {
                vessel: self.vessel,
            });
        }
        let embeddings = views
            .iter()
            .map(|v| self.embed_view(&self.clip_for(v)?))
            .collect::<Result<Vec<_>>>()?;
        let embs = stack_embeddings(&embeddings)?;
        let (y, _) = self.head.forward(&self.head_params, &embs)?;
        Ok(y)
    }
}

pub(crate) fn stack_embeddings(embeddings: &[Array1<f64>]) -> Result<Array2<f64>> {
    if embeddings.is_empty() {
        return Err(Error::ShapeMismatch("empty embedding list".into()));
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::ShapeMismatch(
            "embeddings have inconsistent dimensions".into(),
        ));
    }
    let mut out = Array2::zeros((embeddings.len(), dim));
    for (i, e) in embeddings.iter().enumerate() {
        out.row_mut(i).assign(e);
    }
    Ok(out)
}

/// Log-space training target: t = ln(1 + score). Finite for the zero
/// scores that dominate the label distribution.
pub fn score_transform(score: f64) -> Result<f64> {
    if score < 0.0 || !score.is_finite() {
        return Err(Error::NegativeScore(score));
    }
    Ok((1.0 + score).ln())
}

/// Inverse of [`score_transform`] with clamping to the valid score range:
/// max(0, exp(t) - 1).
pub fn inverse_transform(t: f64) -> f64 {
    (t.exp() - 1.0).max(0.0)
}

/// Predicted log-score for one vessel branch.
pub fn predict_vessel(views: &[&View], model: &VesselModel) -> Result<f64> {
    debug_assert!(views.iter().all(|v| v.vessel == model.vessel));
    model.predict_raw(views)
}

/// Probability of left dominance from the RCA views.
pub fn predict_dominance(rca_views: &[&View], model: &VesselModel) -> Result<f64> {
    Ok(nn::sigmoid(model.predict_raw(rca_views)?))
}

/// Both vessel branches plus the fitted zero/nonzero decision threshold.
#[derive(Debug, Clone)]
pub struct StudyPredictor {
    pub rca: VesselModel,
    pub lca: VesselModel,
    /// Total-score threshold for the nonzero flag, fitted per fold.
    pub threshold: f64,
}

/// Study-level prediction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyPrediction {
    pub score_rca: f64,
    pub score_lca: f64,
    pub score_total: f64,
    pub nonzero: bool,
    /// Vessels with no views in the study; their score fell back to 0.
    pub missing_vessels: Vec<Vessel>,
}

/// Predict a study: per-vessel scores via max(0, exp(log) - 1), total as
/// their sum, and the nonzero flag from the fitted threshold. A vessel with
/// no views falls back to score 0 with a warning (0 is the RCA label mode).
pub fn predict_study(study: &Study, predictor: &StudyPredictor) -> Result<StudyPrediction> {
    let mut missing = Vec::new();
    let mut scores = [0.0f64; 2];
    for (slot, model) in [(0, &predictor.rca), (1, &predictor.lca)] {
        let views = views_by_vessel(study, model.vessel);
        if views.is_empty() {
            log::warn!(
                "study {}: no {} views, falling back to score 0",
                study.study_id,
                model.vessel
            );
            missing.push(model.vessel);
        } else {
            let log_score = model.predict_raw(&views)?;
            scores[slot] = inverse_transform(log_score);
        }
    }
    let total = scores[0] + scores[1];
    Ok(StudyPrediction {
        score_rca: scores[0],
        score_lca: scores[1],
        score_total: total,
        nonzero: total > predictor.threshold,
        missing_vessels: missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            variant: BackboneVariant::Tiny3d,
            embed_dim: 16,
            input_size: (16, 16),
            clip_len: 4,
        }
    }

    fn test_view(vessel: Vessel, fill: u8) -> View {
        let mut frames = Array3::from_elem((6, 16, 16), fill);
        for t in 0..6 {
            for y in 0..16 {
                for x in 0..16 {
                    frames[[t, y, x]] = fill.wrapping_add((t * 31 + y * 7 + x) as u8);
                }
            }
        }
        View {
            vessel,
            frames,
            frame_rate: 15,
        }
    }

    #[test]
    fn score_transform_values() {
        assert_eq!(score_transform(0.0).unwrap(), 0.0);
        assert!((score_transform(10.0).unwrap() - 11.0f64.ln()).abs() < 1e-12);
        assert!((score_transform(10.0).unwrap() - 2.3979).abs() < 1e-4);
        assert!(matches!(
            score_transform(-0.1),
            Err(Error::NegativeScore(_))
        ));
    }

    #[test]
    fn transform_round_trip() {
        for s in [0.0, 0.5, 10.0, 23.0, 61.0, 67.0, 100.0] {
            let t = score_transform(s).unwrap();
            assert!((inverse_transform(t) - s).abs() < 1e-9, "score {s}");
        }
    }

    #[test]
    fn inverse_transform_clamps_negative_logs() {
        let v = inverse_transform(-0.5);
        assert_eq!(v, 0.0);
        assert_eq!(inverse_transform(0.0), 0.0);
    }

    #[test]
    fn identical_clips_embed_identically() {
        let model =
            VesselModel::new(Vessel::Rca, tiny_cfg(), FusionHeadConfig::Mean, 7).unwrap();
        let view = test_view(Vessel::Rca, 40);
        let clip = model.clip_for(&view).unwrap();
        let e1 = model.embed_view(&clip).unwrap();
        let e2 = model.embed_view(&clip).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.len(), 16);
    }

    #[test]
    fn batch_embeddings_equal_single_results() {
        let model =
            VesselModel::new(Vessel::Rca, tiny_cfg(), FusionHeadConfig::Mean, 7).unwrap();
        let clips: Vec<Clip> = (0..3)
            .map(|i| model.clip_for(&test_view(Vessel::Rca, 30 + i * 50)).unwrap())
            .collect();
        let batch = model.embed_batch(&clips).unwrap();
        for (i, clip) in clips.iter().enumerate() {
            assert_eq!(batch[i], model.embed_view(clip).unwrap());
        }
    }

    #[test]
    fn clip_shape_mismatch_errors() {
        let model =
            VesselModel::new(Vessel::Rca, tiny_cfg(), FusionHeadConfig::Mean, 7).unwrap();
        let mut clip = model.clip_for(&test_view(Vessel::Rca, 10)).unwrap();
        clip.frames = ndarray::Array4::zeros((3, 8, 16, 16));
        assert!(matches!(
            model.embed_view(&clip),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn duplicate_view_mean_head_prediction_unchanged() {
        let model =
            VesselModel::new(Vessel::Rca, tiny_cfg(), FusionHeadConfig::Mean, 11).unwrap();
        let view = test_view(Vessel::Rca, 90);
        let single = model.predict_raw(&[&view]).unwrap();
        let doubled = model.predict_raw(&[&view, &view]).unwrap();
        assert!((single - doubled).abs() < 1e-12);
    }

    #[test]
    fn empty_view_list_errors() {
        let model =
            VesselModel::new(Vessel::Rca, tiny_cfg(), FusionHeadConfig::Mean, 11).unwrap();
        assert!(matches!(
            model.predict_raw(&[]),
            Err(Error::MissingVesselViews { .. })
        ));
    }

    #[test]
    fn predict_study_composes_and_clamps() {
        let cfg = tiny_cfg();
        let predictor = StudyPredictor {
            rca: VesselModel::new(Vessel::Rca, cfg, FusionHeadConfig::Mean, 1).unwrap(),
            lca: VesselModel::new(Vessel::Lca, cfg, FusionHeadConfig::Mean, 2).unwrap(),
            threshold: 0.5,
        };
        let study = Study {
            study_id: "p1".into(),
            views: vec![test_view(Vessel::Rca, 10), test_view(Vessel::Lca, 200)],
            labels: crate::study::Labels::empty(),
        };
        let pred = predict_study(&study, &predictor).unwrap();
        assert!(pred.score_rca >= 0.0);
        assert!(pred.score_lca >= 0.0);
        assert_eq!(pred.score_total, pred.score_rca + pred.score_lca);
        assert_eq!(pred.nonzero, pred.score_total > 0.5);
        assert!(pred.missing_vessels.is_empty());
    }

    #[test]
    fn predict_study_missing_vessel_falls_back_to_zero() {
        let cfg = tiny_cfg();
        let predictor = StudyPredictor {
            rca: VesselModel::new(Vessel::Rca, cfg, FusionHeadConfig::Mean, 1).unwrap(),
            lca: VesselModel::new(Vessel::Lca, cfg, FusionHeadConfig::Mean, 2).unwrap(),
            threshold: 0.5,
        };
        let study = Study {
            study_id: "p1".into(),
            views: vec![test_view(Vessel::Lca, 200)],
            labels: crate::study::Labels::empty(),
        };
        let pred = predict_study(&study, &predictor).unwrap();
        assert_eq!(pred.score_rca, 0.0);
        assert_eq!(pred.missing_vessels, vec![Vessel::Rca]);
    }

    #[test]
    fn dominance_logit_zero_gives_half() {
        let mut model =
            VesselModel::new(Vessel::Rca, tiny_cfg(), FusionHeadConfig::Mean, 3).unwrap();
        // Zero the head so the logit is exactly 0.
        model.head_params.iter_mut().for_each(|p| *p = 0.0);
        let view = test_view(Vessel::Rca, 77);
        let p = predict_dominance(&[&view], &model).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn residual_backbone_requires_512_embed() {
        let cfg = BackboneConfig {
            variant: BackboneVariant::Residual3d18,
            embed_dim: 64,
            input_size: (32, 32),
            clip_len: 4,
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn head_config_serde_round_trip() {
        for cfg in [
            FusionHeadConfig::Mean,
            FusionHeadConfig::recurrent(),
            FusionHeadConfig::attention(),
        ] {
            let text = serde_json::to_string(&cfg).unwrap();
            let back: FusionHeadConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, cfg);
        }
        let parsed: FusionHeadConfig = serde_json::from_str(r#"{"kind":"recurrent"}"#).unwrap();
        assert_eq!(parsed, FusionHeadConfig::recurrent());
    }
}
