//! Classifiers (KNN, LDA, CNN), evaluation, persistence and the
//! hyperparameter sweep.

pub mod cnn;
mod io;
pub mod knn;
pub mod lda;
pub mod sweep;

pub use cnn::{
    cnn_build, cnn_forward, cnn_train, cnn_transfer, loss, loss_and_gradients, CnnParams, CnnSpec, Gradients, Mode,
    TrainConfig, TrainHistory,
};
pub use io::{decode_model, encode_model, load_model, save_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use knn::{knn_train, KnnModel};
pub use lda::{lda_fit, LdaModel, DEFAULT_SHRINKAGE};
pub use sweep::{run_sweep, SweepConfig, SweepDataset, SweepReport, SweepRow};

use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

use crate::dataset::{ClassLabel, DatasetError, LabeledExample, Labeled};
use crate::features::{apply_norm, fit_norm, FeatureError, FeatureVector, NormStats};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("k = {k} but only {stored} examples are stored")]
    KTooLarge { k: usize, stored: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need at least two classes with two examples each")]
    TooFewClasses,
    #[error("pooled covariance is singular even after shrinkage")]
    SingularCovariance,
    #[error("loss became non-finite")]
    DivergenceDetected,
    #[error("length {len} is shorter than window {kernel}")]
    ShapeUnderflow { len: usize, kernel: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("model kind {0} does not support this operation")]
    Unsupported(ModelKind),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Flattened classifier input.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub label: ClassLabel,
    pub t: f64,
}

impl Labeled for Example {
    fn label(&self) -> ClassLabel {
        self.label
    }
    fn t(&self) -> f64 {
        self.t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Knn,
    Lda,
    Cnn,
}

impl ModelKind {
    pub fn tag(self) -> u8 {
        match self {
            ModelKind::Knn => 1,
            ModelKind::Lda => 2,
            ModelKind::Cnn => 3,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            1 => Some(ModelKind::Knn),
            2 => Some(ModelKind::Lda),
            3 => Some(ModelKind::Cnn),
            _ => None,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Knn => "knn",
            ModelKind::Lda => "lda",
            ModelKind::Cnn => "cnn",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "knn" => Ok(ModelKind::Knn),
            "lda" => Ok(ModelKind::Lda),
            "cnn" => Ok(ModelKind::Cnn),
            other => Err(format!("unknown model kind {other:?} (knn, lda, cnn)")),
        }
    }
}

pub const DEFAULT_K: usize = 5;

/// Hyperparameters for every family; only the fields of `kind` are used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub k: usize,
    pub shrinkage: f64,
    pub n_convs: usize,
    pub dense_len: usize,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(ModelKind::Knn)
    }
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            k: DEFAULT_K,
            shrinkage: DEFAULT_SHRINKAGE,
            n_convs: 2,
            dense_len: 200,
            train: TrainConfig::default(),
        }
    }

    pub fn cnn(n_convs: usize, dense_len: usize, train: TrainConfig) -> Self {
        Self {
            n_convs,
            dense_len,
            train,
            ..Self::new(ModelKind::Cnn)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub train_size: usize,
    pub epochs: usize,
    pub training_accuracy: f64,
    pub wall_seconds: f64,
    /// Whether this model came from transfer learning.
    #[serde(default)]
    pub transferred: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Knn(KnnModel),
    Lda(LdaModel),
    Cnn { spec: CnnSpec, params: CnnParams },
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Knn(_) => ModelKind::Knn,
            TrainedModel::Lda(_) => ModelKind::Lda,
            TrainedModel::Cnn { .. } => ModelKind::Cnn,
        }
    }
}

/// A trained model with the normalization it was fitted under. Immutable
/// after construction, so it can be shared across threads for prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub config: ModelConfig,
    pub norm: NormStats,
    pub model: TrainedModel,
    pub meta: TrainingMeta,
}

fn to_examples(norm: &NormStats, kind: ModelKind, data: &[LabeledExample]) -> Result<Vec<Example>, ModelError> {
    data.iter()
        .map(|e| {
            Ok(Example {
                x: model_input(norm, kind, &e.features)?,
                label: e.label,
                t: e.t,
            })
        })
        .collect()
}

/// Normalized input for `kind`: the full matrix for the CNN, retained
/// features only for the vector classifiers.
pub fn model_input(norm: &NormStats, kind: ModelKind, fv: &FeatureVector) -> Result<Vec<f64>, ModelError> {
    let nf = apply_norm(fv, norm)?;
    Ok(match kind {
        ModelKind::Cnn => nf.values,
        _ => norm.flatten(&nf),
    })
}

fn one_hot(c: ClassLabel) -> [f64; 4] {
    let mut p = [0.0; 4];
    p[c.index()] = 1.0;
    p
}

impl Classifier {
    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }

    pub fn input(&self, fv: &FeatureVector) -> Result<Vec<f64>, ModelError> {
        model_input(&self.norm, self.kind(), fv)
    }

    /// Class probabilities; KNN and LDA report a one-hot vector of their
    /// decision.
    pub fn predict_proba_input(&self, x: &[f64]) -> Result<[f64; 4], ModelError> {
        Ok(match &self.model {
            TrainedModel::Knn(m) => one_hot(m.predict(x)),
            TrainedModel::Lda(m) => one_hot(m.predict(x)),
            TrainedModel::Cnn { spec, params } => cnn_forward(spec, params, x, Mode::Infer)?[0],
        })
    }

    pub fn predict_input(&self, x: &[f64]) -> Result<ClassLabel, ModelError> {
        Ok(match &self.model {
            TrainedModel::Knn(m) => m.predict(x),
            TrainedModel::Lda(m) => m.predict(x),
            TrainedModel::Cnn { spec, params } => {
                let p = cnn_forward(spec, params, x, Mode::Infer)?[0];
                ClassLabel::from_index(cnn::argmax(&p)).unwrap_or_default()
            }
        })
    }

    pub fn predict_proba(&self, fv: &FeatureVector) -> Result<[f64; 4], ModelError> {
        self.predict_proba_input(&self.input(fv)?)
    }

    pub fn predict(&self, fv: &FeatureVector) -> Result<ClassLabel, ModelError> {
        self.predict_input(&self.input(fv)?)
    }

    /// Predictions for many pre-normalized inputs.
    pub fn predict_inputs(&self, xs: &[Vec<f64>]) -> Result<Vec<ClassLabel>, ModelError> {
        Ok(match &self.model {
            TrainedModel::Knn(m) => m.predict_batch(xs),
            TrainedModel::Lda(m) => crate::par::map(xs, |x| m.predict(x)),
            TrainedModel::Cnn { spec, params } => {
                let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
                cnn::predict_proba_batch(spec, params, &refs)?
                    .iter()
                    .map(|p| ClassLabel::from_index(cnn::argmax(p)).unwrap_or_default())
                    .collect()
            }
        })
    }
}

/// Fits normalization on `train`, then trains the configured family.
pub fn train_classifier(train: &[LabeledExample], cfg: &ModelConfig) -> Result<Classifier, ModelError> {
    if train.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let start = Instant::now();
    let norm = fit_norm(train.iter().map(|e| &e.features))?;
    let examples = to_examples(&norm, cfg.kind, train)?;
    let (model, epochs) = match cfg.kind {
        ModelKind::Knn => (TrainedModel::Knn(knn_train(&examples, cfg.k)?), 0),
        ModelKind::Lda => (TrainedModel::Lda(lda_fit(&examples, cfg.shrinkage)?), 0),
        ModelKind::Cnn => {
            let shape = (norm.channels, norm.bins);
            let (spec, params) = cnn_build(cfg.n_convs, cfg.dense_len, shape, cfg.train.seed)?;
            let (params, history) = cnn_train(&spec, &params, &examples, &cfg.train)?;
            (TrainedModel::Cnn { spec, params }, history.epochs.len())
        }
    };
    finish(cfg.clone(), norm, model, &examples, epochs, start, false)
}

fn finish(
    config: ModelConfig,
    norm: NormStats,
    model: TrainedModel,
    examples: &[Example],
    epochs: usize,
    start: Instant,
    transferred: bool,
) -> Result<Classifier, ModelError> {
    let mut c = Classifier {
        meta: TrainingMeta {
            seed: config.train.seed,
            train_size: examples.len(),
            epochs,
            training_accuracy: 0.0,
            wall_seconds: 0.0,
            transferred,
        },
        config,
        norm,
        model,
    };
    let xs: Vec<Vec<f64>> = examples.iter().map(|e| e.x.clone()).collect();
    let pred = c.predict_inputs(&xs)?;
    let truth: Vec<ClassLabel> = examples.iter().map(|e| e.label).collect();
    c.meta.training_accuracy = Evaluation::from_pairs(&pred, &truth).accuracy;
    c.meta.wall_seconds = start.elapsed().as_secs_f64();
    Ok(c)
}

/// Adapts a classifier to new data. A CNN keeps its convolutional blocks
/// and normalization and retrains only the dense layers; KNN and LDA have
/// no transferable part and are refitted from `new_data` alone.
pub fn transfer_classifier(
    base: &Classifier,
    new_data: &[LabeledExample],
    train: &TrainConfig,
) -> Result<Classifier, ModelError> {
    match &base.model {
        TrainedModel::Cnn { spec, params } => {
            if new_data.is_empty() {
                return Err(ModelError::EmptyDataset);
            }
            let start = Instant::now();
            let examples = to_examples(&base.norm, ModelKind::Cnn, new_data)?;
            let (params, history) = cnn_transfer(spec, params, &examples, train)?;
            let config = ModelConfig {
                train: train.clone(),
                ..base.config.clone()
            };
            let model = TrainedModel::Cnn {
                spec: spec.clone(),
                params,
            };
            finish(config, base.norm.clone(), model, &examples, history.epochs.len(), start, true)
        }
        _ => train_classifier(new_data, &base.config),
    }
}

/// Accuracy plus a confusion matrix indexed `[truth][prediction]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub n: usize,
    pub confusion: [[usize; 4]; 4],
}

impl Evaluation {
    pub fn from_pairs(predicted: &[ClassLabel], truth: &[ClassLabel]) -> Self {
        let mut confusion = [[0usize; 4]; 4];
        for (p, t) in predicted.iter().zip(truth) {
            confusion[t.index()][p.index()] += 1;
        }
        let n = predicted.len().min(truth.len());
        let correct: usize = (0..4).map(|i| confusion[i][i]).sum();
        Self {
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            n,
            confusion,
        }
    }

    /// Recall per true class (`None` where the class is absent).
    pub fn per_class_recall(&self) -> [Option<f64>; 4] {
        std::array::from_fn(|i| {
            let total: usize = self.confusion[i].iter().sum();
            (total > 0).then(|| self.confusion[i][i] as f64 / total as f64)
        })
    }
}

pub fn evaluate(model: &Classifier, test: &[LabeledExample]) -> Result<Evaluation, ModelError> {
    let xs = test
        .iter()
        .map(|e| model.input(&e.features))
        .collect::<Result<Vec<_>, _>>()?;
    let pred = model.predict_inputs(&xs)?;
    let truth: Vec<ClassLabel> = test.iter().map(|e| e.label).collect();
    Ok(Evaluation::from_pairs(&pred, &truth))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Tiny labeled frames whose spectrum encodes the class.
    pub(crate) fn frames(n_per_class: usize, channels: usize, bins: usize) -> Vec<LabeledExample> {
        let mut out = Vec::new();
        for i in 0..n_per_class {
            for c in ClassLabel::ALL {
                let mags: Vec<f32> = (0..channels * bins)
                    .map(|j| {
                        let base = 1.0 + ((i * 7 + j * 3) % 5) as f32 * 0.1;
                        if j % bins == 2 + 2 * c.index() {
                            base + 20.0
                        } else {
                            base
                        }
                    })
                    .collect();
                let t = (out.len() as f64) * 0.128;
                out.push(LabeledExample {
                    features: FeatureVector::from_mags(t, channels, bins, mags, 250.0),
                    label: c,
                    session_id: "s".into(),
                    t,
                });
            }
        }
        out
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let truth: Vec<ClassLabel> = ClassLabel::ALL.iter().cycle().take(40).copied().collect();
        let pred = vec![ClassLabel::Left; 40];
        let e = Evaluation::from_pairs(&pred, &truth);
        assert_eq!(e.accuracy, 0.25);
        assert_eq!(e.confusion[ClassLabel::Right.index()][ClassLabel::Left.index()], 10);
        assert_eq!(e.per_class_recall()[1], Some(1.0));
    }

    #[test]
    fn knn_memorizes_training_set() {
        let data = frames(6, 2, 16);
        let cfg = ModelConfig {
            k: 1,
            ..ModelConfig::new(ModelKind::Knn)
        };
        let c = train_classifier(&data, &cfg).unwrap();
        assert_eq!(evaluate(&c, &data).unwrap().accuracy, 1.0);
        assert_eq!(c.meta.training_accuracy, 1.0);
        assert_eq!(c.meta.train_size, 24);
    }

    #[test]
    fn every_family_learns_separable_frames() {
        let data = frames(10, 2, 16);
        for kind in [ModelKind::Knn, ModelKind::Lda, ModelKind::Cnn] {
            let mut cfg = ModelConfig::new(kind);
            cfg.n_convs = 1;
            cfg.dense_len = 16;
            cfg.train.learning_rate = 0.1;
            cfg.train.epochs = 60;
            cfg.train.batch_size = 8;
            let c = train_classifier(&data, &cfg).unwrap();
            let acc = evaluate(&c, &data).unwrap().accuracy;
            assert!(acc >= 0.95, "{kind}: {acc}");
            let p = c.predict_proba(&data[0].features).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn kind_parsing() {
        for k in [ModelKind::Knn, ModelKind::Lda, ModelKind::Cnn] {
            assert_eq!(k.to_string().parse::<ModelKind>().unwrap(), k);
            assert_eq!(ModelKind::from_tag(k.tag()), Some(k));
        }
        assert!("svm".parse::<ModelKind>().is_err());
    }
}
