//! Model-ready features: multi-hot key attributes, standardized counts and
//! the serialized context text handed to the embedder.

use serde::{Deserialize, Serialize};

use crate::dataio::{EmbeddingMatrix, LabelSet, TrialRecord};
use crate::error::{structural, Error, Result};

/// Separator between serialized context fields.
pub const SEP: &str = " [SEP] ";

/// Key categorical features in encoding order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyFeature {
    Phase,
    Country,
    TherapeuticArea,
    Sponsor,
}

impl KeyFeature {
    pub const ALL: [KeyFeature; 4] = [
        KeyFeature::Phase,
        KeyFeature::Country,
        KeyFeature::TherapeuticArea,
        KeyFeature::Sponsor,
    ];

    pub fn labels(self, trial: &TrialRecord) -> &LabelSet {
        match self {
            KeyFeature::Phase => &trial.phase,
            KeyFeature::Country => &trial.countries,
            KeyFeature::TherapeuticArea => &trial.therapeutic_areas,
            KeyFeature::Sponsor => &trial.sponsors,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KeyFeature::Phase => "phase",
            KeyFeature::Country => "country",
            KeyFeature::TherapeuticArea => "therapeutic_area",
            KeyFeature::Sponsor => "sponsor",
        }
    }
}

/// Records that were drawn from the training split. Encoders can only be
/// fitted through this wrapper, which keeps dev/test data out of them.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a>(&'a [TrialRecord]);

impl<'a> TrainingSet<'a> {
    pub fn new(records: &'a [TrialRecord]) -> Self {
        Self(records)
    }

    pub fn records(&self) -> &'a [TrialRecord] {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVocab {
    pub feature: KeyFeature,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiLabelVocab {
    pub features: Vec<FeatureVocab>,
}

impl MultiLabelVocab {
    /// d₁, the multi-hot width.
    pub fn width(&self) -> usize {
        self.features.iter().map(|f| f.labels.len()).sum()
    }

    pub fn feature(&self, feature: KeyFeature) -> Option<&[String]> {
        self.features
            .iter()
            .find(|f| f.feature == feature)
            .map(|f| f.labels.as_slice())
    }
}

pub fn fit_categorical(train: TrainingSet<'_>) -> Result<MultiLabelVocab> {
    let trials = train.records();
    if trials.is_empty() {
        return Err(structural("cannot fit a vocabulary on an empty training set"));
    }
    let features = KeyFeature::ALL
        .iter()
        .map(|&feature| {
            let mut set = LabelSet::new();
            for t in trials {
                set.extend(feature.labels(t).iter().cloned());
            }
            FeatureVocab {
                feature,
                labels: set.into_iter().collect(),
            }
        })
        .collect();
    Ok(MultiLabelVocab { features })
}

/// Multi-hot encoding plus the number of labels not in the vocabulary.
pub fn transform_categorical(vocab: &MultiLabelVocab, trial: &TrialRecord) -> (Vec<f64>, usize) {
    let mut out = Vec::with_capacity(vocab.width());
    let mut unknown = 0;
    for fv in &vocab.features {
        let start = out.len();
        out.resize(start + fv.labels.len(), 0.0);
        for label in fv.feature.labels(trial) {
            match fv.labels.binary_search(label) {
                Ok(i) => out[start + i] = 1.0,
                Err(_) => unknown += 1,
            }
        }
    }
    (out, unknown)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScoreState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Planned participants and planned sites, in that order.
pub fn numeric_features(trial: &TrialRecord) -> [f64; 2] {
    [trial.planned_participants as f64, trial.planned_sites as f64]
}

pub fn fit_zscore(train: TrainingSet<'_>) -> Result<ZScoreState> {
    let trials = train.records();
    if trials.is_empty() {
        return Err(structural("cannot fit z-scores on an empty training set"));
    }
    let n = trials.len() as f64;
    let mut mean = vec![0.0; 2];
    for t in trials {
        for (m, x) in mean.iter_mut().zip(numeric_features(t)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 2];
    for t in trials {
        for ((v, m), x) in var.iter_mut().zip(&mean).zip(numeric_features(t)) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt()).collect();
    Ok(ZScoreState { mean, std })
}

pub fn transform_zscore(state: &ZScoreState, trial: &TrialRecord) -> Vec<f64> {
    zscore_values(state, &numeric_features(trial))
}

pub fn zscore_values(state: &ZScoreState, values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .zip(state.mean.iter().zip(&state.std))
        .map(|(x, (m, s))| if *s > 0.0 { (x - m) / s } else { 0.0 })
        .collect()
}

/// The context text of a trial, in the fixed field order used by every
/// embedding producer.
pub fn serialize_context(trial: &TrialRecord) -> String {
    let fields: [(&str, &Option<String>); 6] = [
        ("title", &trial.title),
        ("objective", &trial.objective),
        ("mechanism_of_action", &trial.mechanism_of_action),
        ("indication", &trial.indication),
        ("inclusion_criteria", &trial.inclusion_criteria),
        ("exclusion_criteria", &trial.exclusion_criteria),
    ];
    fields
        .iter()
        .map(|(name, v)| {
            let v = v.as_deref().unwrap_or("").replace(SEP, " / ");
            format!("{name}: {v}")
        })
        .collect::<Vec<_>>()
        .join(SEP)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedTrial {
    pub x_emb: Vec<f64>,
    pub x_cat: Vec<f64>,
    pub x_num: Vec<f64>,
}

/// Fitted encoders; stored inside model checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub vocab: MultiLabelVocab,
    pub zscore: ZScoreState,
    pub embedding_dim: usize,
}

impl Encoder {
    pub fn fit(train: TrainingSet<'_>, embedding_dim: usize) -> Result<Self> {
        Ok(Self {
            vocab: fit_categorical(train)?,
            zscore: fit_zscore(train)?,
            embedding_dim,
        })
    }

    pub fn cat_width(&self) -> usize {
        self.vocab.width()
    }

    pub fn num_width(&self) -> usize {
        self.zscore.mean.len()
    }

    /// Encodes one trial; the embedding row is looked up by trial id.
    pub fn encode(&self, trial: &TrialRecord, embeddings: &EmbeddingMatrix) -> Result<(EncodedTrial, usize)> {
        if embeddings.dim() != self.embedding_dim {
            return Err(Error::Data(format!(
                "embedding width {} does not match the encoder's {}",
                embeddings.dim(),
                self.embedding_dim
            )));
        }
        let row = embeddings
            .row_by_id(&trial.trial_id)
            .ok_or_else(|| Error::Data(format!("no embedding row for trial {:?}", trial.trial_id)))?;
        let (x_cat, unknown) = transform_categorical(&self.vocab, trial);
        Ok((
            EncodedTrial {
                x_emb: row.iter().map(|&v| v as f64).collect(),
                x_cat,
                x_num: transform_zscore(&self.zscore, trial),
            },
            unknown,
        ))
    }

    /// Encodes a batch, logging the total number of out-of-vocabulary labels.
    pub fn encode_all(&self, trials: &[TrialRecord], embeddings: &EmbeddingMatrix) -> Result<Vec<EncodedTrial>> {
        let mut unknown = 0;
        let out = trials
            .iter()
            .map(|t| {
                let (e, u) = self.encode(t, embeddings)?;
                unknown += u;
                Ok(e)
            })
            .collect::<Result<Vec<_>>>()?;
        if unknown > 0 {
            log::warn!("{unknown} categorical label(s) unseen in training were dropped");
        }
        Ok(out)
    }
}
