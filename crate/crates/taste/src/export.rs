//! JSONL records written by the commands.

use serde::{Deserialize, Serialize};
use taste_core::codes::CodeGrid;

use crate::error::{AppError, AppResult};

/// Codes of one utterance: `codes` is `R × N` over recognizer tokens,
/// `word_codes` is `R × W` over words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeRecord {
    pub id: String,
    pub words: Vec<String>,
    pub duration_s: f64,
    pub codes: Vec<Vec<usize>>,
    pub word_codes: Vec<Vec<usize>>,
}

impl CodeRecord {
    pub fn word_grid(&self) -> AppResult<CodeGrid> {
        CodeGrid::new(self.word_codes.clone()).map_err(|e| AppError::Data(format!("{}: {e}", self.id)))
    }

    pub fn token_grid(&self) -> AppResult<CodeGrid> {
        CodeGrid::new(self.codes.clone()).map_err(|e| AppError::Data(format!("{}: {e}", self.id)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub id: String,
    pub units: Vec<usize>,
    /// Teacher-forced top-1 / top-5 accuracy against the reference units.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub top5: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuationRecord {
    pub prompt_id: String,
    pub prompt: String,
    pub text: String,
    pub tokens: Vec<usize>,
    /// `R × M` codes (token mode).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub codes: Option<Vec<Vec<usize>>>,
    /// `M × d_z` latents (embedding mode).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latents: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub true_score: f64,
    pub negative_score: f64,
    pub prefers_true: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub id: String,
    pub source: String,
    pub words: Vec<String>,
    pub swapped: Vec<usize>,
    pub word_codes: Vec<Vec<usize>>,
    pub units: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitrateRecord {
    pub layers: usize,
    pub codebook_size: usize,
    pub positions: usize,
    pub seconds: f64,
    pub frequency_hz: f64,
    pub speech_bps: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub joint_bps: Option<f64>,
}
