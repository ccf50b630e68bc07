//! Corpus manifest: a JSON header line with generation metadata followed by
//! one JSON record per utterance. Features and units live in array files
//! next to the manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taste_core::corpus::{Corpus, CorpusItem, Transcription, UnitSequence, Utterance};

use crate::array::Array;
use crate::config::CorpusSection;
use crate::error::{AppError, AppResult};
use crate::fsutil::write_atomic;

pub const MANIFEST_FORMAT: &str = "taste-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub frame_rate: f64,
    pub feature_dim: usize,
    pub num_units: usize,
    pub corpus: CorpusSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Paths are relative to the manifest's directory.
    pub features: String,
    pub words: Vec<String>,
    pub units: String,
    pub speaker: usize,
    pub duration_s: f64,
    /// Frames covered by each recognizer-side token.
    pub token_frames: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> AppResult<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| AppError::Data("manifest is empty".into()))?;
        let value: serde_json::Value =
            serde_json::from_str(first).map_err(|e| AppError::Data(format!("manifest line 1: {e}")))?;
        match value.get("version").and_then(|v| v.as_u64().or_else(|| v.as_str().and_then(|s| s.parse().ok()))) {
            Some(v) if v == MANIFEST_VERSION as u64 => {}
            Some(v) => {
                return Err(AppError::Data(format!(
                    "manifest version {v} is not supported (expected {MANIFEST_VERSION})"
                )))
            }
            None => return Err(AppError::Data("manifest line 1: missing version".into())),
        }
        let header: ManifestHeader =
            serde_json::from_value(value).map_err(|e| AppError::Data(format!("manifest line 1: {e}")))?;
        if header.format != MANIFEST_FORMAT {
            return Err(AppError::Data(format!("manifest line 1: unexpected format `{}`", header.format)));
        }
        let records = lines
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| AppError::Data(format!("manifest line {}: {e}", i + 1)))
            })
            .collect::<AppResult<Vec<ManifestRecord>>>()?;
        Ok(Self { header, records })
    }

    pub fn write(&self, path: &Path) -> AppResult<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        Self::parse(&text).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))
    }
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Writes every array file and then the manifest.
pub fn write_corpus(manifest_path: &Path, corpus: &Corpus, section: &CorpusSection) -> AppResult<Manifest> {
    let dir = base_dir(manifest_path);
    let mut records = Vec::with_capacity(corpus.items.len());
    for item in &corpus.items {
        let id = &item.utterance.id;
        let features = format!("features/{id}.arr");
        let units = format!("units/{id}.arr");
        Array::from_matrix(&item.utterance.features).write(&dir.join(&features))?;
        Array::from_ints(&item.units.units).write(&dir.join(&units))?;
        records.push(ManifestRecord {
            id: id.clone(),
            features,
            words: item.transcription.words.clone(),
            units,
            speaker: item.utterance.speaker_id,
            duration_s: item.utterance.duration_s,
            token_frames: item.token_frames.clone(),
        });
    }
    let manifest = Manifest {
        header: ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            seed: corpus.seed,
            frame_rate: corpus.config.frame_rate,
            feature_dim: corpus.config.feature_dim,
            num_units: corpus.config.num_units(),
            corpus: section.clone(),
        },
        records,
    };
    manifest.write(manifest_path)?;
    Ok(manifest)
}

/// Reads the manifest and every referenced array back into a corpus.
pub fn load_corpus(manifest_path: &Path) -> AppResult<Corpus> {
    let manifest = Manifest::read(manifest_path)?;
    let dir = base_dir(manifest_path);
    let config = manifest.header.corpus.to_core().map_err(|e| AppError::Data(format!("manifest header: {e}")))?;
    let asr = config.asr_tokenizer()?;
    let llm = config.llm_tokenizer()?;
    let items = manifest
        .records
        .iter()
        .map(|r| {
            let fpath = dir.join(&r.features);
            let upath = dir.join(&r.units);
            for p in [&fpath, &upath] {
                if !p.exists() {
                    return Err(AppError::Data(format!("{}: referenced file is missing", p.display())));
                }
            }
            let features = Array::read(&fpath)?.to_matrix()?;
            if features.cols() != manifest.header.feature_dim {
                return Err(AppError::Data(format!("{}: feature width {}", fpath.display(), features.cols())));
            }
            let units = Array::read(&upath)?.to_ints()?;
            Ok(CorpusItem {
                utterance: Utterance::new(r.id.clone(), features, config.frame_rate, r.speaker)?,
                transcription: Transcription::new(r.words.clone(), &asr, &llm)?,
                units: UnitSequence::new(units, config.num_units())?,
                token_frames: r.token_frames.clone(),
            })
        })
        .collect::<AppResult<Vec<_>>>()?;
    Ok(Corpus {
        seed: manifest.header.seed,
        config,
        items,
    })
}
