//! Image and label ingestion, synthetic corpora, and visualization exports.

mod corpus;
mod glyphs;
mod pgm;
mod synth;

use std::path::PathBuf;

use thiserror::Error;

use crate::vocab::VocabError;

pub use corpus::{
    load_corpus, load_labels, pad_to_factor, parse_label_line, write_corpus, Sample, IMAGES_DIR, LABELS_FILE,
    VOCAB_FILE,
};
pub use glyphs::{glyph, has_glyph, GLYPH_SIZE};
pub use pgm::{decode_pgm, encode_pgm, export_gray_image, load_image, Pgm};
pub use synth::{generate_synth, synth_sample, synth_vocabulary, SynthSample, SynthSpec, CANVAS_HEIGHT};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed PGM at byte offset {offset}: {detail}")]
    Pgm {
        path: PathBuf,
        offset: usize,
        detail: String,
    },
    #[error("{path}:{line}: {detail}")]
    Label {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("sample {id:?}: missing image {path}")]
    MissingImage { id: String, path: PathBuf },
    #[error("sample {id:?}: unknown token {token:?}")]
    UnknownToken { id: String, token: String },
    #[error("sample {id:?}: duplicate id")]
    DuplicateId { id: String },
    #[error("value {value} at index {index} outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("synthetic spec: {0}")]
    Synth(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
    let path = path.into();
    move |source| DataError::Io { path, source }
}

/// A 2-D map of values, row-major, used for image export.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl GrayMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height * width, "map size");
        Self {
            height,
            width,
            values,
        }
    }

    /// Min-max normalizes `values` into `[0,1]`; a constant map becomes all zeros.
    pub fn normalized(height: usize, width: usize, values: &[f64]) -> Self {
        let (lo, hi) = min_max(values);
        let span = hi - lo;
        let values = if span > 0.0 {
            values.iter().map(|v| (v - lo) / span).collect()
        } else {
            vec![0.0; values.len()]
        };
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        min_max(&self.values)
    }

    /// Nearest-neighbour resize to `height×width`.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        let values = (0..height * width)
            .map(|i| {
                let (y, x) = (i / width, i % width);
                self.get(y * self.height / height, x * self.width / width)
            })
            .collect();
        Self::new(height, width, values)
    }

    /// Renders this (attention) map over a `[0,1]` ink image: the map is
    /// peak-normalized, upsampled to the image size, and combined so focus
    /// renders dark and the strokes stay faintly visible.
    pub fn overlay_on(&self, image: &GrayMap) -> GrayMap {
        let peak = self.values.iter().copied().fold(0.0, f64::max);
        let scaled = if peak > 0.0 {
            GrayMap::new(self.height, self.width, self.values.iter().map(|v| v / peak).collect())
        } else {
            self.clone()
        };
        let up = scaled.resized(image.height, image.width);
        let values = up
            .values
            .iter()
            .zip(&image.values)
            .map(|(a, ink)| (0.75 * a + 0.25 * ink).clamp(0.0, 1.0))
            .collect();
        GrayMap::new(image.height, image.width, values)
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_hits_zero_and_one() {
        let m = GrayMap::normalized(1, 3, &[2.0, 4.0, 3.0]);
        assert_eq!(m.values(), &[0.0, 1.0, 0.5]);
        let c = GrayMap::normalized(1, 2, &[5.0, 5.0]);
        assert_eq!(c.values(), &[0.0, 0.0]);
    }

    #[test]
    fn overlay_stays_in_range() {
        let alpha = GrayMap::new(1, 2, vec![0.2, 0.8]);
        let img = GrayMap::new(2, 4, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let o = alpha.overlay_on(&img);
        assert_eq!((o.height(), o.width()), (2, 4));
        assert!(o.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(o.get(0, 3), 1.0);
    }
}
