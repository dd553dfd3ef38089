//! Corpus directories: `images/<id>.pgm`, `labels.txt` (`<id>\t<tokens>`) and
//! `vocab.txt`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use super::pgm::{encode_pgm, load_image};
use super::{io_err, DataError};
use crate::exec::{map_ordered, Exec};
use crate::tensor::Tensor;
use crate::vocab::{Vocabulary, EOL, EOS_ALIAS};

pub const IMAGES_DIR: &str = "images";
pub const LABELS_FILE: &str = "labels.txt";
pub const VOCAB_FILE: &str = "vocab.txt";

/// One labelled example. `target` excludes the end sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub target: Vec<usize>,
}

/// Splits one label line into id and tokens, dropping a single trailing
/// end sentinel. Sentinels anywhere else are rejected.
pub fn parse_label_line(line: &str) -> Result<(String, Vec<String>), String> {
    let (id, rest) = line
        .split_once('\t')
        .ok_or_else(|| "expected `<id>\\t<tokens>`".to_string())?;
    let id = id.trim();
    if id.is_empty() {
        return Err("empty sample id".into());
    }
    let mut tokens: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
    if tokens.last().is_some_and(|t| t == EOL || t == EOS_ALIAS) {
        tokens.pop();
    }
    if let Some(t) = tokens.iter().find(|t| t.starts_with('<') && t.ends_with('>') && t.len() > 2) {
        return Err(format!("sentinel {t:?} inside the sequence of {id:?}"));
    }
    if tokens.is_empty() {
        return Err(format!("sample {id:?} has an empty token sequence"));
    }
    Ok((id.to_string(), tokens))
}

/// Reads `labels.txt`, encoding each sequence with `vocab`.
pub fn load_labels(path: &Path, vocab: &Vocabulary) -> Result<Vec<(String, Vec<usize>)>, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, tokens) = parse_label_line(line).map_err(|detail| DataError::Label {
            path: path.to_path_buf(),
            line: n + 1,
            detail,
        })?;
        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateId { id });
        }
        let mut ids = Vec::with_capacity(tokens.len());
        for t in tokens {
            match vocab.id(&t) {
                Some(i) => ids.push(i),
                None => return Err(DataError::UnknownToken { id, token: t }),
            }
        }
        out.push((id, ids));
    }
    Ok(out)
}

/// Right/bottom zero-pads a `[1,1,H,W]` image to multiples of `factor`.
pub fn pad_to_factor(image: &Tensor, factor: usize) -> Tensor {
    let shape = image.shape();
    assert_eq!(shape.len(), 4, "expected a [1,1,H,W] image");
    let (h, w) = (shape[2], shape[3]);
    let round = |v: usize| v.max(1).div_ceil(factor) * factor;
    let (ph, pw) = (round(h), round(w));
    if (ph, pw) == (h, w) {
        return image.clone();
    }
    let src = image.data();
    Tensor::from_fn(&[1, 1, ph, pw], |i| {
        let (y, x) = (i / pw, i % pw);
        if y < h && x < w {
            src[y * w + x]
        } else {
            0.0
        }
    })
}

/// Loads every labelled sample of a corpus directory, padding images to
/// multiples of `pad_factor`. Images are decoded on the given executor.
pub fn load_corpus(dir: &Path, vocab: &Vocabulary, pad_factor: usize, exec: Exec) -> Result<Vec<Sample>, DataError> {
    let labels = load_labels(&dir.join(LABELS_FILE), vocab)?;
    let loaded = map_ordered(exec, &labels, |(id, target)| {
        let path = image_path(dir, id);
        if !path.is_file() {
            return Err(DataError::MissingImage { id: id.clone(), path });
        }
        let image = load_image(&path)?;
        Ok(Sample {
            id: id.clone(),
            image: pad_to_factor(&image, pad_factor),
            target: target.clone(),
        })
    });
    loaded.into_iter().collect()
}

pub(crate) fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(IMAGES_DIR).join(format!("{id}.pgm"))
}

/// Writes a corpus directory from `(id, pixels, width, height, tokens)` rows.
pub fn write_corpus<'a>(
    dir: &Path,
    vocab: &Vocabulary,
    samples: impl IntoIterator<Item = (&'a str, &'a [u8], usize, usize, &'a [String])>,
) -> Result<usize, DataError> {
    let images = dir.join(IMAGES_DIR);
    std::fs::create_dir_all(&images).map_err(io_err(&images))?;
    let mut labels = String::new();
    let mut count = 0;
    for (id, pixels, width, height, tokens) in samples {
        let path = image_path(dir, id);
        std::fs::write(&path, encode_pgm(width, height, pixels)).map_err(io_err(&path))?;
        labels.push_str(&format!("{id}\t{}\n", tokens.join(" ")));
        count += 1;
    }
    let path = dir.join(LABELS_FILE);
    std::fs::write(&path, labels).map_err(io_err(&path))?;
    let path = dir.join(VOCAB_FILE);
    std::fs::write(&path, vocab.to_text()).map_err(io_err(&path))?;
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["<sos>", "<eol>", "a", "b", "+", "="]).unwrap()
    }

    fn corpus(dir: &Path, labels: &str, ids: &[&str]) {
        std::fs::create_dir_all(dir.join(IMAGES_DIR)).unwrap();
        for id in ids {
            std::fs::write(image_path(dir, id), encode_pgm(5, 3, &[255; 15])).unwrap();
        }
        std::fs::write(dir.join(LABELS_FILE), labels).unwrap();
    }

    #[test]
    fn strips_end_sentinels() {
        assert_eq!(parse_label_line("x\ta + b <eol>").unwrap().1, ["a", "+", "b"]);
        assert_eq!(parse_label_line("x\ta <eos>").unwrap().1, ["a"]);
        assert!(parse_label_line("x\ta <eol> b").is_err());
        assert!(parse_label_line("x\t<sos> a").is_err());
        assert!(parse_label_line("no tab here").is_err());
    }

    #[test]
    fn loads_and_pads() {
        let dir = tempfile::tempdir().unwrap();
        corpus(dir.path(), "s1\ta + b\ns2\tb = a <eol>\n", &["s1", "s2"]);
        let samples = load_corpus(dir.path(), &vocab(), 16, Exec::Sequential).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].image.shape(), &[1, 1, 16, 16]);
        assert_eq!(samples[1].target, vec![3, 5, 2]);
    }

    #[test]
    fn errors_name_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        corpus(dir.path(), "s1\ta\ns2\tb\n", &["s1"]);
        let err = load_corpus(dir.path(), &vocab(), 16, Exec::Sequential).unwrap_err();
        assert!(matches!(&err, DataError::MissingImage { id, .. } if id == "s2"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        corpus(dir.path(), "s1\ta \\alpha\n", &["s1"]);
        let err = load_corpus(dir.path(), &vocab(), 16, Exec::Sequential).unwrap_err();
        assert!(err.to_string().contains("\"\\\\alpha\""), "{err}");
        assert!(err.to_string().contains("s1"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        corpus(dir.path(), "s1\ta\ns1\tb\n", &["s1"]);
        let err = load_corpus(dir.path(), &vocab(), 16, Exec::Sequential).unwrap_err();
        assert!(matches!(err, DataError::DuplicateId { .. }));
    }

    #[test]
    fn padding_adds_zeros_right_and_bottom() {
        let img = Tensor::new(vec![1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = pad_to_factor(&img, 4);
        assert_eq!(p.shape(), &[1, 1, 4, 4]);
        assert_eq!(&p.data()[..8], &[1.0, 2.0, 3.0, 0.0, 4.0, 5.0, 6.0, 0.0]);
        assert!(p.data()[8..].iter().all(|&v| v == 0.0));
        assert_eq!(pad_to_factor(&p, 4), p);
    }
}
