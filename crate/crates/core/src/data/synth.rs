//! Seeded synthetic expression corpora rendered from bitmap glyphs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::write_corpus;
use super::glyphs::{glyph, has_glyph, GLYPH_SIZE};
use super::DataError;
use crate::config::{ConfigError, KeyValues, Writer};
use crate::tensor::Tensor;
use crate::vocab::{Vocabulary, EOL, SOS};

pub const CANVAS_HEIGHT: usize = 32;
const BASELINE: usize = 26;
const MARGIN: usize = 3;
const OPERATORS: [&str; 4] = ["+", "-", "=", "\\times"];
const SUPERSCRIPT: &str = "^";
const SQRT: &str = "\\sqrt";

/// Parameters of a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Tokens to draw. `^` enables superscripts (it has no glyph) and
    /// `\sqrt` enables radicals.
    pub glyphs: Vec<String>,
    /// Maximum structure nesting; 0 gives flat expressions.
    pub depth: usize,
    pub count: usize,
    pub min_terms: usize,
    pub max_terms: usize,
    /// Chance that a term is a superscript or radical (when `depth > 0`).
    pub structure_rate: f64,
    /// Every term uses one atom and every operator one symbol (`a + a + a`).
    pub repeat: bool,
    /// Per-glyph positional jitter, in pixels.
    pub jitter_shift: usize,
    /// Per-sample relative glyph size jitter.
    pub jitter_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            glyphs: ["a", "b", "c", "1", "2", "+", "=", "^", "\\sqrt"]
                .map(String::from)
                .to_vec(),
            depth: 1,
            count: 50,
            min_terms: 1,
            max_terms: 3,
            structure_rate: 0.3,
            repeat: false,
            jitter_shift: 1,
            jitter_scale: 0.1,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let cfg = |e: ConfigError| DataError::Synth(e.to_string());
        let mut kv = KeyValues::parse(text).map_err(cfg)?;
        let mut s = Self::default();
        if let Some(g) = kv.take_str("glyphs") {
            s.glyphs = g.split_whitespace().map(String::from).collect();
        }
        kv.take("depth", &mut s.depth).map_err(cfg)?;
        kv.take("count", &mut s.count).map_err(cfg)?;
        kv.take("min_terms", &mut s.min_terms).map_err(cfg)?;
        kv.take("max_terms", &mut s.max_terms).map_err(cfg)?;
        kv.take("structure_rate", &mut s.structure_rate).map_err(cfg)?;
        kv.take("repeat", &mut s.repeat).map_err(cfg)?;
        kv.take("jitter_shift", &mut s.jitter_shift).map_err(cfg)?;
        kv.take("jitter_scale", &mut s.jitter_scale).map_err(cfg)?;
        kv.take("seed", &mut s.seed).map_err(cfg)?;
        kv.finish().map_err(cfg)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let mut w = Writer::default();
        w.put("glyphs", self.glyphs.join(" "))
            .put("depth", self.depth)
            .put("count", self.count)
            .put("min_terms", self.min_terms)
            .put("max_terms", self.max_terms)
            .put("structure_rate", self.structure_rate)
            .put("repeat", self.repeat)
            .put("jitter_shift", self.jitter_shift)
            .put("jitter_scale", self.jitter_scale)
            .put("seed", self.seed);
        w.finish()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Synth(m));
        if self.glyphs.is_empty() {
            return bad("glyph set is empty".into());
        }
        if let Some(g) = self.glyphs.iter().find(|g| *g != SUPERSCRIPT && !has_glyph(g)) {
            return bad(format!("glyph {g:?} has no bitmap"));
        }
        if self.atoms().is_empty() {
            return bad("glyph set has no drawable atom (digit or letter)".into());
        }
        if self.min_terms == 0 || self.min_terms > self.max_terms {
            return bad(format!(
                "need 1 <= min_terms <= max_terms, got {}..{}",
                self.min_terms, self.max_terms
            ));
        }
        if !(0.0..=1.0).contains(&self.structure_rate) {
            return bad(format!("structure_rate {} outside [0, 1]", self.structure_rate));
        }
        if !(0.0..0.5).contains(&self.jitter_scale) {
            return bad(format!("jitter_scale {} outside [0, 0.5)", self.jitter_scale));
        }
        if self.jitter_shift > 3 {
            return bad(format!("jitter_shift {} above 3 pixels", self.jitter_shift));
        }
        Ok(())
    }

    fn has(&self, token: &str) -> bool {
        self.glyphs.iter().any(|g| g == token)
    }

    fn atoms(&self) -> Vec<&str> {
        self.glyphs
            .iter()
            .map(String::as_str)
            .filter(|g| !OPERATORS.contains(g) && ![SUPERSCRIPT, SQRT, "(", ")"].contains(g))
            .collect()
    }

    fn operators(&self) -> Vec<&str> {
        self.glyphs
            .iter()
            .map(String::as_str)
            .filter(|g| OPERATORS.contains(g))
            .collect()
    }

    fn structures(&self) -> bool {
        self.depth > 0 && (self.has(SUPERSCRIPT) || self.has(SQRT))
    }
}

/// The vocabulary a spec can produce: sentinels, then glyph tokens in spec
/// order, then braces when structures are enabled.
pub fn synth_vocabulary(spec: &SynthSpec) -> Result<Vocabulary, DataError> {
    let mut tokens = vec![SOS.to_string(), EOL.to_string()];
    for g in &spec.glyphs {
        if !tokens.contains(g) {
            tokens.push(g.clone());
        }
    }
    if spec.structures() {
        tokens.extend(["{".to_string(), "}".to_string()]);
    }
    Ok(Vocabulary::from_tokens(tokens)?)
}

#[derive(Debug, Clone)]
enum Term {
    Atom(String),
    Sup(Box<Term>, String),
    Sqrt(Box<Term>),
}

impl Term {
    fn tokens(&self, out: &mut Vec<String>) {
        match self {
            Term::Atom(a) => out.push(a.clone()),
            Term::Sup(base, exp) => {
                base.tokens(out);
                out.extend([SUPERSCRIPT, "{", exp, "}"].map(String::from));
            }
            Term::Sqrt(inner) => {
                out.extend([SQRT, "{"].map(String::from));
                inner.tokens(out);
                out.push("}".into());
            }
        }
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items[rng.random_range(0..items.len())]
}

fn gen_term(spec: &SynthSpec, rng: &mut ChaCha8Rng, depth: usize, atom: Option<&str>) -> Term {
    let atoms = spec.atoms();
    let choose_atom = |rng: &mut ChaCha8Rng| atom.unwrap_or_else(|| pick(rng, &atoms)).to_string();
    let mut kinds = Vec::new();
    if depth > 0 && spec.has(SUPERSCRIPT) {
        kinds.push(SUPERSCRIPT);
    }
    if depth > 0 && spec.has(SQRT) {
        kinds.push(SQRT);
    }
    if kinds.is_empty() || !rng.random_bool(spec.structure_rate) {
        return Term::Atom(choose_atom(rng));
    }
    match pick(rng, &kinds) {
        SUPERSCRIPT => {
            let base = choose_atom(rng);
            let exp = choose_atom(rng);
            Term::Sup(Box::new(Term::Atom(base)), exp)
        }
        _ => Term::Sqrt(Box::new(gen_term(spec, rng, depth - 1, atom))),
    }
}

struct Canvas {
    width: usize,
    ink: Vec<(usize, usize)>,
}

impl Canvas {
    fn glyph(&mut self, token: &str, x: usize, bottom: usize, size: usize) -> usize {
        let bitmap = glyph(token).expect("validated glyph");
        let top = bottom.saturating_sub(size);
        for r in 0..size {
            for c in 0..size {
                if bitmap[r * GLYPH_SIZE / size][c * GLYPH_SIZE / size] {
                    self.ink.push((top + r, x + c));
                }
            }
        }
        self.width = self.width.max(x + size);
        top
    }
}

struct Layout<'a> {
    rng: &'a mut ChaCha8Rng,
    shift: usize,
    canvas: Canvas,
}

impl Layout<'_> {
    fn jitter(&mut self) -> isize {
        let s = self.shift as i64;
        self.rng.random_range(-s..=s) as isize
    }

    /// Draws a glyph at `x`; returns (next x, top row).
    fn symbol(&mut self, token: &str, x: usize, bottom: usize, size: usize) -> (usize, usize) {
        let dx = self.jitter().unsigned_abs().min(self.shift);
        let bottom = bottom.saturating_add_signed(self.jitter());
        let top = self.canvas.glyph(token, x + dx, bottom, size);
        (x + dx + size + 1, top)
    }

    fn term(&mut self, term: &Term, x: usize, bottom: usize, size: usize) -> (usize, usize) {
        match term {
            Term::Atom(a) => self.symbol(a, x, bottom, size),
            Term::Sup(base, exp) => {
                let (x, top) = self.term(base, x, bottom, size);
                let small = (size * 3 / 4).max(4);
                let (x, sup_top) = self.symbol(exp, x, top + size / 3, small);
                (x, top.min(sup_top))
            }
            Term::Sqrt(inner) => {
                let (_, rad_top) = self.symbol(SQRT, x, bottom, size);
                let start = x + size;
                let (end, inner_top) = self.term(inner, start, bottom, size);
                let bar = rad_top.min(inner_top).saturating_sub(2);
                for c in start.saturating_sub(1)..end {
                    self.canvas.ink.push((bar, c));
                }
                (end + 1, bar)
            }
        }
    }
}

/// One generated example before it is written to disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSample {
    pub id: String,
    pub tokens: Vec<String>,
    pub width: usize,
    pub height: usize,
    /// 8-bit pixels, white background.
    pub pixels: Vec<u8>,
}

impl SynthSample {
    /// The in-memory `Sample` this example loads as (unpadded).
    pub fn to_sample(&self, vocab: &Vocabulary) -> Result<super::Sample, DataError> {
        let target = vocab.encode(&self.tokens)?;
        let data = self.pixels.iter().map(|&p| (255.0 - f64::from(p)) / 255.0).collect();
        Ok(super::Sample {
            id: self.id.clone(),
            image: Tensor::new(vec![1, 1, self.height, self.width], data).expect("raster size"),
            target,
        })
    }
}

/// Renders example `index` of `spec`; a pure function of `(spec, index)`.
pub fn synth_sample(spec: &SynthSpec, index: usize) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let n_terms = rng.random_range(spec.min_terms..=spec.max_terms);
    let atoms = spec.atoms();
    let ops = spec.operators();
    let (fixed_atom, fixed_op) = if spec.repeat {
        (Some(pick(&mut rng, &atoms)), (!ops.is_empty()).then(|| pick(&mut rng, &ops)))
    } else {
        (None, None)
    };
    let mut items: Vec<Result<Term, &str>> = Vec::new();
    for i in 0..n_terms {
        if i > 0 && !ops.is_empty() {
            items.push(Err(fixed_op.unwrap_or_else(|| pick(&mut rng, &ops))));
        }
        items.push(Ok(gen_term(spec, &mut rng, spec.depth, fixed_atom)));
    }
    let scale = 1.0 + spec.jitter_scale * rng.random_range(-1.0..=1.0);
    let size = ((GLYPH_SIZE as f64 * scale).round() as usize).max(5);

    let mut tokens = Vec::new();
    let mut layout = Layout {
        rng: &mut rng,
        shift: spec.jitter_shift,
        canvas: Canvas {
            width: 0,
            ink: Vec::new(),
        },
    };
    let mut x = MARGIN;
    for item in &items {
        match item {
            Ok(term) => {
                term.tokens(&mut tokens);
                x = layout.term(term, x, BASELINE, size).0;
            }
            Err(op) => {
                tokens.push(op.to_string());
                x = layout.symbol(op, x, BASELINE, size).0;
            }
        }
        x += 1;
    }
    let width = layout.canvas.width + MARGIN;
    let height = CANVAS_HEIGHT;
    let mut pixels = vec![255u8; width * height];
    for &(r, c) in &layout.canvas.ink {
        if r < height && c < width {
            pixels[r * width + c] = 0;
        }
    }
    SynthSample {
        id: format!("s{index:05}"),
        tokens,
        width,
        height,
        pixels,
    }
}

/// Writes `spec.count` examples plus `labels.txt` and `vocab.txt` into `dir`.
pub fn generate_synth(spec: &SynthSpec, dir: &Path) -> Result<(usize, Vocabulary), DataError> {
    spec.validate()?;
    let vocab = synth_vocabulary(spec)?;
    let samples: Vec<SynthSample> = (0..spec.count).map(|i| synth_sample(spec, i)).collect();
    for s in &samples {
        vocab.encode(&s.tokens)?;
    }
    let n = write_corpus(
        dir,
        &vocab,
        samples
            .iter()
            .map(|s| (s.id.as_str(), s.pixels.as_slice(), s.width, s.height, s.tokens.as_slice())),
    )?;
    Ok((n, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_corpus, pad_to_factor};
    use crate::exec::Exec;

    fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for sub in ["", "images"] {
            let mut entries: Vec<_> = std::fs::read_dir(dir.join(sub))
                .unwrap()
                .map(|e| e.unwrap().path())
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            for p in entries {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
        out
    }

    #[test]
    fn same_spec_gives_identical_trees() {
        let spec = SynthSpec::default();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synth(&spec, a.path()).unwrap();
        generate_synth(&spec, b.path()).unwrap();
        let ta = tree(a.path());
        assert_eq!(ta.len(), 52);
        assert_eq!(ta, tree(b.path()));
    }

    #[test]
    fn targets_round_trip_through_vocab() {
        let spec = SynthSpec {
            depth: 2,
            count: 200,
            structure_rate: 0.6,
            ..SynthSpec::default()
        };
        let v = synth_vocabulary(&spec).unwrap();
        let mut saw_sup = false;
        for i in 0..spec.count {
            let s = synth_sample(&spec, i);
            let ids = v.encode(&s.tokens).unwrap();
            assert_eq!(v.decode(&ids).unwrap(), s.tokens);
            saw_sup |= s.tokens.iter().any(|t| t == "^");
        }
        assert!(saw_sup);
    }

    #[test]
    fn superscript_token_is_emitted_but_not_drawn() {
        let spec = SynthSpec {
            glyphs: ["x", "2", "^"].map(String::from).to_vec(),
            min_terms: 1,
            max_terms: 1,
            structure_rate: 1.0,
            jitter_shift: 0,
            jitter_scale: 0.0,
            ..SynthSpec::default()
        };
        let s = synth_sample(&spec, 0);
        assert!(s.tokens.contains(&"^".to_string()), "{:?}", s.tokens);
        assert_eq!(s.tokens.len(), 5);
        // Two glyphs drawn: base and raised exponent; no third column of ink.
        let inked_cols: Vec<usize> = (0..s.width)
            .filter(|&c| (0..s.height).any(|r| s.pixels[r * s.width + c] == 0))
            .collect();
        assert!(inked_cols.last().unwrap() - inked_cols[0] < 2 * GLYPH_SIZE + 2);
        let rows = |lo: usize, hi: usize| (lo..hi).any(|c| (0..s.height).any(|r| s.pixels[r * s.width + c] == 0 && r < BASELINE - GLYPH_SIZE));
        assert!(rows(MARGIN + GLYPH_SIZE, s.width), "exponent should sit above the base");
    }

    #[test]
    fn repeat_mode_repeats() {
        let spec = SynthSpec {
            glyphs: ["a", "b", "c", "+", "="].map(String::from).to_vec(),
            min_terms: 3,
            max_terms: 3,
            repeat: true,
            depth: 0,
            ..SynthSpec::default()
        };
        for i in 0..20 {
            let t = synth_sample(&spec, i).tokens;
            assert_eq!(t.len(), 5);
            assert_eq!(t[0], t[2]);
            assert_eq!(t[2], t[4]);
            assert_eq!(t[1], t[3]);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let missing = SynthSpec {
            glyphs: vec!["a".into(), "\\alpha".into()],
            ..SynthSpec::default()
        };
        let err = missing.validate().unwrap_err().to_string();
        assert!(err.contains("\\\\alpha"), "{err}");
        assert!(SynthSpec { glyphs: vec![], ..SynthSpec::default() }.validate().is_err());
        assert!(SynthSpec::parse("count = 3\nbogus = 1").is_err());
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = SynthSpec {
            repeat: true,
            seed: 99,
            ..SynthSpec::default()
        };
        assert_eq!(SynthSpec::parse(&spec.to_text()).unwrap(), spec);
    }

    #[test]
    fn disk_round_trip_matches_memory() {
        let spec = SynthSpec {
            count: 12,
            ..SynthSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let (_, v) = generate_synth(&spec, dir.path()).unwrap();
        let loaded = load_corpus(dir.path(), &v, 16, Exec::Sequential).unwrap();
        for (i, l) in loaded.iter().enumerate() {
            let mut m = synth_sample(&spec, i).to_sample(&v).unwrap();
            m.image = pad_to_factor(&m.image, 16);
            assert_eq!(&m, l);
        }
    }
}
