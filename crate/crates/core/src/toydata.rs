//! Synthetic (spectrogram, transcript, translation) triplets.
//!
//! Each source symbol owns a fixed spectral template. An utterance is a
//! symbol sequence rendered as concatenated templates plus Gaussian noise;
//! its transcript names the symbols and its translation relabels them
//! through a fixed bijection and swaps each adjacent pair.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Spectrogram;
use crate::manifest::Record;
use crate::objectives::Example;
use crate::rng::{derive_seed, SplitMix64};
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    /// Source symbol count `K`.
    pub src_vocab: usize,
    pub frames_per_symbol: usize,
    pub d_x: usize,
    pub noise_sigma: f64,
    /// Inclusive symbol-count range per utterance.
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
    /// Symbol relabeling used by translations; a fixed shuffle when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bijection: Option<Vec<usize>>,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            src_vocab: 12,
            frames_per_symbol: 4,
            d_x: 20,
            noise_sigma: 0.05,
            min_len: 3,
            max_len: 8,
            train_size: 200,
            dev_size: 50,
            test_size: 50,
            seed: 1,
            bijection: None,
        }
    }
}

const BIJECTION_SEED: u64 = 0x5EED_B17E;

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.src_vocab < 2 {
            return Err(Error::Config("toy vocabulary needs at least 2 symbols".into()));
        }
        if self.frames_per_symbol == 0 || self.d_x == 0 {
            return Err(Error::Config("frames_per_symbol and d_x must be positive".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("bad length range [{}, {}]", self.min_len, self.max_len)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        if let Some(b) = &self.bijection {
            let mut seen = vec![false; self.src_vocab];
            let ok = b.len() == self.src_vocab && b.iter().all(|&v| v < self.src_vocab && !std::mem::replace(&mut seen[v], true));
            if !ok {
                return Err(Error::Config("bijection is not a permutation of the symbols".into()));
            }
        }
        Ok(())
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Dev => self.dev_size,
            Split::Test => self.test_size,
        }
    }

    pub fn bijection(&self) -> Vec<usize> {
        if let Some(b) = &self.bijection {
            return b.clone();
        }
        let mut perm: Vec<usize> = (0..self.src_vocab).collect();
        let mut rng = SplitMix64::new(BIJECTION_SEED);
        for i in (1..perm.len()).rev() {
            let j = rng.below(i as u64 + 1) as usize;
            perm.swap(i, j);
        }
        perm
    }

    /// Relabel, then swap each adjacent pair.
    pub fn translate_symbols(&self, symbols: &[usize]) -> Vec<usize> {
        let bij = self.bijection();
        let mut out: Vec<usize> = symbols.iter().map(|&s| bij[s]).collect();
        for pair in out.chunks_mut(2) {
            pair.reverse();
        }
        out
    }

    pub fn transcript_vocab(&self) -> Vocab {
        let words: Vec<String> = (0..self.src_vocab).map(source_word).collect();
        Vocab::build(words.iter().map(String::as_str))
    }

    pub fn translation_vocab(&self) -> Vocab {
        let words: Vec<String> = (0..self.src_vocab).map(target_word).collect();
        Vocab::build(words.iter().map(String::as_str))
    }
}

pub fn source_word(symbol: usize) -> String {
    format!("s{symbol}")
}

pub fn target_word(symbol: usize) -> String {
    format!("t{symbol}")
}

/// Noise-free `frames_per_symbol x d_x` template: a Gaussian bump centered
/// at bin `symbol mod d_x` whose width depends on the symbol, scaled by a
/// per-frame envelope.
pub fn symbol_template(symbol: usize, toy: &ToySpec) -> Result<Vec<f32>> {
    if symbol >= toy.src_vocab {
        return Err(Error::TokenOutOfRange {
            token: symbol,
            vocab: toy.src_vocab,
        });
    }
    let center = (symbol % toy.d_x) as f64;
    let width = 0.8 + 0.4 * (symbol % 3) as f64;
    let f = toy.frames_per_symbol;
    let mut out = Vec::with_capacity(f * toy.d_x);
    for t in 0..f {
        let envelope = 0.6 + 0.4 * (std::f64::consts::PI * (t as f64 + 0.5) / f as f64).sin();
        for b in 0..toy.d_x {
            let z = (b as f64 - center) / width;
            out.push((envelope * (-0.5 * z * z).exp()) as f32);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyUtterance {
    pub id: String,
    pub symbols: Vec<usize>,
    pub x: Spectrogram,
    pub transcript: String,
    pub translation: String,
}

/// Utterance `index` of `split`; depends only on `(seed, split, index)`.
pub fn gen_utterance(toy: &ToySpec, split: Split, index: usize) -> Result<ToyUtterance> {
    let mut rng = SplitMix64::new(derive_seed(&[toy.seed, split.stream(), index as u64]));
    let len = toy.min_len + rng.below((toy.max_len - toy.min_len + 1) as u64) as usize;
    let mut symbols: Vec<usize> = Vec::with_capacity(len);
    for _ in 0..len {
        // No symbol repeats its predecessor, so every transcript aligns
        // to one encoder state per symbol.
        let s = match symbols.last() {
            Some(&prev) => {
                let r = rng.below(toy.src_vocab as u64 - 1) as usize;
                if r >= prev {
                    r + 1
                } else {
                    r
                }
            }
            None => rng.below(toy.src_vocab as u64) as usize,
        };
        symbols.push(s);
    }
    let mut data = Vec::with_capacity(len * toy.frames_per_symbol * toy.d_x);
    for &s in &symbols {
        data.extend(symbol_template(s, toy)?);
    }
    for v in &mut data {
        *v += (toy.noise_sigma * rng.normal()) as f32;
    }
    let x = Spectrogram::new(len * toy.frames_per_symbol, toy.d_x, data)?;
    let words = |ids: &[usize], f: fn(usize) -> String| ids.iter().map(|&s| f(s)).collect::<Vec<_>>().join(" ");
    Ok(ToyUtterance {
        id: format!("{}-{index:05}", split.as_str()),
        transcript: words(&symbols, source_word),
        translation: words(&toy.translate_symbols(&symbols), target_word),
        symbols,
        x,
    })
}

pub fn gen_corpus(toy: &ToySpec, split: Split) -> Result<Vec<ToyUtterance>> {
    toy.validate()?;
    (0..toy.size(split)).map(|i| gen_utterance(toy, split, i)).collect()
}

/// Writes `feats/<id>.mamf` and `<split>.jsonl` under `out_dir`; returns
/// the manifest path. Feature paths in the manifest are `out_dir`-joined.
pub fn write_corpus(toy: &ToySpec, split: Split, out_dir: &Path) -> Result<PathBuf> {
    let feats = out_dir.join("feats");
    std::fs::create_dir_all(&feats).map_err(crate::error::io_err(&feats))?;
    let mut records = Vec::new();
    for u in gen_corpus(toy, split)? {
        let path = feats.join(format!("{}.mamf", u.id));
        u.x.write(&path)?;
        records.push(Record {
            id: u.id,
            feat: Some(path.to_string_lossy().into_owned()),
            audio: None,
            transcript: Some(u.transcript),
            translation: Some(u.translation),
        });
    }
    let manifest = out_dir.join(format!("{}.jsonl", split.as_str()));
    crate::manifest::write(&manifest, &records)?;
    Ok(manifest)
}

/// In-memory training examples with ids encoded by the toy vocabularies.
pub fn gen_examples(toy: &ToySpec, split: Split) -> Result<Vec<Example>> {
    let (st, asr) = (toy.translation_vocab(), toy.transcript_vocab());
    Ok(gen_corpus(toy, split)?
        .into_iter()
        .map(|u| Example {
            y: Some(st.encode(&u.translation)),
            z: Some(asr.encode(&u.transcript)),
            id: u.id,
            x: u.x,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates() {
        let toy = ToySpec::default();
        assert_eq!(symbol_template(3, &toy).unwrap(), symbol_template(3, &toy).unwrap());
        let argmax = |row: &[f32]| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        let zero = symbol_template(0, &toy).unwrap();
        assert!(zero.chunks(20).all(|row| argmax(row) == 0));
        let peaks: Vec<usize> = (0..12).map(|s| argmax(&symbol_template(s, &toy).unwrap()[..20])).collect();
        assert_eq!(peaks, (0..12).collect::<Vec<_>>());
        assert!(symbol_template(12, &toy).is_err());
    }

    #[test]
    fn identity_bijection_swaps_pairs() {
        let toy = ToySpec {
            bijection: Some((0..12).collect()),
            ..ToySpec::default()
        };
        assert_eq!(toy.translate_symbols(&[2, 7]), vec![7, 2]);
        assert_eq!(toy.translate_symbols(&[1, 2, 3]), vec![2, 1, 3]);
    }

    #[test]
    fn default_bijection_is_a_permutation() {
        let toy = ToySpec::default();
        toy.validate().unwrap();
        let mut b = toy.bijection();
        b.sort_unstable();
        assert_eq!(b, (0..12).collect::<Vec<_>>());
        let bad = ToySpec {
            bijection: Some(vec![0; 12]),
            ..toy
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn utterance_contract() {
        let toy = ToySpec::default();
        for i in 0..50 {
            let u = gen_utterance(&toy, Split::Train, i).unwrap();
            assert_eq!(u.x.frames(), 4 * u.symbols.len());
            assert!((3..=8).contains(&u.symbols.len()));
            assert!(u.symbols.windows(2).all(|w| w[0] != w[1]));
            let mut relabeled: Vec<usize> = u.symbols.iter().map(|&s| toy.bijection()[s]).collect();
            let mut translated = toy.translate_symbols(&u.symbols);
            relabeled.sort_unstable();
            translated.sort_unstable();
            assert_eq!(relabeled, translated);
        }
        assert_ne!(
            gen_utterance(&toy, Split::Train, 0).unwrap().x,
            gen_utterance(&toy, Split::Dev, 0).unwrap().x
        );
    }
}
