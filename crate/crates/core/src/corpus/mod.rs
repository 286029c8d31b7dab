// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic multilingual translation corpus.
//!
//! Three languages share one vocabulary. Each owns a contiguous block of
//! `width` content tokens; a word is its index within the block, and the
//! ground-truth translation maps word indices through per-language
//! permutations of the pivot (identity by default).

mod prompt;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenId, TokenSeq};
pub use prompt::{
    length_bin, make_shuffled, parse_prompt, render_prompt, sample_exemplars, Field, ParsedPrompt,
    PromptInstance, PromptTemplate, SampleStrategy, TemplateVariant,
};

pub const BOS: TokenId = 0;
pub const NL: TokenId = 1;
pub const SEP: TokenId = 2;
/// BOS, NL, SEP and one tag per language.
pub const N_SPECIALS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Lang {
    /// The pivot language.
    E,
    D,
    Z,
}

impl Lang {
    pub const ALL: [Lang; 3] = [Lang::E, Lang::D, Lang::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        match self {
            Lang::E => "en",
            Lang::D => "de",
            Lang::Z => "zh",
        }
    }

    pub fn tag(self) -> TokenId {
        3 + self as TokenId
    }

    pub fn from_code(s: &str) -> Option<Lang> {
        Lang::ALL.into_iter().find(|l| l.code() == s)
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// A translation direction, written `en-de` etc.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Setting {
    pub src: Lang,
    pub tgt: Lang,
}

impl Setting {
    pub const fn new(src: Lang, tgt: Lang) -> Self {
        Setting { src, tgt }
    }

    /// en-de, de-en, en-zh, zh-en.
    pub const ALL: [Setting; 4] = [
        Setting::new(Lang::E, Lang::D),
        Setting::new(Lang::D, Lang::E),
        Setting::new(Lang::E, Lang::Z),
        Setting::new(Lang::Z, Lang::E),
    ];
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

impl FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('-')
            .ok_or_else(|| Error::InvalidArgument(format!("bad setting `{s}`")))?;
        match (Lang::from_code(a), Lang::from_code(b)) {
            (Some(src), Some(tgt)) if src != tgt => Ok(Setting { src, tgt }),
            _ => Err(Error::InvalidArgument(format!("bad setting `{s}`"))),
        }
    }
}

impl Serialize for Setting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Setting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-language token block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub lang: Lang,
    pub tag_token: TokenId,
    /// Half-open `[start, end)`.
    pub content_range: (TokenId, TokenId),
}

/// Where every language lives in the vocabulary, plus the word mapping.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub width: usize,
    pub languages: Vec<LanguageSpec>,
    /// `perm[L][pivot_index]` is the index of the same word in language `L`.
    pub perm: Vec<Vec<usize>>,
    inv: Vec<Vec<usize>>,
}

impl VocabLayout {
    /// Identity word mapping.
    pub fn new(width: usize) -> Result<Self> {
        Self::build(width, None)
    }

    /// Non-pivot languages get seeded random permutations.
    pub fn permuted(width: usize, seed: u64) -> Result<Self> {
        Self::build(width, Some(seed))
    }

    fn build(width: usize, seed: Option<u64>) -> Result<Self> {
        if width < 2 {
            return Err(Error::Corpus(format!("vocabulary width {width} < 2")));
        }
        let top = N_SPECIALS as u64 + 3 * width as u64;
        if top > TokenId::MAX as u64 {
            return Err(Error::Corpus(format!(
                "vocabulary layout overflow: {top} tokens"
            )));
        }
        let languages = Lang::ALL
            .iter()
            .map(|&lang| {
                let start = (N_SPECIALS + lang.index() * width) as TokenId;
                LanguageSpec {
                    lang,
                    tag_token: lang.tag(),
                    content_range: (start, start + width as TokenId),
                }
            })
            .collect();
        let mut perm: Vec<Vec<usize>> = vec![(0..width).collect(); 3];
        if let Some(seed) = seed {
            let mut rng = crate::rng::named(seed, "vocab-perm");
            for p in perm.iter_mut().skip(1) {
                p.shuffle(&mut rng);
            }
        }
        let inv = perm
            .iter()
            .map(|p| {
                let mut v = vec![0; width];
                for (i, &j) in p.iter().enumerate() {
                    v[j] = i;
                }
                v
            })
            .collect();
        Ok(VocabLayout {
            width,
            languages,
            perm,
            inv,
        })
    }

    /// Smallest model vocabulary that holds the layout.
    pub fn vocab_size(&self) -> usize {
        N_SPECIALS + 3 * self.width
    }

    /// Fails if the layout does not fit in a model vocabulary of `vocab_size`.
    pub fn check_fits(&self, vocab_size: usize) -> Result<()> {
        if self.vocab_size() > vocab_size {
            return Err(Error::Corpus(format!(
                "vocabulary layout overflow: needs {} ids, model has {vocab_size}",
                self.vocab_size()
            )));
        }
        Ok(())
    }

    pub fn spec(&self, lang: Lang) -> &LanguageSpec {
        &self.languages[lang.index()]
    }

    pub fn token(&self, lang: Lang, index: usize) -> TokenId {
        self.spec(lang).content_range.0 + index as TokenId
    }

    /// Language and in-block index of a content token.
    pub fn word(&self, token: TokenId) -> Option<(Lang, usize)> {
        let t = token as usize;
        if t < N_SPECIALS || t >= self.vocab_size() {
            return None;
        }
        let k = t - N_SPECIALS;
        Some((Lang::ALL[k / self.width], k % self.width))
    }

    pub fn language_of(&self, token: TokenId) -> Option<Lang> {
        self.word(token).map(|(l, _)| l)
    }

    /// Translates one content token; specials and foreign tokens pass through.
    pub fn translate_token(&self, token: TokenId, from: Lang, to: Lang) -> TokenId {
        match self.word(token) {
            Some((l, i)) if l == from => {
                let pivot = self.inv[from.index()][i];
                self.token(to, self.perm[to.index()][pivot])
            }
            _ => token,
        }
    }

    pub fn translate(&self, seq: &[TokenId], from: Lang, to: Lang) -> TokenSeq {
        TokenSeq(
            seq.iter()
                .map(|&t| self.translate_token(t, from, to))
                .collect(),
        )
    }
}

/// One parallel sentence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TranslationPair {
    pub setting: Setting,
    pub src: TokenSeq,
    pub tgt: TokenSeq,
}

impl TranslationPair {
    /// Checks the word-level translation invariant.
    pub fn validate(&self, layout: &VocabLayout) -> Result<()> {
        if self.src.len() != self.tgt.len() {
            return Err(Error::Corpus("source and target lengths differ".into()));
        }
        for (&s, &t) in self.src.iter().zip(self.tgt.iter()) {
            if layout.language_of(s) != Some(self.setting.src) {
                return Err(Error::Corpus(format!(
                    "source token {s} outside {}",
                    self.setting.src
                )));
            }
            if layout.translate_token(s, self.setting.src, self.setting.tgt) != t {
                return Err(Error::Corpus(format!(
                    "target token {t} is not the translation of {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Number of pairs per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub exps: usize,
    pub train: usize,
    pub test: usize,
}

impl SplitSizes {
    pub const fn new(exps: usize, train: usize, test: usize) -> Self {
        SplitSizes { exps, train, test }
    }

    /// Sizes of the WMT-derived splits for each direction.
    pub fn reference(setting: Setting) -> Self {
        match (setting.src, setting.tgt) {
            (Lang::E, Lang::D) => SplitSizes::new(1002, 2037, 557),
            (Lang::D, Lang::E) => SplitSizes::new(1000, 1984, 549),
            (Lang::E, Lang::Z) => SplitSizes::new(1002, 2037, 2074),
            (Lang::Z, Lang::E) => SplitSizes::new(1948, 1875, 1976),
            _ => SplitSizes::new(1000, 2000, 500),
        }
    }

    fn total(&self) -> usize {
        self.exps + self.train + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub width: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub settings: Vec<Setting>,
    pub sizes: BTreeMap<Setting, SplitSizes>,
    /// Use random word permutations instead of the identity mapping.
    #[serde(default)]
    pub permuted: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            width: 50,
            min_len: 3,
            max_len: 8,
            settings: Setting::ALL.to_vec(),
            sizes: Setting::ALL
                .iter()
                .map(|&s| (s, SplitSizes::reference(s)))
                .collect(),
            permuted: false,
        }
    }
}

impl CorpusConfig {
    /// Same layout with every split capped at `n` pairs.
    pub fn scaled(mut self, n: usize) -> Self {
        for s in self.sizes.values_mut() {
            s.exps = s.exps.min(n);
            s.train = s.train.min(n);
            s.test = s.test.min(n);
        }
        self
    }

    pub fn layout(&self) -> Result<VocabLayout> {
        if self.permuted {
            VocabLayout::permuted(self.width, self.seed)
        } else {
            VocabLayout::new(self.width)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub exps: Vec<TranslationPair>,
    pub train: Vec<TranslationPair>,
    pub test: Vec<TranslationPair>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Option<&[TranslationPair]> {
        match name {
            "exps" => Some(&self.exps),
            "train" => Some(&self.train),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// All splits for all settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub layout: VocabLayout,
    pub settings: BTreeMap<Setting, Splits>,
}

impl DatasetSplits {
    pub fn splits(&self, setting: Setting) -> Result<&Splits> {
        self.settings
            .get(&setting)
            .ok_or_else(|| Error::Corpus(format!("no data for setting {setting}")))
    }

    /// Writes `<dir>/<setting>/{exps,train,test}.jsonl` and `<dir>/layout.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lp = dir.join("layout.json");
        fs::write(&lp, serde_json::to_string_pretty(&self.layout)?)
            .map_err(|e| Error::io(&lp, e))?;
        for (setting, splits) in &self.settings {
            let sd = dir.join(setting.to_string());
            fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
            for (name, pairs) in [
                ("exps", &splits.exps),
                ("train", &splits.train),
                ("test", &splits.test),
            ] {
                let p = sd.join(format!("{name}.jsonl"));
                let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
                for pair in pairs {
                    writeln!(f, "{}", serde_json::to_string(pair)?)
                        .map_err(|e| Error::io(&p, e))?;
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let lp = dir.join("layout.json");
        let text = fs::read_to_string(&lp).map_err(|e| Error::io(&lp, e))?;
        let layout: VocabLayout = serde_json::from_str(&text)?;
        let mut settings = BTreeMap::new();
        for setting in Setting::ALL {
            let sd = dir.join(setting.to_string());
            if !sd.is_dir() {
                continue;
            }
            let mut splits = Splits::default();
            for name in ["exps", "train", "test"] {
                let p = sd.join(format!("{name}.jsonl"));
                let f = fs::File::open(&p).map_err(|e| Error::io(&p, e))?;
                let mut v = Vec::new();
                for line in BufReader::new(f).lines() {
                    let line = line.map_err(|e| Error::io(&p, e))?;
                    if !line.trim().is_empty() {
                        v.push(serde_json::from_str(&line)?);
                    }
                }
                match name {
                    "exps" => splits.exps = v,
                    "train" => splits.train = v,
                    _ => splits.test = v,
                }
            }
            settings.insert(setting, splits);
        }
        Ok(DatasetSplits { layout, settings })
    }
}

/// Builds disjoint exps/train/test splits for every configured setting.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<DatasetSplits> {
    let layout = cfg.layout()?;
    if cfg.min_len < 1 || cfg.min_len > cfg.max_len {
        return Err(Error::Corpus(format!(
            "bad length range [{}, {}]",
            cfg.min_len, cfg.max_len
        )));
    }
    let mut settings = BTreeMap::new();
    for &setting in &cfg.settings {
        let sizes = cfg
            .sizes
            .get(&setting)
            .copied()
            .unwrap_or_else(|| SplitSizes::reference(setting));
        if sizes.exps == 0 || sizes.train == 0 || sizes.test == 0 {
            return Err(Error::Corpus(format!(
                "empty split requested for {setting}"
            )));
        }
        let capacity: f64 = (cfg.min_len..=cfg.max_len)
            .map(|l| (layout.width as f64).powi(l as i32))
            .sum();
        if (sizes.total() as f64) > capacity {
            return Err(Error::Corpus(format!(
                "{setting}: {} distinct sentences requested, only {capacity} exist",
                sizes.total()
            )));
        }
        let mut rng = crate::rng::named(cfg.seed, &format!("corpus/{setting}"));
        let mut seen = HashSet::new();
        let mut draw = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let len = rng.gen_range(cfg.min_len..=cfg.max_len);
                let src: Vec<TokenId> = (0..len)
                    .map(|_| layout.token(setting.src, rng.gen_range(0..layout.width)))
                    .collect();
                if !seen.insert(src.clone()) {
                    continue;
                }
                let tgt = layout.translate(&src, setting.src, setting.tgt);
                out.push(TranslationPair {
                    setting,
                    src: TokenSeq(src),
                    tgt,
                });
            }
            out
        };
        let exps = draw(sizes.exps, &mut rng);
        let train = draw(sizes.train, &mut rng);
        let test = draw(sizes.test, &mut rng);
        settings.insert(setting, Splits { exps, train, test });
    }
    Ok(DatasetSplits { layout, settings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        let mut c = CorpusConfig::default().scaled(40);
        c.seed = 9;
        c
    }

    #[test]
    fn layout_arithmetic() {
        let l = VocabLayout::new(50).unwrap();
        assert_eq!(l.spec(Lang::E).content_range, (6, 56));
        assert_eq!(l.spec(Lang::D).content_range, (56, 106));
        assert_eq!(l.spec(Lang::Z).content_range, (106, 156));
        assert_eq!(l.vocab_size(), 156);
        assert!(l.check_fits(150).is_err());
        assert!(VocabLayout::new(1).is_err());
    }

    #[test]
    fn round_trip_translation_is_identity() {
        for l in [
            VocabLayout::new(20).unwrap(),
            VocabLayout::permuted(20, 4).unwrap(),
        ] {
            for t in 6..26 {
                let d = l.translate_token(t, Lang::E, Lang::D);
                assert_eq!(l.language_of(d), Some(Lang::D));
                assert_eq!(l.translate_token(d, Lang::D, Lang::E), t);
                let z = l.translate_token(d, Lang::D, Lang::Z);
                assert_eq!(l.translate_token(z, Lang::Z, Lang::E), t);
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_valid() {
        let ds = generate_corpus(&small()).unwrap();
        for (setting, s) in &ds.settings {
            let mut all = HashSet::new();
            for p in s.exps.iter().chain(&s.train).chain(&s.test) {
                p.validate(&ds.layout).unwrap();
                assert_eq!(p.setting, *setting);
                assert!((3..=8).contains(&p.src.len()));
                assert!(all.insert(p.src.clone()));
            }
        }
    }

    #[test]
    fn reference_sizes_by_default() {
        let c = CorpusConfig::default();
        let ed = Setting::new(Lang::E, Lang::D);
        assert_eq!(c.sizes[&ed], SplitSizes::new(1002, 2037, 557));
    }

    #[test]
    fn deterministic_and_persistable() {
        let a = generate_corpus(&small()).unwrap();
        assert_eq!(a, generate_corpus(&small()).unwrap());
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        assert_eq!(DatasetSplits::load(dir.path()).unwrap(), a);
    }

    #[test]
    fn setting_parses() {
        let s: Setting = "zh-en".parse().unwrap();
        assert_eq!(s, Setting::new(Lang::Z, Lang::E));
        assert!("en-en".parse::<Setting>().is_err());
    }
}
