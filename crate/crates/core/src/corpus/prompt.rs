// SPDX-License-Identifier: MIT OR Apache-2.0

//! K-shot prompt rendering, parsing, shuffling and exemplar sampling.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Lang, Setting, TranslationPair, NL, SEP};
use crate::error::{Error, Result};
use crate::model::{TokenId, TokenSeq};

/// One element of a sentence line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Field {
    Tag,
    Sep,
    Slot,
    Nl,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateVariant {
    /// `tag SEP sentence NL`
    #[default]
    LangPrompt,
    /// `tag sentence NL`
    NoSep,
    /// `SEP tag sentence NL`
    SepFirst,
}

/// Framing of one sentence line; a prompt is a sequence of such lines.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub variant: TemplateVariant,
    pub fields: Vec<Field>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::new(TemplateVariant::LangPrompt)
    }
}

impl PromptTemplate {
    pub fn new(variant: TemplateVariant) -> Self {
        let fields = match variant {
            TemplateVariant::LangPrompt => vec![Field::Tag, Field::Sep, Field::Slot, Field::Nl],
            TemplateVariant::NoSep => vec![Field::Tag, Field::Slot, Field::Nl],
            TemplateVariant::SepFirst => vec![Field::Sep, Field::Tag, Field::Slot, Field::Nl],
        };
        PromptTemplate { variant, fields }
    }

    fn slot_index(&self) -> usize {
        self.fields
            .iter()
            .position(|&f| f == Field::Slot)
            .expect("template has a slot")
    }

    fn push_line(&self, out: &mut Vec<TokenId>, lang: Lang, sentence: Option<&[TokenId]>) {
        for &f in &self.fields {
            match f {
                Field::Tag => out.push(lang.tag()),
                Field::Sep => out.push(SEP),
                Field::Nl => out.push(NL),
                Field::Slot => match sentence {
                    Some(s) => out.extend_from_slice(s),
                    None => return,
                },
            }
        }
    }
}

/// A rendered K-shot prompt and what went into it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub k: usize,
    pub exemplars: Vec<TranslationPair>,
    pub query: TranslationPair,
    pub rendered: TokenSeq,
    pub shuffled: bool,
    pub setting: Setting,
    pub template: PromptTemplate,
}

/// Renders `k` exemplars followed by the query source and the opening of
/// the target line.
pub fn render_prompt(
    template: &PromptTemplate,
    exemplars: &[TranslationPair],
    query: &TranslationPair,
    k: usize,
) -> Result<PromptInstance> {
    if exemplars.len() != k {
        return Err(Error::Prompt(format!(
            "expected {k} exemplars, got {}",
            exemplars.len()
        )));
    }
    let setting = query.setting;
    if let Some(e) = exemplars.iter().find(|e| e.setting != setting) {
        return Err(Error::Prompt(format!(
            "exemplar setting {} does not match query setting {setting}",
            e.setting
        )));
    }
    let mut out = Vec::new();
    for e in exemplars {
        template.push_line(&mut out, setting.src, Some(&e.src));
        template.push_line(&mut out, setting.tgt, Some(&e.tgt));
    }
    template.push_line(&mut out, setting.src, Some(&query.src));
    template.push_line(&mut out, setting.tgt, None);
    Ok(PromptInstance {
        k,
        exemplars: exemplars.to_vec(),
        query: query.clone(),
        rendered: TokenSeq(out),
        shuffled: false,
        setting,
        template: template.clone(),
    })
}

/// What can be recovered from a rendered prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub setting: Setting,
    pub exemplars: Vec<(TokenSeq, TokenSeq)>,
    pub query_src: TokenSeq,
}

impl ParsedPrompt {
    pub fn k(&self) -> usize {
        self.exemplars.len()
    }
}

/// Inverse of [`render_prompt`] for a known template.
pub fn parse_prompt(tokens: &[TokenId], template: &PromptTemplate) -> Result<ParsedPrompt> {
    let bad = |m: &str| Err(Error::Prompt(m.to_string()));
    let slot = template.slot_index();
    let after_slot = template.fields.get(slot + 1).copied();
    let mut lines: Vec<(Lang, Option<TokenSeq>)> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut lang = None;
        let mut sentence = None;
        for (fi, &f) in template.fields.iter().enumerate() {
            if fi == slot && i == tokens.len() {
                break;
            }
            match f {
                Field::Tag => {
                    let t = *tokens
                        .get(i)
                        .ok_or_else(|| Error::Prompt("truncated line".into()))?;
                    lang = Lang::ALL.into_iter().find(|l| l.tag() == t);
                    if lang.is_none() {
                        return bad("expected a language tag");
                    }
                    i += 1;
                }
                Field::Sep | Field::Nl => {
                    let want = if f == Field::Sep { SEP } else { NL };
                    if tokens.get(i) != Some(&want) {
                        return bad("unexpected token where a separator belongs");
                    }
                    i += 1;
                }
                Field::Slot => {
                    let stop = match after_slot {
                        Some(Field::Nl) => NL,
                        Some(Field::Sep) => SEP,
                        _ => return bad("template slot must be followed by a separator"),
                    };
                    let start = i;
                    while i < tokens.len() && tokens[i] != stop {
                        i += 1;
                    }
                    if i == start {
                        return bad("empty sentence slot");
                    }
                    sentence = Some(TokenSeq(tokens[start..i].to_vec()));
                }
            }
        }
        let lang = lang.ok_or_else(|| Error::Prompt("line without tag".into()))?;
        let done = sentence.is_none();
        lines.push((lang, sentence));
        if done {
            break;
        }
    }
    if i != tokens.len() {
        return bad("trailing tokens after the open target line");
    }
    let n = lines.len();
    if n < 2 || n % 2 != 0 || lines[n - 1].1.is_some() {
        return bad("prompt must end with an open target line");
    }
    let setting = Setting {
        src: lines[0].0,
        tgt: lines[n - 1].0,
    };
    let mut exemplars = Vec::new();
    for pair in lines[..n - 2].chunks(2) {
        if pair[0].0 != setting.src || pair[1].0 != setting.tgt {
            return bad("inconsistent languages across lines");
        }
        exemplars.push((pair[0].1.clone().unwrap(), pair[1].1.clone().unwrap()));
    }
    if lines[n - 2].0 != setting.src {
        return bad("query line language mismatch");
    }
    Ok(ParsedPrompt {
        setting,
        exemplars,
        query_src: lines[n - 2].1.clone().unwrap(),
    })
}

/// Replaces every exemplar target with a different target from `pool`.
pub fn make_shuffled(
    prompt: &PromptInstance,
    pool: &[TranslationPair],
    seed: u64,
) -> Result<PromptInstance> {
    let mut rng = crate::rng::named(seed, "shuffle");
    let mut exemplars = prompt.exemplars.clone();
    for e in exemplars.iter_mut() {
        let candidates: Vec<&TranslationPair> = pool
            .iter()
            .filter(|p| p.setting == e.setting && p.tgt != e.tgt)
            .collect();
        let pick = candidates
            .choose(&mut rng)
            .ok_or_else(|| Error::Prompt("shuffle pool has no alternative target".into()))?;
        e.tgt = pick.tgt.clone();
    }
    let mut out = render_prompt(&prompt.template, &exemplars, &prompt.query, prompt.k)?;
    out.shuffled = true;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleStrategy {
    Uniform,
    /// Match the query's source length bin.
    LengthBinned {
        query_len: usize,
    },
}

/// Length bin of width two: {1,2}, {3,4}, {5,6}, ...
pub fn length_bin(len: usize) -> usize {
    len.saturating_sub(1) / 2
}

/// Draws `k` distinct exemplars from `split`.
pub fn sample_exemplars(
    split: &[TranslationPair],
    k: usize,
    strategy: SampleStrategy,
    rng: &mut impl Rng,
) -> Result<Vec<TranslationPair>> {
    if split.is_empty() {
        return Err(Error::Corpus("cannot sample from an empty split".into()));
    }
    if k > split.len() {
        return Err(Error::Corpus(format!(
            "asked for {k} exemplars from {} pairs",
            split.len()
        )));
    }
    match strategy {
        SampleStrategy::Uniform => Ok(rand::seq::index::sample(rng, split.len(), k)
            .into_iter()
            .map(|i| split[i].clone())
            .collect()),
        SampleStrategy::LengthBinned { query_len } => {
            let qb = length_bin(query_len);
            let max_bin = split
                .iter()
                .map(|p| length_bin(p.src.len()))
                .max()
                .unwrap_or(0);
            let mut order: Vec<usize> = (0..=max_bin.max(qb)).collect();
            order.sort_by_key(|&b| (b.abs_diff(qb), b));
            let mut out = Vec::with_capacity(k);
            for b in order {
                if out.len() == k {
                    break;
                }
                let mut members: Vec<usize> = (0..split.len())
                    .filter(|&i| length_bin(split[i].src.len()) == b)
                    .collect();
                members.shuffle(rng);
                for i in members.into_iter().take(k - out.len()) {
                    out.push(split[i].clone());
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig, VocabLayout};

    fn pair(layout: &VocabLayout, s: Setting, idx: &[usize]) -> TranslationPair {
        let src: Vec<TokenId> = idx.iter().map(|&i| layout.token(s.src, i)).collect();
        TranslationPair {
            setting: s,
            tgt: layout.translate(&src, s.src, s.tgt),
            src: TokenSeq(src),
        }
    }

    #[test]
    fn zero_shot_layout() {
        let l = VocabLayout::new(50).unwrap();
        let s = Setting::new(Lang::E, Lang::Z);
        let q = pair(&l, s, &[1, 2, 3]);
        let p = render_prompt(&PromptTemplate::default(), &[], &q, 0).unwrap();
        assert_eq!(p.rendered.0, vec![3, SEP, 7, 8, 9, NL, 5, SEP]);
    }

    #[test]
    fn one_shot_length() {
        let l = VocabLayout::new(50).unwrap();
        let s = Setting::new(Lang::D, Lang::E);
        let e = pair(&l, s, &[4, 4, 4, 4]);
        let q = pair(&l, s, &[1, 2]);
        let p = render_prompt(&PromptTemplate::default(), &[e], &q, 1).unwrap();
        // exemplar line pair: 2n + 6; open query: m + 5
        assert_eq!(p.rendered.len(), (2 * 4 + 6) + (2 + 5));
    }

    #[test]
    fn setting_mismatch_is_rejected() {
        let l = VocabLayout::new(10).unwrap();
        let e = pair(&l, Setting::new(Lang::E, Lang::D), &[1]);
        let q = pair(&l, Setting::new(Lang::E, Lang::Z), &[1]);
        assert!(render_prompt(&PromptTemplate::default(), &[e], &q, 1).is_err());
    }

    #[test]
    fn parser_inverts_every_variant() {
        let ds = generate_corpus(&CorpusConfig::default().scaled(12)).unwrap();
        for variant in [
            TemplateVariant::LangPrompt,
            TemplateVariant::NoSep,
            TemplateVariant::SepFirst,
        ] {
            let t = PromptTemplate::new(variant);
            for (setting, s) in &ds.settings {
                let p = render_prompt(&t, &s.exps[..3], &s.test[0], 3).unwrap();
                let parsed = parse_prompt(&p.rendered, &t).unwrap();
                assert_eq!(parsed.setting, *setting);
                assert_eq!(parsed.k(), 3);
                assert_eq!(parsed.query_src, s.test[0].src);
                for (e, (src, tgt)) in s.exps[..3].iter().zip(&parsed.exemplars) {
                    assert_eq!(&e.src, src);
                    assert_eq!(&e.tgt, tgt);
                }
            }
        }
    }

    #[test]
    fn shuffle_forces_a_different_target() {
        let l = VocabLayout::new(10).unwrap();
        let s = Setting::new(Lang::E, Lang::D);
        let a = pair(&l, s, &[1, 2]);
        let b = pair(&l, s, &[3]);
        let q = pair(&l, s, &[5, 6, 7]);
        let p = render_prompt(&PromptTemplate::default(), std::slice::from_ref(&a), &q, 1).unwrap();
        for seed in 0..20 {
            let sh = make_shuffled(&p, &[a.clone(), b.clone()], seed).unwrap();
            assert_eq!(sh.exemplars[0].tgt, b.tgt);
            assert_eq!(sh.query, q);
            assert!(sh.shuffled);
        }
        assert!(make_shuffled(&p, std::slice::from_ref(&a), 0).is_err());
    }

    #[test]
    fn length_binned_sampling() {
        let ds = generate_corpus(&CorpusConfig::default().scaled(200)).unwrap();
        let split = &ds.settings.values().next().unwrap().exps;
        let mut rng = crate::rng::stream(1, 0);
        for _ in 0..20 {
            let e = sample_exemplars(
                split,
                1,
                SampleStrategy::LengthBinned { query_len: 5 },
                &mut rng,
            )
            .unwrap();
            assert!(matches!(e[0].src.len(), 5 | 6));
        }
        let e = sample_exemplars(split, 5, SampleStrategy::Uniform, &mut rng).unwrap();
        let set: std::collections::HashSet<_> = e.iter().map(|p| p.src.clone()).collect();
        assert_eq!(set.len(), 5);
        assert!(sample_exemplars(&[], 1, SampleStrategy::Uniform, &mut rng).is_err());
    }

    #[test]
    fn binned_sampling_falls_back_to_nearest_bin() {
        let l = VocabLayout::new(10).unwrap();
        let s = Setting::new(Lang::E, Lang::D);
        let split = vec![pair(&l, s, &[1]), pair(&l, s, &[1, 2, 3, 4, 5, 6, 7])];
        let mut rng = crate::rng::stream(2, 0);
        let e = sample_exemplars(
            &split,
            1,
            SampleStrategy::LengthBinned { query_len: 3 },
            &mut rng,
        )
        .unwrap();
        assert_eq!(e[0].src.len(), 1);
    }
}
