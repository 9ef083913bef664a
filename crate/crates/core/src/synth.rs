//! Seeded synthetic corpora for both tasks.
//!
//! Classification examples carry their class as a motif (a 2–3 symbol
//! n-gram) embedded in the name field; the tag and poi fields carry weaker
//! class hints. Label noise replaces a label with a uniformly drawn class,
//! so the motif-lookup rule is Bayes-optimal with accuracy
//! `(1 - noise) + noise / num_classes`.
//!
//! NER sentences are filler symbols with 0–3 inserted lexicon words, each
//! tagged with its property type in BIO form.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::text::{Example, Input, Label, TagSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub num_classes: usize,
    pub alphabet_size: usize,
    pub motifs_per_class: usize,
    /// Probability that a label is replaced by a uniformly drawn class (for
    /// NER: that an inserted span is left untagged).
    pub noise: f64,
    pub name_len: (usize, usize),
    pub tag_len: (usize, usize),
    pub poi_len: (usize, usize),
    /// Probability that the tag field carries the true class's hint symbol
    /// rather than a random class's.
    pub tag_signal: f64,
    pub poi_signal: f64,
    pub ner_types: Vec<String>,
    pub lexicon_size: usize,
    pub span_len: (usize, usize),
    pub filler_len: (usize, usize),
    /// Relative frequency of 0, 1, 2 and 3 spans per sentence.
    pub span_count_weights: [f64; 4],
    pub labeled_train: usize,
    pub test: usize,
    pub unlabeled_pool: usize,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            alphabet_size: 60,
            motifs_per_class: 2,
            noise: 0.1,
            name_len: (6, 12),
            tag_len: (2, 4),
            poi_len: (3, 6),
            tag_signal: 0.5,
            poi_signal: 0.3,
            ner_types: vec!["COLOR".into(), "TASTE".into(), "SIZE".into()],
            lexicon_size: 12,
            span_len: (2, 4),
            filler_len: (1, 6),
            span_count_weights: [0.25; 4],
            labeled_train: 10_000,
            test: 5_000,
            unlabeled_pool: 50_000,
            seed: 0,
        }
    }
}

fn check_range(what: &str, (lo, hi): (usize, usize), min: usize) -> Result<()> {
    if lo < min || lo > hi {
        return Err(Error::config(format!("{what} range ({lo}, {hi}) must satisfy {min} <= lo <= hi")));
    }
    Ok(())
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.alphabet_size < 4 {
            return Err(Error::config("alphabet_size must be at least 4"));
        }
        if self.motifs_per_class == 0 {
            return Err(Error::config("motifs_per_class must be at least 1"));
        }
        for (what, p) in [("noise", self.noise), ("tag_signal", self.tag_signal), ("poi_signal", self.poi_signal)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{what} {p} outside [0, 1]")));
            }
        }
        check_range("name_len", self.name_len, 3)?;
        check_range("tag_len", self.tag_len, 1)?;
        check_range("poi_len", self.poi_len, 1)?;
        check_range("span_len", self.span_len, 1)?;
        check_range("filler_len", self.filler_len, 1)?;
        if self.ner_types.is_empty() || self.lexicon_size == 0 {
            return Err(Error::config("NER needs at least one type and a non-empty lexicon"));
        }
        if self.span_count_weights.iter().any(|w| !(*w >= 0.0)) || self.span_count_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("span_count_weights must be non-negative with a positive sum"));
        }
        if self.labeled_train == 0 || self.test == 0 || self.unlabeled_pool == 0 {
            return Err(Error::config("labeled_train, test and unlabeled_pool must all be at least 1"));
        }
        let motifs = self.num_classes * self.motifs_per_class;
        if motifs > self.alphabet_size * self.alphabet_size / 4 {
            return Err(Error::config(format!(
                "{motifs} motifs do not fit comfortably in a {}-symbol alphabet",
                self.alphabet_size
            )));
        }
        Ok(())
    }

    pub fn tag_set(&self) -> TagSet {
        TagSet::new(self.ner_types.iter().cloned())
    }

    /// Closed-form accuracy of the Bayes-optimal classifier.
    pub fn bayes_accuracy(&self) -> f64 {
        1.0 - self.noise + self.noise / self.num_classes as f64
    }
}

/// The `i`-th symbol: ASCII letters and digits first, then CJK ideographs.
pub fn symbol(i: usize) -> char {
    const ASCII: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
    match ASCII.get(i) {
        Some(&b) => b as char,
        None => char::from_u32(0x4E00 + (i - ASCII.len()) as u32).expect("CJK block"),
    }
}

fn random_string<R: Rng>(rng: &mut R, alphabet: usize, (lo, hi): (usize, usize)) -> String {
    let n = rng.gen_range(lo..=hi);
    (0..n).map(|_| symbol(rng.gen_range(0..alphabet))).collect()
}

/// Everything derived from the spec before examples are drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct Signatures {
    /// `motifs[class]` are that class's name motifs.
    pub motifs: Vec<Vec<String>>,
    /// One hint symbol per class for the tag field, another for poi.
    pub tag_hints: Vec<char>,
    pub poi_hints: Vec<char>,
    /// `lexicons[type]` are the words inserted as spans of that type.
    pub lexicons: Vec<Vec<String>>,
}

impl Signatures {
    pub fn new(spec: &GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let mut r = rng::stream(spec.seed, "synth/signatures");
        let a = spec.alphabet_size;
        let mut all: Vec<String> = Vec::new();
        let mut motifs = vec![Vec::new(); spec.num_classes];
        for class_motifs in motifs.iter_mut() {
            while class_motifs.len() < spec.motifs_per_class {
                let m: String = random_string(&mut r, a, (2, 3));
                // no motif may contain another, so occurrences are unambiguous
                if all.iter().any(|o| o.contains(&m) || m.contains(o.as_str())) {
                    continue;
                }
                all.push(m.clone());
                class_motifs.push(m);
            }
        }
        let mut symbols: Vec<char> = (0..a).map(symbol).collect();
        symbols.shuffle(&mut r);
        let tag_hints = (0..spec.num_classes).map(|c| symbols[c % a]).collect();
        let poi_hints = (0..spec.num_classes).map(|c| symbols[(c + spec.num_classes) % a]).collect();
        let mut lexicons = Vec::new();
        let mut words: Vec<String> = Vec::new();
        for _ in &spec.ner_types {
            let mut lex = Vec::new();
            while lex.len() < spec.lexicon_size {
                let w = random_string(&mut r, a, spec.span_len);
                if !words.contains(&w) {
                    words.push(w.clone());
                    lex.push(w);
                }
            }
            lexicons.push(lex);
        }
        Ok(Self {
            motifs,
            tag_hints,
            poi_hints,
            lexicons,
        })
    }

    /// Every `(class, start)` at which a motif occurs in `name`.
    pub fn motif_hits(&self, name: &str) -> Vec<(usize, usize)> {
        let chars: Vec<char> = name.chars().collect();
        let mut hits = Vec::new();
        for (c, ms) in self.motifs.iter().enumerate() {
            for m in ms {
                let m: Vec<char> = m.chars().collect();
                for s in 0..chars.len().saturating_sub(m.len() - 1) {
                    if chars[s..s + m.len()] == m[..] {
                        hits.push((c, s));
                    }
                }
            }
        }
        hits
    }

    /// The class whose motif appears in `name`, if exactly one does.
    pub fn lookup(&self, name: &str) -> Option<usize> {
        match self.motif_hits(name)[..] {
            [(c, _)] => Some(c),
            _ => None,
        }
    }
}

/// Train, test and unlabeled pool for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub pool: Vec<Example>,
}

/// Example ids: test first, then train, then pool.
fn id_ranges(spec: &GeneratorSpec) -> [std::ops::Range<u64>; 3] {
    let t = spec.test as u64;
    let l = t + spec.labeled_train as u64;
    [0..t, t..l, l..l + spec.unlabeled_pool as u64]
}

fn build<F>(spec: &GeneratorSpec, mut make: F) -> Result<SynthCorpus>
where
    F: FnMut(u64) -> Example,
{
    let [test, train, pool] = id_ranges(spec);
    Ok(SynthCorpus {
        test: test.map(&mut make).collect(),
        train: train.map(&mut make).collect(),
        pool: pool.map(|id| make(id).unlabeled()).collect(),
    })
}

/// One classification example; the per-example stream makes generation
/// independent of order.
pub fn classification_example(spec: &GeneratorSpec, sig: &Signatures, id: u64) -> Example {
    let mut r = rng::stream(spec.seed, &format!("synth/cls/{id}"));
    let a = spec.alphabet_size;
    let class = r.gen_range(0..spec.num_classes);
    let motif = sig.motifs[class].choose(&mut r).expect("motifs").clone();
    let m_len = motif.chars().count();
    let name = loop {
        let total = r.gen_range(spec.name_len.0.max(m_len)..=spec.name_len.1.max(m_len));
        let filler: Vec<char> = (0..total - m_len).map(|_| symbol(r.gen_range(0..a))).collect();
        let at = r.gen_range(0..=filler.len());
        let name: String = filler[..at].iter().copied().chain(motif.chars()).chain(filler[at..].iter().copied()).collect();
        if sig.motif_hits(&name).len() == 1 {
            break name;
        }
    };
    let hinted = |r: &mut rng::Rng, hints: &[char], signal: f64, len: (usize, usize)| {
        let hint_class = if r.gen::<f64>() < signal { class } else { r.gen_range(0..spec.num_classes) };
        let mut s: Vec<char> = random_string(r, a, len).chars().collect();
        let at = r.gen_range(0..=s.len());
        s.insert(at, hints[hint_class]);
        s.into_iter().collect::<String>()
    };
    let tag = hinted(&mut r, &sig.tag_hints, spec.tag_signal, spec.tag_len);
    let poi = hinted(&mut r, &sig.poi_hints, spec.poi_signal, spec.poi_len);
    let label = if r.gen::<f64>() < spec.noise { r.gen_range(0..spec.num_classes) } else { class };
    Example {
        id,
        input: Input::Fields { name, tag, poi },
        label: Some(Label::Class(label)),
    }
}

pub fn generate_classification_corpus(spec: &GeneratorSpec) -> Result<SynthCorpus> {
    let sig = Signatures::new(spec)?;
    build(spec, |id| classification_example(spec, &sig, id))
}

/// Number of spans drawn for a sentence.
fn span_count<R: Rng>(r: &mut R, weights: &[f64; 4]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = r.gen::<f64>() * total;
    for (k, &w) in weights.iter().enumerate() {
        if x < w {
            return k;
        }
        x -= w;
    }
    3
}

pub fn ner_example(spec: &GeneratorSpec, sig: &Signatures, tags: &TagSet, id: u64) -> Example {
    let mut r = rng::stream(spec.seed, &format!("synth/ner/{id}"));
    let a = spec.alphabet_size;
    let k = span_count(&mut r, &spec.span_count_weights);
    let mut text = String::new();
    let mut ids = Vec::new();
    let filler = |r: &mut rng::Rng, text: &mut String, ids: &mut Vec<usize>| {
        let f = random_string(r, a, spec.filler_len);
        ids.extend(std::iter::repeat(0).take(f.chars().count()));
        text.push_str(&f);
    };
    filler(&mut r, &mut text, &mut ids);
    for _ in 0..k {
        let ty = r.gen_range(0..sig.lexicons.len());
        let word = sig.lexicons[ty].choose(&mut r).expect("lexicon");
        let n = word.chars().count();
        if r.gen::<f64>() < spec.noise {
            ids.extend(std::iter::repeat(0).take(n));
        } else {
            ids.push(tags.begin(ty));
            ids.extend(std::iter::repeat(tags.inside(ty)).take(n - 1));
        }
        text.push_str(word);
        filler(&mut r, &mut text, &mut ids);
    }
    Example {
        id,
        input: Input::Text { text },
        label: Some(Label::Tags(ids)),
    }
}

pub fn generate_ner_corpus(spec: &GeneratorSpec) -> Result<SynthCorpus> {
    let sig = Signatures::new(spec)?;
    let tags = spec.tag_set();
    build(spec, |id| ner_example(spec, &sig, &tags, id))
}

/// Seed-deterministic split into `labeled_size` labeled examples and an
/// unlabeled remainder; both keep the corpus order.
pub fn split_labeled_unlabeled(corpus: &[Example], labeled_size: usize, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    if labeled_size > corpus.len() {
        return Err(Error::data(format!(
            "asked for {labeled_size} labeled examples from a corpus of {}",
            corpus.len()
        )));
    }
    let mut r = rng::stream(seed, "split");
    let chosen = rand::seq::index::sample(&mut r, corpus.len(), labeled_size);
    let mut take = vec![false; corpus.len()];
    for i in chosen.iter() {
        take[i] = true;
    }
    let mut labeled = Vec::with_capacity(labeled_size);
    let mut pool = Vec::with_capacity(corpus.len() - labeled_size);
    for (ex, t) in corpus.iter().zip(take) {
        if t {
            labeled.push(ex.clone());
        } else {
            pool.push(ex.unlabeled());
        }
    }
    Ok((labeled, pool))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorSpec {
        GeneratorSpec {
            labeled_train: 50,
            test: 20,
            unlabeled_pool: 30,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn ids_are_disjoint_and_pool_unlabeled() {
        let c = generate_classification_corpus(&small()).unwrap();
        let ids: std::collections::BTreeSet<u64> =
            c.test.iter().chain(&c.train).chain(&c.pool).map(|e| e.id).collect();
        assert_eq!(ids.len(), 100);
        assert!(c.pool.iter().all(|e| e.label.is_none()));
    }

    #[test]
    fn generation_is_pure() {
        assert_eq!(generate_ner_corpus(&small()).unwrap(), generate_ner_corpus(&small()).unwrap());
        let other = GeneratorSpec { seed: 1, ..small() };
        assert_ne!(generate_classification_corpus(&small()).unwrap(), generate_classification_corpus(&other).unwrap());
    }

    #[test]
    fn every_name_holds_exactly_one_motif() {
        let spec = GeneratorSpec { noise: 0.0, ..small() };
        let sig = Signatures::new(&spec).unwrap();
        for ex in generate_classification_corpus(&spec).unwrap().train {
            let Input::Fields { name, .. } = &ex.input else { panic!() };
            assert_eq!(sig.lookup(name), ex.class());
        }
    }

    #[test]
    fn zero_weight_everywhere_but_none_gives_all_o() {
        let spec = GeneratorSpec {
            span_count_weights: [1.0, 0.0, 0.0, 0.0],
            ..small()
        };
        for ex in generate_ner_corpus(&spec).unwrap().train {
            assert!(ex.tags().unwrap().iter().all(|&t| t == 0));
        }
    }

    #[test]
    fn validation() {
        assert!(GeneratorSpec { noise: 1.5, ..small() }.validate().is_err());
        assert!(GeneratorSpec { test: 0, ..small() }.validate().is_err());
        assert!(GeneratorSpec { name_len: (5, 2), ..small() }.validate().is_err());
        assert!(GeneratorSpec { num_classes: 1, ..small() }.validate().is_err());
    }

    #[test]
    fn split_edges() {
        let c = generate_classification_corpus(&small()).unwrap();
        let (l, p) = split_labeled_unlabeled(&c.train, 50, 3).unwrap();
        assert_eq!(l.len(), 50);
        assert!(p.is_empty());
        assert!(split_labeled_unlabeled(&c.train, 51, 3).is_err());
        assert_eq!(split_labeled_unlabeled(&c.train, 10, 3).unwrap(), split_labeled_unlabeled(&c.train, 10, 3).unwrap());
    }
}
