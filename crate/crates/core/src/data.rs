//! Synthetic topic-structured corpora and JSONL ingestion.
//!
//! Vocabulary layout: id 0 is `[CLS]`, then shared background terms, then
//! `terms_per_topic` terms for each latent topic, then entity tokens. Each
//! document owns `entities_per_doc` entity tokens that no other document
//! uses, which is what makes query→document mapping learnable at this scale.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoder::CLS;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    Natural,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocRecord {
    pub doc_id: String,
    pub corpus: usize,
    pub tokens: Vec<u32>,
}

/// A query; `tokens` excludes the `[CLS]` prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub query_id: String,
    pub doc_id: String,
    pub corpus: usize,
    pub split: Split,
    pub kind: QueryKind,
    pub tokens: Vec<u32>,
}

impl QueryRecord {
    /// Token ids with `[CLS]` prepended, ready for the encoder.
    pub fn encoded(&self) -> Vec<u32> {
        let mut v = Vec::with_capacity(self.tokens.len() + 1);
        v.push(CLS);
        v.extend_from_slice(&self.tokens);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub index: usize,
    pub docs: Vec<DocRecord>,
    pub queries: Vec<QueryRecord>,
}

impl Corpus {
    pub fn queries_in(&self, split: Split) -> impl Iterator<Item = &QueryRecord> {
        self.queries.iter().filter(move |q| q.split == split)
    }

    pub fn doc_ids(&self) -> Vec<&str> {
        self.docs.iter().map(|d| d.doc_id.as_str()).collect()
    }
}

/// `D_0 … D_T` in arrival order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorpusTimeline {
    pub corpora: Vec<Corpus>,
}

impl CorpusTimeline {
    pub fn len(&self) -> usize {
        self.corpora.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corpora.is_empty()
    }

    /// Number of increments after `D_0`.
    pub fn horizon(&self) -> usize {
        self.corpora.len().saturating_sub(1)
    }

    pub fn max_query_len(&self) -> usize {
        self.corpora
            .iter()
            .flat_map(|c| &c.queries)
            .map(|q| q.tokens.len())
            .max()
            .unwrap_or(0)
    }

    pub fn max_token(&self) -> u32 {
        self.corpora
            .iter()
            .flat_map(|c| {
                c.docs
                    .iter()
                    .map(|d| &d.tokens)
                    .chain(c.queries.iter().map(|q| &q.tokens))
            })
            .flat_map(|t| t.iter().copied())
            .max()
            .unwrap_or(0)
    }

    /// Checks cross-record consistency: unique ids, disjoint docid sets,
    /// every query pointing at a document of its own corpus.
    pub fn validate(&self) -> Result<()> {
        let mut docs: BTreeMap<&str, usize> = BTreeMap::new();
        for c in &self.corpora {
            for d in &c.docs {
                if d.corpus != c.index {
                    return Err(Error::Data(format!(
                        "document {} tagged corpus {} inside corpus {}",
                        d.doc_id, d.corpus, c.index
                    )));
                }
                if docs.insert(&d.doc_id, c.index).is_some() {
                    return Err(Error::Data(format!("duplicate document id {}", d.doc_id)));
                }
            }
        }
        let mut qids = HashSet::new();
        for c in &self.corpora {
            for q in &c.queries {
                if !qids.insert(&q.query_id) {
                    return Err(Error::Data(format!("duplicate query id {}", q.query_id)));
                }
                match docs.get(q.doc_id.as_str()) {
                    Some(&dc) if dc == c.index && q.corpus == c.index => {}
                    _ => {
                        return Err(Error::Data(format!(
                            "query {} points at {} outside corpus {}",
                            q.query_id, q.doc_id, c.index
                        )))
                    }
                }
                if q.split == Split::Test && q.kind != QueryKind::Natural {
                    return Err(Error::Data(format!(
                        "test query {} must be natural",
                        q.query_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub num_topics: usize,
    pub general_terms: usize,
    pub terms_per_topic: usize,
    pub docs_initial: usize,
    pub docs_per_increment: usize,
    pub increments: usize,
    pub entities_per_doc: usize,
    pub body_len: usize,
    /// Probability that a body token is drawn from the document's topic
    /// rather than the shared background.
    pub topic_mass: f64,
    pub natural_train_initial: usize,
    pub natural_train_new: usize,
    pub val_per_doc: usize,
    pub test_per_doc: usize,
    pub pseudo_per_doc: usize,
    pub query_entities: (usize, usize),
    pub query_terms: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 1280,
            num_topics: 8,
            general_terms: 48,
            terms_per_topic: 24,
            docs_initial: 200,
            docs_per_increment: 20,
            increments: 5,
            entities_per_doc: 3,
            body_len: 32,
            topic_mass: 0.75,
            natural_train_initial: 2,
            natural_train_new: 1,
            val_per_doc: 1,
            test_per_doc: 1,
            pseudo_per_doc: 10,
            query_entities: (1, 2),
            query_terms: (3, 8),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn total_docs(&self) -> usize {
        self.docs_initial + self.increments * self.docs_per_increment
    }

    pub fn first_entity(&self) -> usize {
        1 + self.general_terms + self.num_topics * self.terms_per_topic
    }

    /// Vocabulary ids needed by this spec.
    pub fn required_vocab(&self) -> usize {
        self.first_entity() + self.total_docs() * self.entities_per_doc
    }

    /// Longest query, excluding `[CLS]`.
    pub fn max_query_len(&self) -> usize {
        self.query_entities.1 + self.query_terms.1
    }

    pub fn validate(&self) -> Result<()> {
        if self.required_vocab() > self.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary of {} cannot hold {} ids",
                self.vocab_size,
                self.required_vocab()
            )));
        }
        let (e0, e1) = self.query_entities;
        let (t0, t1) = self.query_terms;
        if e0 == 0 || e0 > e1 || e1 > self.entities_per_doc || t0 > t1 || t1 > self.body_len {
            return Err(Error::Config("inconsistent query length ranges".into()));
        }
        if self.num_topics == 0 || self.terms_per_topic == 0 || self.docs_initial == 0 {
            return Err(Error::Config(
                "topics, topic terms and D_0 must be nonempty".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.topic_mass) {
            return Err(Error::Config("topic_mass must lie in [0, 1]".into()));
        }
        if self.general_terms == 0 && self.topic_mass < 1.0 {
            return Err(Error::Config("background mass needs general terms".into()));
        }
        Ok(())
    }

    fn topic_term(&self, topic: usize, j: usize) -> u32 {
        (1 + self.general_terms + topic * self.terms_per_topic + j) as u32
    }

    /// Expected query counts for corpus `t`: `(train, val, test)`.
    pub fn query_counts(&self, t: usize) -> (usize, usize, usize) {
        let (docs, natural) = if t == 0 {
            (self.docs_initial, self.natural_train_initial)
        } else {
            (self.docs_per_increment, self.natural_train_new)
        };
        (
            docs * (natural + self.pseudo_per_doc),
            docs * self.val_per_doc,
            docs * self.test_per_doc,
        )
    }
}

const MAX_ATTEMPTS: usize = 1000;

struct QueryGen<'a> {
    spec: &'a SyntheticSpec,
    seen: HashSet<Vec<u32>>,
}

impl QueryGen<'_> {
    fn sample(&mut self, body: &[u32], entities: &[u32], r: &mut rng::Rng) -> Result<Vec<u32>> {
        let s = self.spec;
        for _ in 0..MAX_ATTEMPTS {
            let ne = r.random_range(s.query_entities.0..=s.query_entities.1);
            let nt = r.random_range(s.query_terms.0..=s.query_terms.1);
            let mut toks: Vec<u32> = entities.choose_multiple(r, ne).copied().collect();
            toks.extend(body.choose_multiple(r, nt).copied());
            toks.shuffle(r);
            if self.seen.insert(toks.clone()) {
                return Ok(toks);
            }
        }
        Err(Error::Config(
            "could not draw a fresh query; the spec leaves too little variety".into(),
        ))
    }
}

/// Deterministic synthetic timeline for `spec`.
pub fn generate_corpora(spec: &SyntheticSpec) -> Result<CorpusTimeline> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, "data");
    let mut gen = QueryGen {
        spec,
        seen: HashSet::new(),
    };
    let mut next_entity = spec.first_entity() as u32;
    let mut corpora = Vec::new();
    let mut doc_counter = 0usize;
    let mut query_counter = 0usize;
    for t in 0..=spec.increments {
        let n_docs = if t == 0 {
            spec.docs_initial
        } else {
            spec.docs_per_increment
        };
        let natural_train = if t == 0 {
            spec.natural_train_initial
        } else {
            spec.natural_train_new
        };
        let mut corpus = Corpus {
            index: t,
            ..Default::default()
        };
        for _ in 0..n_docs {
            let topic = r.random_range(0..spec.num_topics);
            let body: Vec<u32> = (0..spec.body_len)
                .map(|_| {
                    if r.random::<f64>() < spec.topic_mass {
                        spec.topic_term(topic, r.random_range(0..spec.terms_per_topic))
                    } else {
                        1 + r.random_range(0..spec.general_terms) as u32
                    }
                })
                .collect();
            let entities: Vec<u32> = (0..spec.entities_per_doc as u32)
                .map(|k| next_entity + k)
                .collect();
            next_entity += spec.entities_per_doc as u32;
            let doc_id = format!("d{doc_counter:05}");
            doc_counter += 1;
            let mut tokens = body.clone();
            tokens.extend(&entities);
            let plan = [
                (Split::Test, QueryKind::Natural, spec.test_per_doc),
                (Split::Val, QueryKind::Natural, spec.val_per_doc),
                (Split::Train, QueryKind::Natural, natural_train),
                (Split::Train, QueryKind::Pseudo, spec.pseudo_per_doc),
            ];
            for (split, kind, count) in plan {
                for _ in 0..count {
                    let toks = gen.sample(&body, &entities, &mut r)?;
                    corpus.queries.push(QueryRecord {
                        query_id: format!("q{query_counter:06}"),
                        doc_id: doc_id.clone(),
                        corpus: t,
                        split,
                        kind,
                        tokens: toks,
                    });
                    query_counter += 1;
                }
            }
            corpus.docs.push(DocRecord {
                doc_id,
                corpus: t,
                tokens,
            });
        }
        corpora.push(corpus);
    }
    Ok(CorpusTimeline { corpora })
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Record {
    Query(QueryRecord),
    Doc(DocRecord),
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Writes docs then queries of each corpus, one JSON record per line.
pub fn save_jsonl(timeline: &CorpusTimeline, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w: Box<dyn Write> = if is_gzip(path) {
        Box::new(BufWriter::new(GzEncoder::new(file, Compression::default())))
    } else {
        Box::new(BufWriter::new(file))
    };
    for c in &timeline.corpora {
        for d in &c.docs {
            serde_json::to_writer(&mut w, d)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        for q in &c.queries {
            serde_json::to_writer(&mut w, q)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a timeline written by [`save_jsonl`] (or any file with the same
/// record schemas). Blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<CorpusTimeline> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader: Box<dyn Read> = if is_gzip(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let display = path.display().to_string();
    let mut docs: Vec<DocRecord> = Vec::new();
    let mut queries: Vec<(usize, QueryRecord)> = Vec::new();
    let mut doc_ids = BTreeSet::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::DataLine {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        match serde_json::from_str::<Record>(&line) {
            Ok(Record::Doc(d)) => {
                if !doc_ids.insert(d.doc_id.clone()) {
                    return Err(err(format!("duplicate document id {}", d.doc_id)));
                }
                docs.push(d);
            }
            Ok(Record::Query(q)) => queries.push((i + 1, q)),
            Err(e) => return Err(err(format!("not a document or query record: {e}"))),
        }
    }
    let n = docs
        .iter()
        .map(|d| d.corpus)
        .chain(queries.iter().map(|q| q.1.corpus))
        .max()
        .map_or(0, |m| m + 1);
    let mut corpora: Vec<Corpus> = (0..n)
        .map(|index| Corpus {
            index,
            ..Default::default()
        })
        .collect();
    for d in docs {
        corpora[d.corpus].docs.push(d);
    }
    let owner: BTreeMap<&str, usize> = corpora
        .iter()
        .flat_map(|c| c.docs.iter().map(move |d| (d.doc_id.as_str(), c.index)))
        .collect();
    let mut placed = Vec::with_capacity(queries.len());
    for (line, q) in queries {
        if owner.get(q.doc_id.as_str()) != Some(&q.corpus) {
            return Err(Error::DataLine {
                path: path.to_path_buf(),
                line,
                message: format!(
                    "query {} references unknown document {}",
                    q.query_id, q.doc_id
                ),
            });
        }
        placed.push(q);
    }
    for q in placed {
        let c = q.corpus;
        corpora[c].queries.push(q);
    }
    if corpora.iter().any(|c| c.docs.is_empty()) {
        return Err(Error::Data(format!(
            "{display}: corpus indices are not contiguous"
        )));
    }
    let timeline = CorpusTimeline { corpora };
    timeline.validate()?;
    Ok(timeline)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            docs_initial: 30,
            docs_per_increment: 5,
            increments: 2,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn entities_are_unique_and_in_every_query() {
        let spec = small_spec();
        let tl = generate_corpora(&spec).unwrap();
        let first = spec.first_entity() as u32;
        let mut owner = BTreeMap::new();
        for c in &tl.corpora {
            for d in &c.docs {
                for &t in d.tokens.iter().filter(|&&t| t >= first) {
                    assert!(owner.insert(t, d.doc_id.clone()).is_none());
                }
            }
        }
        for c in &tl.corpora {
            for q in &c.queries {
                let ents: Vec<_> = q.tokens.iter().filter(|&&t| t >= first).collect();
                assert!(!ents.is_empty() && ents.len() <= 2);
                assert!(ents.iter().all(|t| owner[t] == q.doc_id));
            }
        }
    }

    #[test]
    fn default_spec_query_counts() {
        let spec = SyntheticSpec::default();
        let tl = generate_corpora(&spec).unwrap();
        assert_eq!(tl.len(), 6);
        assert_eq!(tl.corpora[0].docs.len(), 200);
        assert_eq!(spec.query_counts(0), (2400, 200, 200));
        assert_eq!(spec.query_counts(3), (220, 20, 20));
        for (t, c) in tl.corpora.iter().enumerate() {
            let (tr, va, te) = spec.query_counts(t);
            assert_eq!(c.queries_in(Split::Train).count(), tr);
            assert_eq!(c.queries_in(Split::Val).count(), va);
            assert_eq!(c.queries_in(Split::Test).count(), te);
        }
        let pseudo = tl.corpora[0]
            .queries
            .iter()
            .filter(|q| q.kind == QueryKind::Pseudo)
            .count();
        assert_eq!(pseudo, 2000);
        assert!(tl.max_query_len() <= spec.max_query_len());
        assert!((tl.max_token() as usize) < spec.vocab_size);
        tl.validate().unwrap();
    }

    #[test]
    fn no_test_query_appears_in_training() {
        let tl = generate_corpora(&small_spec()).unwrap();
        let train: HashSet<_> = tl
            .corpora
            .iter()
            .flat_map(|c| c.queries_in(Split::Train))
            .map(|q| q.tokens.clone())
            .collect();
        for c in &tl.corpora {
            for q in c.queries_in(Split::Test) {
                assert!(!train.contains(&q.tokens));
            }
        }
    }

    #[test]
    fn vocabulary_exhaustion_is_a_spec_error() {
        let spec = SyntheticSpec {
            vocab_size: 100,
            ..Default::default()
        };
        assert!(matches!(generate_corpora(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn round_trip_plain_and_gzip() {
        let tl = generate_corpora(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for name in ["t.jsonl", "t.jsonl.gz"] {
            let p = dir.path().join(name);
            save_jsonl(&tl, &p).unwrap();
            assert_eq!(load_jsonl(&p).unwrap(), tl);
        }
    }

    #[test]
    fn output_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        save_jsonl(&generate_corpora(&small_spec()).unwrap(), &a).unwrap();
        save_jsonl(&generate_corpora(&small_spec()).unwrap(), &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn empty_file_is_empty_timeline() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_jsonl(&p).unwrap().is_empty());
    }

    #[test]
    fn duplicate_doc_and_malformed_lines_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dup.jsonl");
        let d = r#"{"doc_id":"a","corpus":0,"tokens":[1,2]}"#;
        std::fs::write(&p, format!("{d}\n{d}\n")).unwrap();
        match load_jsonl(&p) {
            Err(Error::DataLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, format!("{d}\n{{\"oops\":1}}\n")).unwrap();
        match load_jsonl(&p) {
            Err(Error::DataLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let q = r#"{"query_id":"q","doc_id":"zz","corpus":0,"split":"train","kind":"pseudo","tokens":[1]}"#;
        std::fs::write(&p, format!("{d}\n{q}\n")).unwrap();
        assert!(matches!(
            load_jsonl(&p),
            Err(Error::DataLine { line: 2, .. })
        ));
    }

    #[test]
    fn encoded_prepends_cls() {
        let q = QueryRecord {
            query_id: "q".into(),
            doc_id: "d".into(),
            corpus: 0,
            split: Split::Train,
            kind: QueryKind::Pseudo,
            tokens: vec![5, 6],
        };
        assert_eq!(q.encoded(), vec![CLS, 5, 6]);
    }
}
