//! Caption-to-triplet parsing, prompt templating, text embedding, offline
//! clustering and the contrastive negative bank.
//!
//! The parser is a pattern-based shallow parser over a small built-in
//! lexicon: it looks for `person-noun [aux] verb ... object` spans and drops
//! triples whose subject is not a person or whose relation is not a verb.
//! Synonymous triplets are retained, not merged.

pub mod embed;
pub mod kmeans;
pub mod lexicon;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use embed::{embed_texts, HashedBagEncoder, TextEncoder};

use crate::{Error, Result};

/// One `<human, verb, object>` triple extracted from a caption.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HoiTriplet {
    pub human: String,
    pub verb: String,
    pub object: String,
    pub source_caption_id: String,
}

impl HoiTriplet {
    pub fn new(human: &str, verb: &str, object: &str, source: &str) -> Self {
        Self {
            human: human.into(),
            verb: verb.into(),
            object: object.into(),
            source_caption_id: source.into(),
        }
    }
}

fn tokenize(caption: &str) -> Vec<String> {
    caption
        .split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// How many tokens the object scan may skip past determiners/prepositions.
const OBJECT_WINDOW: usize = 6;

/// Extract subject-verb-object triples from one caption.
///
/// For each verb token, the subject must be a person noun immediately before
/// it (auxiliaries and `-ly` adverbs may intervene), and the object is the
/// first content token after it within a short window. Unparseable captions
/// yield an empty sequence.
pub fn parse_caption(caption: &str, caption_id: &str) -> Vec<HoiTriplet> {
    let tokens = tokenize(caption);
    let mut out: Vec<HoiTriplet> = Vec::new();
    for (v, tok) in tokens.iter().enumerate() {
        let Some(verb) = lexicon::verb_lemma(tok) else { continue };
        // Subject: walk left over auxiliaries/adverbs to the first content
        // token, which must be in the person lexicon.
        let mut subject = None;
        let mut i = v;
        while i > 0 {
            i -= 1;
            let w = &tokens[i];
            if lexicon::is_auxiliary(w) || w.ends_with("ly") {
                continue;
            }
            if lexicon::is_person(w) {
                subject = Some(w.clone());
            }
            break;
        }
        let Some(human) = subject else { continue };
        // Object: first content token after the verb, skipping determiners,
        // prepositions and auxiliaries; a second verb aborts the scan.
        let mut object = None;
        for w in tokens.iter().skip(v + 1).take(OBJECT_WINDOW) {
            if lexicon::is_determiner(w)
                || lexicon::is_preposition(w)
                || lexicon::is_auxiliary(w)
            {
                continue;
            }
            if lexicon::verb_lemma(w).is_some() {
                break;
            }
            object = Some(w.clone());
            break;
        }
        let Some(object) = object else { continue };
        let triplet = HoiTriplet::new(&human, verb, &object, caption_id);
        if !out.contains(&triplet) {
            out.push(triplet);
        }
    }
    out
}

/// `"a photo of {human} {verb} {object}"`, lowercased, single spaces.
/// Idempotent under re-normalization.
pub fn template_prompt(t: &HoiTriplet) -> String {
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    format!("a photo of {} {} {}", norm(&t.human), norm(&t.verb), norm(&t.object))
}

/// Offline cluster table plus the per-cluster negative samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NegativeBank {
    pub format_version: u32,
    pub proj_dim: usize,
    pub num_clusters: usize,
    /// One entry per triplet, indexed by triplet id.
    pub entries: Vec<BankEntry>,
    /// cluster id -> sampled triplet ids (min(per_cluster, cluster size)).
    pub per_cluster_samples: BTreeMap<usize, Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankEntry {
    pub id: usize,
    pub prompt: String,
    pub embedding: Vec<f64>,
    pub cluster: usize,
}

pub const BANK_FORMAT_VERSION: u32 = 1;

impl NegativeBank {
    pub fn cluster_of(&self, id: usize) -> Option<usize> {
        self.entries.get(id).map(|e| e.cluster)
    }

    pub fn embedding_of(&self, id: usize) -> Option<&[f64]> {
        self.entries.get(id).map(|e| e.embedding.as_slice())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(f))
    }

    pub fn from_reader(r: impl BufRead) -> Result<Self> {
        let bank: NegativeBank = serde_json::from_reader(r)?;
        if bank.format_version != BANK_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "negative bank format version {} unsupported (expected {BANK_FORMAT_VERSION})",
                bank.format_version
            )));
        }
        if bank.entries.iter().enumerate().any(|(i, e)| e.id != i) {
            return Err(Error::Config("negative bank entry ids must be dense".into()));
        }
        if bank.entries.iter().any(|e| e.embedding.len() != bank.proj_dim) {
            return Err(Error::Config("negative bank embedding width mismatch".into()));
        }
        Ok(bank)
    }
}

/// Cluster the prompt embeddings into `k` offline clusters and sample
/// `per_cluster` negatives from each, uniformly without replacement.
pub fn build_negative_bank(
    prompts: &[String],
    embeddings: &Array2<f64>,
    k: usize,
    per_cluster: usize,
    seed: u64,
) -> Result<NegativeBank> {
    let n = prompts.len();
    if n == 0 || embeddings.nrows() != n {
        return Err(Error::InvalidArgument(format!(
            "bank needs matching prompts and embeddings, got {n} prompts and {} rows",
            embeddings.nrows()
        )));
    }
    let assignments = kmeans::kmeans_assign(embeddings, k, 50, seed);
    let num_clusters = k.min(n);

    let mut members: BTreeMap<usize, Vec<usize>> = (0..num_clusters).map(|c| (c, vec![])).collect();
    for (id, &c) in assignments.iter().enumerate() {
        members.get_mut(&c).expect("cluster id in range").push(id);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut per_cluster_samples = BTreeMap::new();
    for (c, ids) in &members {
        let mut pool = ids.clone();
        pool.shuffle(&mut rng);
        pool.truncate(per_cluster.min(ids.len()));
        pool.sort_unstable();
        per_cluster_samples.insert(*c, pool);
    }

    let entries = (0..n)
        .map(|id| BankEntry {
            id,
            prompt: prompts[id].clone(),
            embedding: embeddings.row(id).to_vec(),
            cluster: assignments[id],
        })
        .collect();

    Ok(NegativeBank {
        format_version: BANK_FORMAT_VERSION,
        proj_dim: embeddings.ncols(),
        num_clusters,
        entries,
        per_cluster_samples,
    })
}

/// One line of a caption input file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionLine {
    pub id: String,
    pub text: String,
}

/// One line of a triplet output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripletLine {
    pub id: String,
    pub human: String,
    pub verb: String,
    pub object: String,
    pub prompt: String,
}

/// Read line-delimited caption records; malformed lines carry line numbers.
pub fn read_caption_lines(reader: impl BufRead) -> Result<Vec<CaptionLine>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: CaptionLine = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            line: i + 1,
            msg: format!("bad caption record: {e}"),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Parse a whole caption file into triplet lines.
pub fn parse_caption_lines(captions: &[CaptionLine]) -> Vec<TripletLine> {
    let mut out = Vec::new();
    for c in captions {
        for t in parse_caption(&c.text, &c.id) {
            let prompt = template_prompt(&t);
            out.push(TripletLine {
                id: c.id.clone(),
                human: t.human,
                verb: t.verb,
                object: t.object,
                prompt,
            });
        }
    }
    out
}

/// The bank's sampled ids, excluding the positive itself and any entry whose
/// prompt string duplicates the positive's.
pub fn negatives_for(positive: usize, bank: &NegativeBank) -> Result<Vec<usize>> {
    let Some(pos_entry) = bank.entries.get(positive) else {
        return Err(Error::InvalidArgument(format!("unknown positive triplet id {positive}")));
    };
    let mut out = Vec::new();
    for ids in bank.per_cluster_samples.values() {
        for &id in ids {
            if id == positive {
                continue;
            }
            if bank.entries[id].prompt == pos_entry.prompt {
                continue;
            }
            out.push(id);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn parses_supplementary_examples() {
        // "a man drives a car" -> [(man, drive, car)]
        assert_eq!(
            parse_caption("a man drives a car", "c0"),
            vec![HoiTriplet::new("man", "drive", "car", "c0")]
        );
        // subject is not a person
        assert_eq!(parse_caption("car runs on the road", "c1"), vec![]);
        // relation is not a verb
        assert_eq!(parse_caption("a man on the road", "c2"), vec![]);
    }

    #[test]
    fn parses_progressive_and_prepositional_forms() {
        assert_eq!(
            parse_caption("A man is riding a horse.", "c0"),
            vec![HoiTriplet::new("man", "ride", "horse", "c0")]
        );
        assert_eq!(
            parse_caption("a woman sits on a red chair", "c1"),
            vec![HoiTriplet::new("woman", "sit", "chair", "c1")]
        );
        // Intransitive use without an object in the window yields nothing.
        assert_eq!(parse_caption("a boy runs", "c2"), vec![]);
    }

    #[test]
    fn never_emits_non_person_subject_or_non_verb_relation() {
        let captions = [
            "the dog eats a bone",
            "a truck carries boxes",
            "a man with a hat",
            "trees near the river",
            "a girl quickly catches the ball",
        ];
        for (i, c) in captions.iter().enumerate() {
            for t in parse_caption(c, &format!("c{i}")) {
                assert!(lexicon::is_person(&t.human), "bad subject in {c:?}: {t:?}");
                assert!(lexicon::verb_lemma(&t.verb).is_some(), "bad verb in {c:?}: {t:?}");
            }
        }
        // The adverb case does parse.
        assert_eq!(
            parse_caption("a girl quickly catches the ball", "c"),
            vec![HoiTriplet::new("girl", "catch", "ball", "c")]
        );
    }

    #[test]
    fn template_is_normalized_and_idempotent() {
        let t = HoiTriplet::new("Man", "drive", "Car", "c");
        let p = template_prompt(&t);
        assert_eq!(p, "a photo of man drive car");
        let again = HoiTriplet::new(&t.human, &t.verb, &t.object, "c");
        assert_eq!(template_prompt(&again), p);

        let t2 = HoiTriplet::new("person", "ride", "horse", "c");
        assert_eq!(template_prompt(&t2), "a photo of person ride horse");
    }

    fn synthetic_prompts(n: usize, seed: u64) -> Vec<String> {
        let humans = ["man", "woman", "boy", "girl", "person"];
        let verbs = ["drive", "ride", "hold", "eat", "throw", "carry", "wash", "push"];
        let objects = ["car", "horse", "cup", "pizza", "ball", "bag", "dish", "cart"];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                format!(
                    "a photo of {} {} {}",
                    humans[rng.random_range(0..humans.len())],
                    verbs[rng.random_range(0..verbs.len())],
                    objects[rng.random_range(0..objects.len())]
                )
            })
            .collect()
    }

    #[test]
    fn bank_counts_match_contract() {
        let prompts = synthetic_prompts(1000, 5);
        let enc = HashedBagEncoder::new(64);
        let emb = embed_texts(&prompts, &enc).unwrap();
        let bank = build_negative_bank(&prompts, &emb, 100, 10, 0).unwrap();
        assert_eq!(bank.num_clusters, 100);
        let mut total = 0usize;
        for (c, ids) in &bank.per_cluster_samples {
            let size = bank.entries.iter().filter(|e| e.cluster == *c).count();
            assert_eq!(ids.len(), size.min(10), "cluster {c}");
            total += ids.len();
        }
        assert!(total <= 1000);
    }

    #[test]
    fn tiny_bank_degenerates_to_singletons() {
        let prompts = synthetic_prompts(5, 9);
        let enc = HashedBagEncoder::new(64);
        let emb = embed_texts(&prompts, &enc).unwrap();
        let bank = build_negative_bank(&prompts, &emb, 100, 10, 0).unwrap();
        assert_eq!(bank.num_clusters, 5);
        for ids in bank.per_cluster_samples.values() {
            assert!(ids.len() <= 1);
        }
    }

    #[test]
    fn bank_is_deterministic_per_seed() {
        let prompts = synthetic_prompts(200, 2);
        let enc = HashedBagEncoder::new(64);
        let emb = embed_texts(&prompts, &enc).unwrap();
        let a = build_negative_bank(&prompts, &emb, 100, 10, 3).unwrap();
        let b = build_negative_bank(&prompts, &emb, 100, 10, 3).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn negatives_exclude_positive_and_duplicate_prompts() {
        let mut prompts = synthetic_prompts(50, 4);
        prompts[7] = prompts[3].clone(); // exact duplicate prompt
        let enc = HashedBagEncoder::new(64);
        let emb = embed_texts(&prompts, &enc).unwrap();
        let bank = build_negative_bank(&prompts, &emb, 10, 10, 0).unwrap();
        for positive in 0..prompts.len() {
            let negs = negatives_for(positive, &bank).unwrap();
            assert!(!negs.contains(&positive));
            for n in &negs {
                assert_ne!(bank.entries[*n].prompt, bank.entries[positive].prompt);
            }
        }
        assert!(negatives_for(9999, &bank).is_err());
    }

    #[test]
    fn bank_round_trips_through_file() {
        let prompts = synthetic_prompts(30, 6);
        let enc = HashedBagEncoder::new(64);
        let emb = embed_texts(&prompts, &enc).unwrap();
        let bank = build_negative_bank(&prompts, &emb, 10, 5, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        bank.write(&path).unwrap();
        let back = NegativeBank::read(&path).unwrap();
        assert_eq!(serde_json::to_string(&bank).unwrap(), serde_json::to_string(&back).unwrap());
    }
}
