//! Corpora: the JSONL record format, a synthetic two-domain generator, and
//! the paired source/target batch schedule.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{tokenize, Domain, Example, Vocab};
use crate::error::{Error, Result};

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub domain: Domain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
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
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub records: Vec<Record>,
    pub split: Option<Split>,
    pub provenance: String,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Shared domain of every record; `None` when empty.
    pub fn domain(&self) -> Option<Domain> {
        self.records.first().map(|r| r.domain)
    }

    pub fn is_labeled(&self) -> bool {
        self.records.iter().all(|r| r.label.is_some())
    }

    pub fn label_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for r in &self.records {
            if let Some(l) = r.label {
                if l < classes {
                    counts[l] += 1;
                }
            }
        }
        counts
    }

    pub fn examples(&self, vocab: &Vocab, max_len: usize) -> Vec<Example> {
        self.records
            .iter()
            .map(|r| Example {
                token_ids: tokenize(&r.text, vocab, max_len),
                label: r.label,
                domain: r.domain,
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("records serialize"));
            s.push('\n');
        }
        s
    }

    fn check(&self, classes: usize) -> Result<()> {
        let domain = self.domain();
        for (i, r) in self.records.iter().enumerate() {
            let bad = |msg: String| Error::Parse {
                path: self.provenance.clone().into(),
                line: i + 1,
                msg,
            };
            if Some(r.domain) != domain {
                return Err(bad(format!("domain {} differs from the corpus domain", r.domain)));
            }
            match r.label {
                Some(l) if l >= classes => {
                    return Err(bad(format!("label {l} out of range for {classes} classes")))
                }
                None if r.domain == Domain::Source => return Err(bad("source record without a label".into())),
                _ => {}
            }
        }
        Ok(())
    }
}

/// Parses a JSONL corpus: one `{"text", "label"?, "domain"}` object per line.
pub fn load_corpus(path: &Path, classes: usize) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, &path.display().to_string(), classes)
}

pub fn parse_corpus(text: &str, provenance: &str, classes: usize) -> Result<Corpus> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: provenance.into(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push(r);
    }
    let split = Path::new(provenance)
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|stem| Split::ALL.into_iter().find(|sp| stem.ends_with(sp.as_str())));
    let corpus = Corpus {
        records,
        split,
        provenance: provenance.to_string(),
    };
    corpus.check(classes)?;
    Ok(corpus)
}

/// Parameters of the synthetic two-domain corpus. Every example carries
/// label-signal tokens from its class pool (shared by both domains),
/// domain-marker tokens from its domain's pool, and shared noise tokens, in
/// random order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub signal_tokens_per_class: usize,
    pub marker_tokens_per_domain: usize,
    pub noise_tokens: usize,
    pub signal_per_example: usize,
    pub markers_per_example: usize,
    pub noise_per_example: usize,
    pub train_examples: usize,
    pub dev_examples: usize,
    pub test_examples: usize,
    pub signal_prefix: String,
    pub source_marker_prefix: String,
    pub target_marker_prefix: String,
    pub noise_prefix: String,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 3,
            signal_tokens_per_class: 8,
            marker_tokens_per_domain: 8,
            noise_tokens: 40,
            signal_per_example: 3,
            markers_per_example: 2,
            noise_per_example: 6,
            train_examples: 2000,
            dev_examples: 250,
            test_examples: 500,
            signal_prefix: "sig".into(),
            source_marker_prefix: "src".into(),
            target_marker_prefix: "tgt".into(),
            noise_prefix: "w".into(),
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn seq_len(&self) -> usize {
        self.signal_per_example + self.markers_per_example + self.noise_per_example
    }

    fn pools(&self) -> Result<Pools> {
        let counts = [
            ("classes", self.classes),
            ("signal_tokens_per_class", self.signal_tokens_per_class),
            ("marker_tokens_per_domain", self.marker_tokens_per_domain),
            ("noise_tokens", self.noise_tokens),
            ("signal_per_example", self.signal_per_example),
            ("markers_per_example", self.markers_per_example),
            ("noise_per_example", self.noise_per_example),
            ("train_examples", self.train_examples),
            ("dev_examples", self.dev_examples),
            ("test_examples", self.test_examples),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("synthetic spec: {name} must be >= 1")));
        }
        let prefixes = [
            ("signal", &self.signal_prefix),
            ("source marker", &self.source_marker_prefix),
            ("target marker", &self.target_marker_prefix),
            ("noise", &self.noise_prefix),
        ];
        for (pool, p) in prefixes {
            if p.is_empty() || p.chars().any(|c| c.is_whitespace() || c.is_uppercase()) {
                return Err(Error::Invalid(format!("synthetic spec: bad {pool} prefix {p:?}")));
            }
        }
        let signal: Vec<Vec<String>> = (0..self.classes)
            .map(|c| {
                (0..self.signal_tokens_per_class)
                    .map(|i| format!("{}{c}_{i}", self.signal_prefix))
                    .collect()
            })
            .collect();
        let marker = |p: &str| -> Vec<String> {
            (0..self.marker_tokens_per_domain).map(|i| format!("{p}{i}")).collect()
        };
        let pools = Pools {
            signal,
            source_markers: marker(&self.source_marker_prefix),
            target_markers: marker(&self.target_marker_prefix),
            noise: (0..self.noise_tokens).map(|i| format!("{}{i}", self.noise_prefix)).collect(),
        };

        let mut owner: HashMap<&str, &str> = HashMap::new();
        let named: [(&str, Vec<&String>); 4] = [
            ("signal", pools.signal.iter().flatten().collect()),
            ("source-marker", pools.source_markers.iter().collect()),
            ("target-marker", pools.target_markers.iter().collect()),
            ("noise", pools.noise.iter().collect()),
        ];
        for (pool, tokens) in &named {
            for t in tokens {
                if let Some(prev) = owner.insert(t.as_str(), pool) {
                    return Err(Error::Invalid(format!(
                        "synthetic spec: the {prev} and {pool} token pools overlap (token {t:?})"
                    )));
                }
            }
        }
        Ok(pools)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pools {
    pub signal: Vec<Vec<String>>,
    pub source_markers: Vec<String>,
    pub target_markers: Vec<String>,
    pub noise: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplits {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

impl DomainSplits {
    pub fn get(&self, split: Split) -> &Corpus {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpora {
    pub vocab: Vocab,
    pub pools: Pools,
    pub source: DomainSplits,
    pub target: DomainSplits,
}

/// Generates both domains. Labels are balanced to within one per split, and
/// the target train split carries no labels.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpora> {
    let pools = spec.pools()?;
    let vocab = Vocab::from_tokens(
        pools
            .signal
            .iter()
            .flatten()
            .chain(&pools.source_markers)
            .chain(&pools.target_markers)
            .chain(&pools.noise),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut make = |domain: Domain, split: Split, n: usize| -> Corpus {
        let markers = match domain {
            Domain::Source => &pools.source_markers,
            Domain::Target => &pools.target_markers,
        };
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
        labels.shuffle(&mut rng);
        let records = labels
            .into_iter()
            .map(|label| {
                let mut words: Vec<&str> = Vec::with_capacity(spec.seq_len());
                for _ in 0..spec.signal_per_example {
                    words.push(pools.signal[label].choose(&mut rng).expect("non-empty pool"));
                }
                for _ in 0..spec.markers_per_example {
                    words.push(markers[rng.gen_range(0..markers.len())].as_str());
                }
                for _ in 0..spec.noise_per_example {
                    words.push(pools.noise[rng.gen_range(0..pools.noise.len())].as_str());
                }
                words.shuffle(&mut rng);
                let keep_label = !(domain == Domain::Target && split == Split::Train);
                Record {
                    text: words.join(" "),
                    label: keep_label.then_some(label),
                    domain,
                }
            })
            .collect();
        Corpus {
            records,
            split: Some(split),
            provenance: format!("synthetic(seed={}) {domain}_{split}", spec.seed),
        }
    };
    let mut splits = |domain| DomainSplits {
        train: make(domain, Split::Train, spec.train_examples),
        dev: make(domain, Split::Dev, spec.dev_examples),
        test: make(domain, Split::Test, spec.test_examples),
    };
    let source = splits(Domain::Source);
    let target = splits(Domain::Target);
    Ok(SyntheticCorpora {
        vocab,
        pools,
        source,
        target,
    })
}

/// Endless index stream over `0..n`, reshuffled each time it wraps.
#[derive(Debug, Clone)]
struct Cycler {
    perm: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        Cycler { perm, pos: 0, rng }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.perm.len() {
                self.perm.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.perm[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Schedule of equal-sized (source, target) index batches.
///
/// One epoch walks the longer stream once in shuffled order; the shorter
/// stream cycles, reshuffling each time it wraps. The final batch of an
/// epoch is smaller when the longer stream does not divide evenly.
#[derive(Debug, Clone)]
pub struct PairedBatches {
    source: Cycler,
    target: Cycler,
    longer: usize,
    batch_size: usize,
    steps_per_epoch: usize,
    total_steps: usize,
    step: usize,
}

pub fn paired_batches(
    n_source: usize,
    n_target: usize,
    batch_size: usize,
    seed: u64,
    epochs: usize,
) -> Result<PairedBatches> {
    if batch_size < 2 {
        return Err(Error::Invalid(format!("batch size must be >= 2, got {batch_size}")));
    }
    if n_source == 0 || n_target == 0 {
        return Err(Error::Invalid("paired batches need two non-empty corpora".into()));
    }
    if batch_size > n_source.min(n_target) {
        return Err(Error::Invalid(format!(
            "batch size {batch_size} exceeds corpus size (source {n_source}, target {n_target})"
        )));
    }
    let longer = n_source.max(n_target);
    let steps_per_epoch = longer.div_ceil(batch_size);
    Ok(PairedBatches {
        source: Cycler::new(n_source, seed),
        target: Cycler::new(n_target, seed ^ 0x9e37_79b9_7f4a_7c15),
        longer,
        batch_size,
        steps_per_epoch,
        total_steps: epochs * steps_per_epoch,
        step: 0,
    })
}

impl PairedBatches {
    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }
}

impl Iterator for PairedBatches {
    type Item = (Vec<usize>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.step >= self.total_steps {
            return None;
        }
        let within = self.step % self.steps_per_epoch;
        let k = self.batch_size.min(self.longer - within * self.batch_size);
        self.step += 1;
        Some((self.source.take(k), self.target.take(k)))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.total_steps - self.step;
        (left, Some(left))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn balanced_labels() {
        let spec = SyntheticSpec {
            train_examples: 300,
            dev_examples: 30,
            test_examples: 31,
            ..Default::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        for counts in [
            c.source.train.label_counts(3),
            c.source.test.label_counts(3),
            c.target.dev.label_counts(3),
        ] {
            let total: usize = counts.iter().sum();
            for n in counts {
                assert!(n.abs_diff(total / 3) <= 1, "{n} of {total}");
            }
        }
        assert_eq!(c.source.train.label_counts(3), vec![100, 100, 100]);
    }

    #[test]
    fn deterministic_and_target_train_unlabeled() {
        let spec = SyntheticSpec {
            train_examples: 50,
            ..Default::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.source.train.to_jsonl(), b.source.train.to_jsonl());
        assert!(a.target.train.records.iter().all(|r| r.label.is_none()));
        assert!(a.target.dev.is_labeled() && a.target.test.is_labeled());
        assert!(a.source.train.is_labeled());
        assert_eq!(a.target.train.domain(), Some(Domain::Target));
    }

    #[test]
    fn pools_are_shared_and_disjoint() {
        let c = generate_synthetic(&SyntheticSpec {
            train_examples: 200,
            ..Default::default()
        })
        .unwrap();
        let words = |corpus: &Corpus| -> HashSet<String> {
            corpus
                .records
                .iter()
                .flat_map(|r| r.text.split(' ').map(str::to_string))
                .collect()
        };
        let src = words(&c.source.train);
        let tgt = words(&c.target.train);
        let signal: HashSet<String> = c.pools.signal.iter().flatten().cloned().collect();
        assert_eq!(
            src.intersection(&signal).count(),
            tgt.intersection(&signal).count()
        );
        assert!(c.pools.source_markers.iter().all(|m| !tgt.contains(m)));
        assert!(c.pools.target_markers.iter().all(|m| !src.contains(m)));
        let sm: HashSet<_> = c.pools.source_markers.iter().collect();
        assert!(c.pools.target_markers.iter().all(|m| !sm.contains(m)));
    }

    #[test]
    fn overlapping_pools_are_rejected() {
        let spec = SyntheticSpec {
            target_marker_prefix: "src".into(),
            ..Default::default()
        };
        let err = generate_synthetic(&spec).unwrap_err().to_string();
        assert!(err.contains("source-marker") && err.contains("target-marker"), "{err}");
    }

    #[test]
    fn corpus_parsing() {
        let empty = parse_corpus("", "x.jsonl", 3).unwrap();
        assert!(empty.is_empty());
        let one = parse_corpus(r#"{"text":"a b","label":2,"domain":"source"}"#, "x", 3).unwrap();
        assert_eq!(one.len(), 1);
        let err = parse_corpus(
            "{\"text\":\"a\",\"label\":0,\"domain\":\"source\"}\n{\"text\":\"a b\",\"label\":3,\"domain\":\"source\"}",
            "x",
            3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(parse_corpus(r#"{"label":1,"domain":"source"}"#, "x", 3).is_err());
        assert!(parse_corpus(r#"{"text":"a","label":1,"domain":"source","extra":1}"#, "x", 3).is_err());
        assert!(parse_corpus(r#"{"text":"a","domain":"source"}"#, "x", 3).is_err());
        assert!(parse_corpus(r#"{"text":"a","domain":"target"}"#, "x", 3).is_ok());
        assert!(matches!(
            parse_corpus("{\"text\":\"a\",\"domain\":\"target\"}\nnot json", "f", 3),
            Err(Error::Parse { line: 2, .. })
        ));
        assert_eq!(parse_corpus("", "data/source_dev.jsonl", 3).unwrap().split, Some(Split::Dev));
    }

    #[test]
    fn batch_schedule_arithmetic() {
        let batches: Vec<_> = paired_batches(100, 100, 10, 1, 1).unwrap().collect();
        assert_eq!(batches.len(), 10);
        let mut seen_s: Vec<usize> = batches.iter().flat_map(|(s, _)| s.clone()).collect();
        let mut seen_t: Vec<usize> = batches.iter().flat_map(|(_, t)| t.clone()).collect();
        seen_s.sort();
        seen_t.sort();
        assert_eq!(seen_s, (0..100).collect::<Vec<_>>());
        assert_eq!(seen_t, (0..100).collect::<Vec<_>>());

        let uneven: Vec<_> = paired_batches(100, 40, 10, 1, 1).unwrap().collect();
        assert_eq!(uneven.len(), 10);
        let t_total: usize = uneven.iter().map(|(_, t)| t.len()).sum();
        assert_eq!(t_total as f64 / 40.0, 2.5);

        let partial = paired_batches(25, 30, 4, 3, 2).unwrap();
        assert_eq!(partial.total_steps(), 2 * 8);
        for (s, t) in partial {
            assert_eq!(s.len(), t.len());
        }
    }

    #[test]
    fn batch_schedule_is_seeded() {
        let a: Vec<_> = paired_batches(50, 30, 8, 42, 3).unwrap().collect();
        let b: Vec<_> = paired_batches(50, 30, 8, 42, 3).unwrap().collect();
        let c: Vec<_> = paired_batches(50, 30, 8, 43, 3).unwrap().collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn batch_schedule_errors() {
        assert!(paired_batches(10, 10, 1, 0, 1).is_err());
        assert!(paired_batches(10, 5, 6, 0, 1).is_err());
        assert!(paired_batches(0, 5, 2, 0, 1).is_err());
    }
}
