//! Temporal knowledge-graph data model.

mod snapshot;
mod vocab;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use snapshot::{build_snapshots, Edge, PairHistory, SnapshotIndex};
pub use vocab::{
    EntityId, RelationId, RelationVocab, TimeKind, Timeline, Timestamp, Vocab, VocabPolicy,
    Vocabularies, INVERSE_PREFIX,
};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Quadruple {
    pub s: EntityId,
    pub r: RelationId,
    pub o: EntityId,
    pub t: Timestamp,
}

impl Quadruple {
    pub fn new(s: EntityId, r: RelationId, o: EntityId, t: Timestamp) -> Self {
        Self { s, r, o, t }
    }

    /// The same fact read from the object side: `(o, r⁻¹, s, t)`.
    pub fn reciprocal(self, n_base: usize) -> Self {
        let r = if self.r < n_base {
            self.r + n_base
        } else {
            self.r - n_base
        };
        Self {
            s: self.o,
            r,
            o: self.s,
            t: self.t,
        }
    }
}

fn split_fields(line: &str, lineno: usize) -> Result<[&str; 4]> {
    let fields: Vec<&str> = line.split('\t').collect();
    <[&str; 4]>::try_from(fields).map_err(|f| Error::Parse {
        line: lineno,
        message: format!("expected 4 tab-separated fields, found {}", f.len()),
    })
}

fn read_lines(reader: impl BufRead, origin: &str) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if !line.trim().is_empty() {
            out.push((i + 1, line.to_owned()));
        }
    }
    Ok(out)
}

/// Parses `subject\trelation\tobject\ttimestamp` lines into dense facts.
///
/// Exact duplicates collapse to their first occurrence. Under
/// [`VocabPolicy::Grow`] unseen labels extend the vocabularies: entities and
/// relations in first-seen order, time points chronologically.
pub fn parse_quadruples(
    reader: impl BufRead,
    vocab: &mut Vocabularies,
    policy: VocabPolicy,
) -> Result<Vec<Quadruple>> {
    let lines = read_lines(reader, "<quadruples>")?;
    let mut rows = Vec::with_capacity(lines.len());
    for (lineno, line) in &lines {
        rows.push((*lineno, split_fields(line, *lineno)?));
    }
    if policy == VocabPolicy::Grow {
        if let Some((line, f)) = rows.iter().find(|(_, f)| !vocab::is_time_label(f[3])) {
            return Err(Error::Parse {
                line: *line,
                message: format!("unmappable timestamp `{}`", f[3]),
            });
        }
        vocab.timeline.extend(rows.iter().map(|(_, f)| f[3]))?;
    }
    let mut seen = HashSet::with_capacity(rows.len());
    let mut facts = Vec::with_capacity(rows.len());
    for (lineno, [s, r, o, t]) in rows {
        let at = |e: Error| Error::Parse {
            line: lineno,
            message: e.to_string(),
        };
        let s = vocab.entities.resolve(s, policy, "entity").map_err(at)?;
        let r = vocab.relations.resolve(r, policy).map_err(at)?;
        let o = vocab.entities.resolve(o, policy, "entity").map_err(at)?;
        let t = vocab.timeline.lookup(t).ok_or_else(|| Error::Parse {
            line: lineno,
            message: format!("unmappable timestamp `{t}`"),
        })?;
        let q = Quadruple { s, r, o, t };
        if seen.insert(q) {
            facts.push(q);
        }
    }
    Ok(facts)
}

/// Writes facts as label quadruples, the inverse of [`parse_quadruples`].
pub fn write_quadruples(
    mut w: impl Write,
    facts: &[Quadruple],
    vocab: &Vocabularies,
) -> std::io::Result<()> {
    for q in facts {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            vocab.entities.label(q.s),
            vocab.relations.base_labels()[q.r],
            vocab.entities.label(q.o),
            vocab.timeline.label(q.t)
        )?;
    }
    Ok(())
}

/// Convenience wrapper adding reciprocal relations to a dataset's vocabulary.
pub fn add_reciprocals(dataset: &mut TkgDataset) -> Result<()> {
    dataset.vocab.relations.add_reciprocals()
}

/// A zero-shot forecasting dataset: facts before `eval_start` train the
/// model; later facts are split by relation status into valid and test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TkgDataset {
    pub vocab: Vocabularies,
    pub train: Vec<Quadruple>,
    pub valid: Vec<Quadruple>,
    pub test: Vec<Quadruple>,
    /// First evaluation timestamp.
    pub eval_start: Timestamp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl TkgDataset {
    pub fn num_entities(&self) -> usize {
        self.vocab.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.vocab.relations.len()
    }

    pub fn num_timestamps(&self) -> usize {
        self.vocab.timeline.len()
    }

    pub fn n_base(&self) -> usize {
        self.vocab.relations.n_base()
    }

    pub fn split(&self, which: SplitName) -> &[Quadruple] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }

    pub fn all_facts(&self) -> impl Iterator<Item = &Quadruple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Latest timestamp carrying a training fact.
    pub fn max_train_time(&self) -> Option<Timestamp> {
        self.train.iter().map(|q| q.t).max()
    }

    /// Snapshot index over the training facts only.
    pub fn train_index(&self) -> SnapshotIndex {
        build_snapshots(&self.train, self.num_timestamps(), self.n_base())
    }

    /// Checks the structural invariants every finished dataset must satisfy.
    pub fn validate(&self) -> Result<()> {
        for (name, facts) in [
            ("train", &self.train),
            ("valid", &self.valid),
            ("test", &self.test),
        ] {
            if facts.is_empty() {
                return Err(Error::EmptySplit(name));
            }
        }
        let rel = &self.vocab.relations;
        let bad = |m: String| Err(Error::Split(m));
        let in_range = |q: &Quadruple| {
            q.s < self.num_entities()
                && q.o < self.num_entities()
                && q.r < rel.n_base()
                && q.t < self.num_timestamps()
        };
        if let Some(q) = self.all_facts().find(|q| !in_range(q)) {
            return bad(format!("fact {q:?} references unknown ids"));
        }
        if let Some(q) = self
            .train
            .iter()
            .find(|q| q.t >= self.eval_start || rel.is_unseen(q.r))
        {
            return bad(format!(
                "training fact {q:?} is late or carries an unseen relation"
            ));
        }
        let train_entities: HashSet<EntityId> =
            self.train.iter().flat_map(|q| [q.s, q.o]).collect();
        for (facts, unseen) in [(&self.valid, false), (&self.test, true)] {
            for q in facts.iter() {
                if q.t < self.eval_start || rel.is_unseen(q.r) != unseen {
                    return bad(format!(
                        "evaluation fact {q:?} has wrong time or relation status"
                    ));
                }
                if !train_entities.contains(&q.s) || !train_entities.contains(&q.o) {
                    return bad(format!(
                        "evaluation fact {q:?} uses an entity absent from training"
                    ));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over vocabularies and facts; identifies a dataset in checkpoints.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |s: &str| {
            h.update((s.len() as u64).to_le_bytes());
            h.update(s.as_bytes());
        };
        for l in self.vocab.entities.labels() {
            put(l);
        }
        put("|relations");
        for l in self.vocab.relations.base_labels() {
            put(l);
        }
        put("|timeline");
        for l in self.vocab.timeline.labels() {
            put(l);
        }
        for (name, facts) in [
            ("|train", &self.train),
            ("|valid", &self.valid),
            ("|test", &self.test),
        ] {
            put(name);
            for q in facts.iter() {
                put(&format!("{} {} {} {}", q.s, q.r, q.o, q.t));
            }
        }
        put(&format!("|eval_start {}", self.eval_start));
        format!("{:x}", h.finalize())
    }
}

/// All true objects of each `(s, r, t)` query, including reciprocal queries.
#[derive(Clone, Debug, Default)]
pub struct TrueObjects {
    map: HashMap<(EntityId, RelationId, Timestamp), Vec<EntityId>>,
}

impl TrueObjects {
    pub fn new<'a>(facts: impl IntoIterator<Item = &'a Quadruple>, n_base: usize) -> Self {
        let mut map: HashMap<_, Vec<EntityId>> = HashMap::new();
        for &q in facts {
            for f in [q, q.reciprocal(n_base)] {
                map.entry((f.s, f.r, f.t)).or_default().push(f.o);
            }
        }
        for v in map.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        Self { map }
    }

    pub fn get(&self, s: EntityId, r: RelationId, t: Timestamp) -> &[EntityId] {
        self.map.get(&(s, r, t)).map_or(&[], Vec::as_slice)
    }
}

/// Table-2 style summary of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub entities: usize,
    pub relations: usize,
    pub train_timestamps: usize,
    pub eval_timestamps: usize,
    pub seen_relations: usize,
    pub zero_shot_relations: usize,
    pub train_facts: usize,
    pub valid_facts: usize,
    pub test_facts: usize,
    pub split_timestamp: String,
}

impl DatasetStats {
    pub fn of(ds: &TkgDataset) -> Self {
        let distinct =
            |facts: &[Quadruple]| facts.iter().map(|q| q.t).collect::<HashSet<_>>().len();
        let eval: Vec<Quadruple> = ds.valid.iter().chain(&ds.test).copied().collect();
        let zero = ds.vocab.relations.unseen_base().count();
        Self {
            entities: ds.num_entities(),
            relations: ds.n_base(),
            train_timestamps: distinct(&ds.train),
            eval_timestamps: distinct(&eval),
            seen_relations: ds.n_base() - zero,
            zero_shot_relations: zero,
            train_facts: ds.train.len(),
            valid_facts: ds.valid.len(),
            test_facts: ds.test.len(),
            split_timestamp: ds
                .vocab
                .timeline
                .labels()
                .get(ds.eval_start)
                .cloned()
                .unwrap_or_default(),
        }
    }
}

fn write_file(path: &Path, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn write_id_labels(path: &Path, labels: &[String]) -> Result<()> {
    write_file(path, |w| {
        labels
            .iter()
            .enumerate()
            .try_for_each(|(i, l)| writeln!(w, "{i}\t{l}"))
    })
}

/// Reads an `id\tlabel` sidecar whose ids must be `0, 1, 2, ...`.
pub fn read_id_labels(path: &Path) -> Result<Vec<String>> {
    let lines = read_lines(open(path)?, &path.display().to_string())?;
    let mut out = Vec::with_capacity(lines.len());
    for (lineno, line) in lines {
        let (id, label) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno,
            message: format!("{}: expected `id\\tlabel`", path.display()),
        })?;
        if id.parse::<usize>().ok() != Some(out.len()) {
            return Err(Error::Parse {
                line: lineno,
                message: format!("{}: ids must be contiguous from 0", path.display()),
            });
        }
        out.push(label.to_owned());
    }
    Ok(out)
}

/// Writes the split files, vocabulary sidecars and `stats.json` into `dir`.
pub fn save_dataset(dir: &Path, ds: &TkgDataset) -> Result<DatasetStats> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, facts) in [
        ("train.tsv", &ds.train),
        ("valid.tsv", &ds.valid),
        ("test.tsv", &ds.test),
    ] {
        write_file(&dir.join(name), |w| write_quadruples(w, facts, &ds.vocab))?;
    }
    write_id_labels(&dir.join("entities.tsv"), ds.vocab.entities.labels())?;
    write_id_labels(&dir.join("relations.tsv"), ds.vocab.relations.base_labels())?;
    write_id_labels(&dir.join("timestamps.tsv"), ds.vocab.timeline.labels())?;
    let rels = &ds.vocab.relations;
    write_file(&dir.join("relations_zero.tsv"), |w| {
        rels.unseen_base()
            .try_for_each(|r| writeln!(w, "{r}\t{}", rels.base_labels()[r]))
    })?;
    let stats = DatasetStats::of(ds);
    let json = serde_json::to_string_pretty(&stats)?;
    write_file(&dir.join("stats.json"), |w| writeln!(w, "{json}"))?;
    Ok(stats)
}

/// Loads a directory written by [`save_dataset`]; relations come back without
/// reciprocals.
pub fn load_dataset(dir: &Path) -> Result<TkgDataset> {
    let mut vocab = Vocabularies {
        entities: Vocab::from_labels(read_id_labels(&dir.join("entities.tsv"))?)?,
        relations: RelationVocab::from_labels(read_id_labels(&dir.join("relations.tsv"))?)?,
        timeline: Timeline::from_labels(read_id_labels(&dir.join("timestamps.tsv"))?)?,
    };
    let mut facts = Vec::with_capacity(3);
    for name in ["train.tsv", "valid.tsv", "test.tsv"] {
        facts.push(parse_quadruples(
            open(&dir.join(name))?,
            &mut vocab,
            VocabPolicy::Fixed,
        )?);
    }
    let zero_path = dir.join("relations_zero.tsv");
    let zero = read_lines(open(&zero_path)?, &zero_path.display().to_string())?;
    for (lineno, line) in zero {
        let label = line.split_once('\t').map_or(line.as_str(), |(_, l)| l);
        let r = vocab.relations.get(label).ok_or_else(|| Error::Parse {
            line: lineno,
            message: format!("relations_zero.tsv: unknown relation `{label}`"),
        })?;
        vocab.relations.set_unseen(r, true);
    }
    let test = facts.pop().unwrap_or_default();
    let valid = facts.pop().unwrap_or_default();
    let train = facts.pop().unwrap_or_default();
    let stats: Option<DatasetStats> = fs::read_to_string(dir.join("stats.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    let eval_start = stats
        .and_then(|s| vocab.timeline.lookup(&s.split_timestamp))
        .or_else(|| valid.iter().chain(&test).map(|q| q.t).min())
        .ok_or(Error::EmptySplit("valid"))?;
    let ds = TkgDataset {
        vocab,
        train,
        valid,
        test,
        eval_start,
    };
    ds.validate()?;
    Ok(ds)
}
