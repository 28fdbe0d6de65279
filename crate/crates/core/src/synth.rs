//! Synthetic temporal graphs with planted relation clusters.
//!
//! Relations are grouped into clusters whose texts share a `cluster{c}`
//! token. Every entity pair follows a cyclic script of clusters; at each step
//! it emits, with some probability, one relation of the currently active
//! cluster. Held-out relations appear only after the training horizon, so a
//! model can forecast them only by transferring from their cluster siblings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::component_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_entities: usize,
    pub n_clusters: usize,
    pub relations_per_cluster: usize,
    /// Cyclic sequences of cluster ids.
    pub scripts: Vec<Vec<usize>>,
    pub n_pairs: usize,
    pub train_steps: usize,
    pub eval_steps: usize,
    pub emission_prob: f64,
    pub holdout_per_cluster: usize,
    /// Sampling weight of a held-out relation relative to a regular one.
    pub holdout_weight: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_entities: 200,
            n_clusters: 6,
            relations_per_cluster: 4,
            scripts: vec![vec![0, 1, 2], vec![3, 4, 5]],
            n_pairs: 200,
            train_steps: 60,
            eval_steps: 20,
            emission_prob: 0.5,
            holdout_per_cluster: 1,
            holdout_weight: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn n_relations(&self) -> usize {
        self.n_clusters * self.relations_per_cluster
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.n_relations() < 2 {
            return bad("need at least two relations");
        }
        if self.holdout_per_cluster >= self.relations_per_cluster {
            return bad("holdout_per_cluster must be below relations_per_cluster");
        }
        if !(self.emission_prob > 0.0 && self.emission_prob <= 1.0) {
            return bad("emission_prob must lie in (0, 1]");
        }
        if !(self.holdout_weight > 0.0 && self.holdout_weight.is_finite()) {
            return bad("holdout_weight must be positive");
        }
        if self.scripts.is_empty() || self.scripts.iter().any(Vec::is_empty) {
            return bad("scripts must be non-empty");
        }
        if self.scripts.iter().flatten().any(|&c| c >= self.n_clusters) {
            return bad("script refers to an unknown cluster");
        }
        if self.train_steps == 0 {
            return bad("train_steps must be positive");
        }
        let subjects = self.n_pairs.div_ceil(self.scripts.len());
        if self.n_entities < self.scripts.len() + 1 || subjects > self.n_entities {
            return bad("too few entities for the requested pairs");
        }
        if self.holdout_per_cluster == 0 || self.eval_steps == 0 || self.n_pairs == 0 {
            return bad("configuration yields no evaluation facts with held-out relations");
        }
        Ok(())
    }
}

pub fn relation_text(cluster: usize, relation: usize) -> String {
    format!("cluster{cluster} relation{relation}")
}

pub fn entity_label(e: usize) -> String {
    format!("e{e}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub subject: String,
    pub object: String,
    pub script: usize,
    pub phase: usize,
    /// Active cluster at every timestamp of the timeline.
    pub expected_clusters: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub relation_cluster: BTreeMap<String, usize>,
    pub holdout: Vec<String>,
    pub scripts: Vec<Vec<usize>>,
    pub pairs: Vec<PlantedPair>,
    /// Label of the first evaluation timestamp.
    pub split_timestamp: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    /// Quadruple file contents.
    pub quadruples: String,
    /// `id\ttext` relation listing.
    pub relations: String,
    pub planted: PlantedTruth,
    pub n_facts: usize,
}

impl SynthOutput {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, body: &str| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        put("quadruples.tsv", &self.quadruples)?;
        put("relations.tsv", &self.relations)?;
        put(
            "planted.json",
            &(serde_json::to_string_pretty(&self.planted)? + "\n"),
        )
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let m = cfg.relations_per_cluster;
    let mut layout = component_rng(cfg.seed, "synth.layout");

    let mut holdout = vec![false; cfg.n_relations()];
    for c in 0..cfg.n_clusters {
        let mut members: Vec<usize> = (c * m..(c + 1) * m).collect();
        members.shuffle(&mut layout);
        for &r in &members[..cfg.holdout_per_cluster] {
            holdout[r] = true;
        }
    }

    let n_scripts = cfg.scripts.len();
    let mut entities: Vec<usize> = (0..cfg.n_entities).collect();
    entities.shuffle(&mut layout);
    let n_subjects = cfg.n_pairs.div_ceil(n_scripts);
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    for (i, &s) in entities[..n_subjects].iter().enumerate() {
        let mut objects: Vec<usize> = Vec::with_capacity(n_scripts);
        for script in 0..n_scripts.min(cfg.n_pairs - i * n_scripts) {
            let o = loop {
                let o = layout.random_range(0..cfg.n_entities);
                if o != s && !objects.contains(&o) {
                    break o;
                }
            };
            objects.push(o);
            let phase = layout.random_range(0..cfg.scripts[script].len());
            pairs.push((s, o, script, phase));
        }
    }

    let total_steps = cfg.train_steps + cfg.eval_steps;
    let cluster_at = |script: usize, phase: usize, t: usize| {
        let seq = &cfg.scripts[script];
        seq[(t + phase) % seq.len()]
    };
    let weights = |c: usize, eval: bool| -> Vec<f64> {
        (c * m..(c + 1) * m)
            .map(|r| match (holdout[r], eval) {
                (false, _) => 1.0,
                (true, true) => cfg.holdout_weight,
                (true, false) => 0.0,
            })
            .collect()
    };
    let samplers: Vec<[WeightedIndex<f64>; 2]> = (0..cfg.n_clusters)
        .map(|c| {
            let make = |eval| WeightedIndex::new(weights(c, eval)).expect("positive weights");
            [make(false), make(true)]
        })
        .collect();

    let mut emit = component_rng(cfg.seed, "synth.emission");
    let mut quadruples = String::new();
    let mut n_facts = 0;
    let mut holdout_eval_facts = 0;
    for t in 0..total_steps {
        let eval = t >= cfg.train_steps;
        for &(s, o, script, phase) in &pairs {
            if !emit.random_bool(cfg.emission_prob) {
                continue;
            }
            let c = cluster_at(script, phase, t);
            let r = c * m + samplers[c][usize::from(eval)].sample(&mut emit);
            holdout_eval_facts += usize::from(holdout[r]);
            n_facts += 1;
            writeln!(
                quadruples,
                "{}\t{}\t{}\t{t}",
                entity_label(s),
                relation_text(c, r),
                entity_label(o)
            )
            .expect("write to string");
        }
    }
    if holdout_eval_facts == 0 {
        return Err(Error::Config(
            "configuration yields no evaluation facts with held-out relations".into(),
        ));
    }

    let mut relations = String::new();
    let mut relation_cluster = BTreeMap::new();
    for r in 0..cfg.n_relations() {
        let text = relation_text(r / m, r);
        writeln!(relations, "{r}\t{text}").expect("write to string");
        relation_cluster.insert(text, r / m);
    }
    let planted = PlantedTruth {
        relation_cluster,
        holdout: (0..cfg.n_relations())
            .filter(|&r| holdout[r])
            .map(|r| relation_text(r / m, r))
            .collect(),
        scripts: cfg.scripts.clone(),
        pairs: pairs
            .iter()
            .map(|&(s, o, script, phase)| PlantedPair {
                subject: entity_label(s),
                object: entity_label(o),
                script,
                phase,
                expected_clusters: (0..total_steps)
                    .map(|t| cluster_at(script, phase, t))
                    .collect(),
            })
            .collect(),
        split_timestamp: cfg.train_steps.to_string(),
    };
    Ok(SynthOutput {
        quadruples,
        relations,
        planted,
        n_facts,
    })
}
