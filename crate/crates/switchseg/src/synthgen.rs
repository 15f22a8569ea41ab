//! Deterministic generator of synthetic multi-criteria corpora.
//!
//! A base lexicon of units is shared by every criterion; each criterion
//! either keeps a unit atomic or splits it at fixed positions. A chosen
//! fraction of units is planted as conflicts (criteria disagree on them),
//! the rest is treated identically everywhere, so criteria provably share
//! sub-criteria while disagreeing on known constructions. Surface sentences
//! are identical across criteria; only the gold segmentations differ.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::SegmentedSentence;
use crate::metrics::prf;
use crate::numerics::{rng_from_seed, Rng};
use crate::{Error, Result};

/// How one criterion treats one unit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitRule {
    Atomic,
    /// Cut after these 1-based character offsets (ascending, inside the unit).
    SplitAt(Vec<usize>),
}

impl UnitRule {
    fn apply(&self, unit: &str) -> Vec<String> {
        match self {
            UnitRule::Atomic => vec![unit.to_string()],
            UnitRule::SplitAt(cuts) => {
                let chars: Vec<char> = unit.chars().collect();
                let mut words = Vec::with_capacity(cuts.len() + 1);
                let mut start = 0usize;
                for &cut in cuts {
                    words.push(chars[start..cut].iter().collect());
                    start = cut;
                }
                words.push(chars[start..].iter().collect());
                words
            }
        }
    }
}

/// One criterion: a name and a total rule table over the lexicon.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionSpec {
    pub name: String,
    pub rules: Vec<UnitRule>,
}

/// The full synthetic setup: shared lexicon plus per-criterion rules.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSpec {
    pub units: Vec<String>,
    pub criteria: Vec<CriterionSpec>,
    /// Indices of units on which the criteria disagree.
    pub conflict_units: Vec<usize>,
}

/// Knobs for building a [`SynthSpec`].
#[derive(Clone, Debug)]
pub struct SpecOptions {
    pub criteria: usize,
    pub lexicon_size: usize,
    pub conflict_fraction: f64,
    pub alphabet_size: usize,
    pub min_unit_len: usize,
    pub max_unit_len: usize,
    pub seed: u64,
}

impl Default for SpecOptions {
    fn default() -> Self {
        SpecOptions {
            criteria: 2,
            lexicon_size: 40,
            conflict_fraction: 0.5,
            alphabet_size: 50,
            min_unit_len: 2,
            max_unit_len: 4,
            seed: 1,
        }
    }
}

/// Sentence-sampling knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    pub train_sentences: usize,
    pub dev_sentences: usize,
    pub test_sentences: usize,
    pub min_units: usize,
    pub max_units: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            train_sentences: 2000,
            dev_sentences: 200,
            test_sentences: 200,
            min_units: 3,
            max_units: 10,
            seed: 7,
        }
    }
}

fn alphabet(size: usize) -> Vec<char> {
    // Lowercase, then uppercase letters; plenty for a desk-scale alphabet.
    ('a'..='z')
        .chain('A'..='Z')
        .take(size)
        .collect()
}

/// Build a spec with an exact number of planted conflicts:
/// round(conflict_fraction * lexicon_size) units get differing rules across
/// criteria (criterion 0 keeps them atomic, the others split); every other
/// unit gets one rule shared by all criteria.
pub fn make_spec(opts: &SpecOptions) -> Result<SynthSpec> {
    if opts.lexicon_size == 0 {
        return Err(Error::invalid("lexicon must not be empty"));
    }
    if opts.criteria < 2 {
        return Err(Error::invalid("conflict generation needs at least 2 criteria"));
    }
    if !(0.0..=1.0).contains(&opts.conflict_fraction) {
        return Err(Error::invalid("conflict fraction must lie in [0, 1]"));
    }
    if opts.min_unit_len < 2 || opts.max_unit_len < opts.min_unit_len {
        return Err(Error::invalid("unit lengths must satisfy 2 <= min <= max"));
    }
    let mut rng = rng_from_seed(opts.seed);
    let chars = alphabet(opts.alphabet_size);

    let mut units: Vec<String> = Vec::with_capacity(opts.lexicon_size);
    while units.len() < opts.lexicon_size {
        let len = rng.gen_range(opts.min_unit_len..=opts.max_unit_len);
        let unit: String = (0..len).map(|_| chars[rng.gen_range(0..chars.len())]).collect();
        if !units.contains(&unit) {
            units.push(unit);
        }
    }

    let conflict_count = (opts.conflict_fraction * opts.lexicon_size as f64).round() as usize;
    let conflict_units: Vec<usize> = (0..conflict_count).collect();

    let mut criteria: Vec<CriterionSpec> = (0..opts.criteria)
        .map(|i| CriterionSpec {
            name: format!("crit{}", (b'A' + i as u8) as char),
            rules: Vec::with_capacity(opts.lexicon_size),
        })
        .collect();

    for (u, unit) in units.iter().enumerate() {
        let len = unit.chars().count();
        if conflict_units.contains(&u) {
            // Criterion 0 keeps the unit atomic, the rest split after the
            // first character (or mid-unit for longer units).
            for (c, criterion) in criteria.iter_mut().enumerate() {
                if c == 0 {
                    criterion.rules.push(UnitRule::Atomic);
                } else {
                    let cut = 1 + (c - 1) % (len - 1);
                    criterion.rules.push(UnitRule::SplitAt(vec![cut]));
                }
            }
        } else {
            // A sub-criterion shared by everyone.
            let rule = if rng.gen::<f64>() < 0.7 {
                UnitRule::Atomic
            } else {
                UnitRule::SplitAt(vec![rng.gen_range(1..len)])
            };
            for criterion in criteria.iter_mut() {
                criterion.rules.push(rule.clone());
            }
        }
    }

    Ok(SynthSpec { units, criteria, conflict_units })
}

/// A held-out criterion composed purely of the existing criteria's
/// sub-criteria: for every unit it adopts the rule of one of the source
/// criteria, alternating deterministically over the conflict units.
pub fn derived_criterion(spec: &SynthSpec, name: &str, seed: u64) -> CriterionSpec {
    let mut rng = rng_from_seed(seed);
    let rules = (0..spec.units.len())
        .map(|u| {
            let source = rng.gen_range(0..spec.criteria.len());
            spec.criteria[source].rules[u].clone()
        })
        .collect();
    CriterionSpec { name: name.to_string(), rules }
}

/// Segment a unit sequence under one criterion's rules.
pub fn segment_units(spec: &SynthSpec, rules: &CriterionSpec, units: &[usize]) -> SegmentedSentence {
    let mut words = Vec::new();
    for &u in units {
        words.extend(rules.rules[u].apply(&spec.units[u]));
    }
    SegmentedSentence::new(words).expect("unit rules never produce empty words")
}

/// One criterion's generated splits.
#[derive(Clone, Debug)]
pub struct CriterionCorpora {
    pub name: String,
    pub train: Vec<SegmentedSentence>,
    pub dev: Vec<SegmentedSentence>,
    pub test: Vec<SegmentedSentence>,
}

/// The generator output: the raw unit sequences (shared by all criteria)
/// and the per-criterion corpora over them.
#[derive(Clone, Debug)]
pub struct GeneratedCorpora {
    pub train_units: Vec<Vec<usize>>,
    pub dev_units: Vec<Vec<usize>>,
    pub test_units: Vec<Vec<usize>>,
    pub criteria: Vec<CriterionCorpora>,
}

fn sample_unit_sequences(
    count: usize,
    n_units: usize,
    config: &GenConfig,
    rng: &mut Rng,
) -> Vec<Vec<usize>> {
    (0..count)
        .map(|_| {
            let len = rng.gen_range(config.min_units..=config.max_units);
            (0..len).map(|_| rng.gen_range(0..n_units)).collect()
        })
        .collect()
}

/// Generate per-criterion (train, dev, test) corpora. Identical surface
/// sentences are emitted to every criterion with that criterion's gold.
pub fn gen_corpora(spec: &SynthSpec, config: &GenConfig) -> Result<GeneratedCorpora> {
    if spec.units.is_empty() {
        return Err(Error::invalid("degenerate spec: no units"));
    }
    if config.min_units == 0 || config.max_units < config.min_units {
        return Err(Error::invalid("unit counts must satisfy 1 <= min <= max"));
    }
    let mut rng = rng_from_seed(config.seed);
    let n = spec.units.len();
    let train_units = sample_unit_sequences(config.train_sentences, n, config, &mut rng);
    let dev_units = sample_unit_sequences(config.dev_sentences, n, config, &mut rng);
    let test_units = sample_unit_sequences(config.test_sentences, n, config, &mut rng);

    let criteria = spec
        .criteria
        .iter()
        .map(|criterion| CriterionCorpora {
            name: criterion.name.clone(),
            train: train_units.iter().map(|u| segment_units(spec, criterion, u)).collect(),
            dev: dev_units.iter().map(|u| segment_units(spec, criterion, u)).collect(),
            test: test_units.iter().map(|u| segment_units(spec, criterion, u)).collect(),
        })
        .collect();

    Ok(GeneratedCorpora { train_units, dev_units, test_units, criteria })
}

/// Corpora for an extra criterion over the same unit sequences.
pub fn corpora_for_criterion(
    spec: &SynthSpec,
    generated: &GeneratedCorpora,
    criterion: &CriterionSpec,
) -> CriterionCorpora {
    CriterionCorpora {
        name: criterion.name.clone(),
        train: generated.train_units.iter().map(|u| segment_units(spec, criterion, u)).collect(),
        dev: generated.dev_units.iter().map(|u| segment_units(spec, criterion, u)).collect(),
        test: generated.test_units.iter().map(|u| segment_units(spec, criterion, u)).collect(),
    }
}

/// Per-criterion F of the best task-blind majority policy, plus the average.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleBound {
    pub per_criterion: Vec<f64>,
    pub average: f64,
}

/// Upper bound for a model without task identity, evaluated exhaustively on
/// the generated test sets. See [`oracle_bound_on`].
pub fn oracle_upper_bound(spec: &SynthSpec, generated: &GeneratedCorpora) -> Result<OracleBound> {
    let golds: Vec<&[SegmentedSentence]> =
        generated.criteria.iter().map(|c| c.test.as_slice()).collect();
    oracle_bound_on(spec, &generated.test_units, &golds)
}

/// The majority-label policy bound on a given split: one shared rule per
/// unit (the rule used by the most criteria). Ties are broken toward each
/// criterion in turn and the tie-break with the best average F wins, since
/// a single shared policy evaluated against every criterion can always
/// commit to one side of each tie.
pub fn oracle_bound_on(
    spec: &SynthSpec,
    units: &[Vec<usize>],
    golds: &[&[SegmentedSentence]],
) -> Result<OracleBound> {
    let mut best: Option<OracleBound> = None;
    for tie in 0..spec.criteria.len() {
        let policy = majority_policy(spec, tie);
        let pred: Vec<SegmentedSentence> =
            units.iter().map(|u| segment_units(spec, &policy, u)).collect();
        let mut per_criterion = Vec::with_capacity(golds.len());
        for gold in golds {
            per_criterion.push(prf(gold, &pred)?.f1);
        }
        let average = per_criterion.iter().sum::<f64>() / per_criterion.len() as f64;
        if best.as_ref().map_or(true, |b| average > b.average) {
            best = Some(OracleBound { per_criterion, average });
        }
    }
    best.ok_or_else(|| Error::invalid("spec has no criteria"))
}

fn majority_policy(spec: &SynthSpec, tie_break: usize) -> CriterionSpec {
    let rules = (0..spec.units.len())
        .map(|u| {
            let count_of = |rule: &UnitRule| {
                spec.criteria.iter().filter(|c| &c.rules[u] == rule).count()
            };
            let mut best_rule = &spec.criteria[0].rules[u];
            let mut best_count = count_of(best_rule);
            // Prefer the tie-break criterion's rule when it matches the max.
            for criterion in spec.criteria.iter() {
                let rule = &criterion.rules[u];
                let count = count_of(rule);
                if count > best_count {
                    best_count = count;
                    best_rule = rule;
                }
            }
            let tie_rule = &spec.criteria[tie_break].rules[u];
            if count_of(tie_rule) == best_count {
                best_rule = tie_rule;
            }
            best_rule.clone()
        })
        .collect();
    CriterionSpec { name: format!("majority-tie{tie_break}"), rules }
}

/// Manifest describing a generated corpus set, serialized alongside it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthManifest {
    pub spec: SynthSpec,
    pub gen: GenConfig,
    pub oracle_bound: OracleBound,
    /// Extra criteria composed from the base criteria's sub-criteria
    /// (emitted for transfer experiments, not part of the bound).
    pub held_out: Vec<CriterionSpec>,
}
