//! Synthetic preference worlds: latent rewards, a reward-tempered reference,
//! simulated annotators, and the line-delimited dataset file.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::objectives::PreferenceRecord;
use crate::policy::{PolicyMode, PolicyModel, PromptContext, ReferencePair, TokenSeq};
use crate::rng::{self, LabRng};
use crate::stable;

// Stream ids within one world seed.
const STREAM_TOKENS: u64 = 0;
const STREAM_EMBED: u64 = 1;
const STREAM_REWARD: u64 = 2;
const STREAM_INIT: u64 = 3;
// Stream ids within one annotator seed.
const STREAM_LABEL: u64 = 0;
const STREAM_NOISE: u64 = 1;

/// Sizes and seed of a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub mode: PolicyMode,
    pub n_prompts: usize,
    pub n_candidates: usize,
    pub vocab: usize,
    /// Embedding width in tabular mode, recurrent width in token mode.
    pub hidden_dim: usize,
    /// Standard deviation of the latent rewards.
    pub separation: f64,
    /// Tabular reference logits are `r* / ref_temperature`.
    pub ref_temperature: f64,
    /// Standard deviation of token-model reference weights.
    pub init_scale: f64,
    pub prompt_len: [usize; 2],
    pub response_len: [usize; 2],
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            mode: PolicyMode::Tabular,
            n_prompts: 200,
            n_candidates: 5,
            vocab: 32,
            hidden_dim: 16,
            separation: 3.0,
            ref_temperature: 2.0,
            init_scale: 0.3,
            prompt_len: [3, 8],
            response_len: [2, 12],
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config(format!("world: {m}")));
        if self.n_prompts == 0 {
            return bad("n_prompts must be positive");
        }
        if self.n_candidates < 2 {
            return bad("n_candidates must be at least 2");
        }
        if self.vocab < 2 || self.hidden_dim == 0 {
            return bad("vocab must be at least 2 and hidden_dim positive");
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return bad("separation must be a finite non-negative number");
        }
        if !(self.ref_temperature > 0.0) || !(self.init_scale >= 0.0) {
            return bad("ref_temperature must be positive and init_scale non-negative");
        }
        for (name, [lo, hi]) in [("prompt_len", self.prompt_len), ("response_len", self.response_len)] {
            if lo == 0 || lo > hi {
                return bad(&format!("{name} must be a range [lo, hi] with 1 <= lo <= hi"));
            }
        }
        let [lo, hi] = self.response_len;
        let distinct: f64 = (lo..=hi).map(|l| (self.vocab as f64).powi(l as i32)).sum();
        if distinct < self.n_candidates as f64 {
            return bad("vocabulary too small for distinct candidates");
        }
        Ok(())
    }
}

/// Latent reward `r*` of every candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueRewardTable {
    pub separation: f64,
    pub seed: u64,
    /// Indexed by `[prompt_id][candidate]`.
    pub rewards: Vec<Vec<f64>>,
}

impl TrueRewardTable {
    /// Index of the best candidate; ties go to the lower index.
    pub fn argmax(&self, prompt: usize) -> usize {
        let r = &self.rewards[prompt];
        (0..r.len()).fold(0, |best, i| if r[i] > r[best] { i } else { best })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub contexts: Vec<PromptContext>,
    pub rewards: TrueRewardTable,
    pub reference: PolicyModel,
}

impl World {
    /// Fresh pair with the policy equal to the reference.
    pub fn reference_pair(&self) -> ReferencePair {
        ReferencePair::new(self.reference.clone())
    }
}

fn random_seq(rng: &mut LabRng, [lo, hi]: [usize; 2], vocab: usize) -> TokenSeq {
    let len = rng.random_range(lo..=hi);
    let tokens = (0..len).map(|_| rng.random_range(0..vocab as u32)).collect();
    TokenSeq::new(tokens).expect("length is at least one")
}

pub fn gen_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let d = spec.hidden_dim;
    let mut embed_rng = rng::stream(spec.seed, STREAM_EMBED);
    let scale = 1.0 / (d as f64).sqrt();
    let embeddings: Vec<Vec<f64>> = (0..spec.vocab)
        .map(|_| (0..d).map(|_| scale * embed_rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();

    let mut tok_rng = rng::stream(spec.seed, STREAM_TOKENS);
    let mut contexts = Vec::with_capacity(spec.n_prompts);
    for p in 0..spec.n_prompts {
        let tokens = random_seq(&mut tok_rng, spec.prompt_len, spec.vocab);
        let mut candidates: Vec<TokenSeq> = Vec::with_capacity(spec.n_candidates);
        while candidates.len() < spec.n_candidates {
            let c = random_seq(&mut tok_rng, spec.response_len, spec.vocab);
            if !candidates.contains(&c) {
                candidates.push(c);
            }
        }
        let hidden_states = tokens.tokens().iter().map(|&t| embeddings[t as usize].clone()).collect();
        contexts.push(PromptContext { prompt_id: p, tokens, candidates, hidden_states });
    }

    let mut reward_rng = rng::stream(spec.seed, STREAM_REWARD);
    let rewards: Vec<Vec<f64>> = (0..spec.n_prompts)
        .map(|_| {
            (0..spec.n_candidates)
                .map(|_| spec.separation * reward_rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let reference = match spec.mode {
        PolicyMode::Tabular => {
            let logits = rewards.iter().flatten().map(|r| r / spec.ref_temperature).collect();
            PolicyModel::tabular(&vec![spec.n_candidates; spec.n_prompts], logits)?
        }
        PolicyMode::TinyLm => {
            let mut init_rng = rng::stream(spec.seed, STREAM_INIT);
            let n = 2 * spec.vocab * d + d * d;
            let params = (0..n)
                .map(|_| spec.init_scale * init_rng.sample::<f64, _>(StandardNormal))
                .collect();
            PolicyModel::tiny_lm(spec.vocab, d, params)?
        }
    };

    Ok(World {
        spec: spec.clone(),
        contexts,
        rewards: TrueRewardTable { separation: spec.separation, seed: spec.seed, rewards },
        reference,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnotatorKind {
    RationalBt,
    NoisySwap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotatorSpec {
    pub kind: AnnotatorKind,
    pub flip_rate: f64,
    /// Swap exactly `round(flip_rate * n)` records instead of flipping each independently.
    pub fixed_subset: bool,
    pub seed: u64,
}

impl Default for AnnotatorSpec {
    fn default() -> Self {
        Self { kind: AnnotatorKind::RationalBt, flip_rate: 0.0, fixed_subset: false, seed: 0 }
    }
}

impl AnnotatorSpec {
    pub fn rational(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn noisy(flip_rate: f64, seed: u64) -> Self {
        Self { kind: AnnotatorKind::NoisySwap, flip_rate, fixed_subset: false, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_rate) {
            return Err(LabError::Config(format!("annotator: flip_rate {} outside [0, 1]", self.flip_rate)));
        }
        if self.kind == AnnotatorKind::RationalBt && self.flip_rate != 0.0 {
            return Err(LabError::Config("annotator: rational-bt requires flip_rate = 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetForm {
    Pairwise,
    /// One winner (the best candidate) and three losers.
    Multi,
    WinnersOnly,
    LosersOnly,
}

impl DatasetForm {
    pub fn is_pairwise(self) -> bool {
        self == DatasetForm::Pairwise
    }
}

/// How records are drawn from the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstructionSpec {
    pub form: DatasetForm,
    /// Distinct candidate pairs per prompt (pairwise form).
    pub pairs_per_prompt: usize,
    pub seed: u64,
}

impl Default for ConstructionSpec {
    fn default() -> Self {
        Self { form: DatasetForm::Pairwise, pairs_per_prompt: 1, seed: 0 }
    }
}

pub const MULTI_LOSERS: usize = 3;

/// Dataset header: enough to regenerate the world and the labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub format: String,
    pub version: u32,
    pub world: WorldSpec,
    pub annotator: AnnotatorSpec,
    pub construction: ConstructionSpec,
}

pub const DATASET_FORMAT: &str = "anchorpo-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub provenance: Provenance,
    pub records: Vec<PreferenceRecord>,
}

impl DatasetManifest {
    pub fn form(&self) -> DatasetForm {
        self.provenance.construction.form
    }

    pub fn validate(&self) -> Result<()> {
        let form = self.form();
        for r in &self.records {
            r.validate()?;
            let ok = match form {
                DatasetForm::Pairwise => r.is_pairwise(),
                DatasetForm::Multi => r.winners.len() == 1 && r.losers.len() == MULTI_LOSERS,
                DatasetForm::WinnersOnly => !r.winners.is_empty() && r.losers.is_empty(),
                DatasetForm::LosersOnly => r.winners.is_empty() && !r.losers.is_empty(),
            };
            if !ok {
                return Err(LabError::Invalid(format!("record {} does not have the {form:?} shape", r.id)));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.provenance).map_err(|e| LabError::parse("dataset header", e))?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| LabError::parse("dataset record", e))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines();
        let header = match lines.next() {
            Some(l) => l.map_err(|e| LabError::parse("dataset", e))?,
            None => return Err(LabError::parse("dataset", "empty file")),
        };
        let provenance: Provenance =
            serde_json::from_str(&header).map_err(|e| LabError::parse("dataset header", e))?;
        if provenance.format != DATASET_FORMAT || provenance.version != DATASET_VERSION {
            return Err(LabError::parse(
                "dataset header",
                format!("unsupported format {} v{}", provenance.format, provenance.version),
            ));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| LabError::parse("dataset", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut rec: PreferenceRecord = serde_json::from_str(&line)
                .map_err(|e| LabError::parse("dataset record", format!("line {}: {e}", i + 2)))?;
            rec.id = records.len();
            records.push(rec);
        }
        let m = Self { provenance, records };
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| LabError::io(path, e))?;
        Self::from_reader(BufReader::new(f))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let body = self.to_jsonl()?;
        let mut f = fs::File::create(path).map_err(|e| LabError::io(path, e))?;
        f.write_all(body.as_bytes()).map_err(|e| LabError::io(path, e))
    }
}

/// Label the world's candidates into a dataset.
pub fn annotate(world: &World, annotator: &AnnotatorSpec, construction: &ConstructionSpec) -> Result<DatasetManifest> {
    annotator.validate()?;
    let n = world.spec.n_candidates;
    let mut build_rng = rng::stream(construction.seed, 0);
    let mut label_rng = rng::stream(annotator.seed, STREAM_LABEL);
    let mut records = Vec::new();

    match construction.form {
        DatasetForm::Pairwise => {
            let all_pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
            let k = construction.pairs_per_prompt;
            if k == 0 || k > all_pairs.len() {
                return Err(LabError::Config(format!(
                    "dataset: pairs_per_prompt must be in 1..={} for {n} candidates",
                    all_pairs.len()
                )));
            }
            for ctx in &world.contexts {
                let r = &world.rewards.rewards[ctx.prompt_id];
                let mut pairs = all_pairs.clone();
                pairs.shuffle(&mut build_rng);
                for &(a, b) in &pairs[..k] {
                    let (a, b) = if build_rng.random::<bool>() { (a, b) } else { (b, a) };
                    let u: f64 = label_rng.random();
                    let (w, l) = if u < stable::bt_prob(r[a], r[b]) { (a, b) } else { (b, a) };
                    records.push(PreferenceRecord::pairwise(
                        records.len(),
                        ctx.prompt_id,
                        ctx.tokens.clone(),
                        ctx.candidates[w].clone(),
                        ctx.candidates[l].clone(),
                    ));
                }
            }
        }
        DatasetForm::Multi | DatasetForm::WinnersOnly | DatasetForm::LosersOnly => {
            if n < MULTI_LOSERS + 1 {
                return Err(LabError::Config(format!(
                    "dataset: the {:?} form needs at least {} candidates, world has {n}",
                    construction.form,
                    MULTI_LOSERS + 1
                )));
            }
            for ctx in &world.contexts {
                let best = world.rewards.argmax(ctx.prompt_id);
                let mut rest: Vec<usize> = (0..n).filter(|&i| i != best).collect();
                rest.shuffle(&mut build_rng);
                records.push(PreferenceRecord {
                    id: records.len(),
                    prompt_id: ctx.prompt_id,
                    prompt: ctx.tokens.clone(),
                    winners: vec![ctx.candidates[best].clone()],
                    losers: rest[..MULTI_LOSERS].iter().map(|&i| ctx.candidates[i].clone()).collect(),
                });
            }
        }
    }

    if annotator.kind == AnnotatorKind::NoisySwap {
        apply_swaps(&mut records, annotator);
    }

    match construction.form {
        DatasetForm::WinnersOnly => records.iter_mut().for_each(|r| r.losers.clear()),
        DatasetForm::LosersOnly => records.iter_mut().for_each(|r| r.winners.clear()),
        _ => {}
    }

    let m = DatasetManifest {
        provenance: Provenance {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            world: world.spec.clone(),
            annotator: annotator.clone(),
            construction: construction.clone(),
        },
        records,
    };
    m.validate()?;
    Ok(m)
}

/// Exchange the winner with a (random) loser on the selected records.
fn apply_swaps(records: &mut [PreferenceRecord], annotator: &AnnotatorSpec) {
    let mut rng = rng::stream(annotator.seed, STREAM_NOISE);
    let chosen: Vec<bool> = if annotator.fixed_subset {
        let k = (annotator.flip_rate * records.len() as f64).round() as usize;
        let mut idx: Vec<usize> = (0..records.len()).collect();
        idx.shuffle(&mut rng);
        let mut mask = vec![false; records.len()];
        idx[..k].iter().for_each(|&i| mask[i] = true);
        mask
    } else {
        (0..records.len()).map(|_| rng.random::<f64>() < annotator.flip_rate).collect()
    };
    for (rec, swap) in records.iter_mut().zip(chosen) {
        if swap {
            let j = rng.random_range(0..rec.losers.len());
            std::mem::swap(&mut rec.winners[0], &mut rec.losers[j]);
        }
    }
}

/// Fraction of paired draws `y ~ π_θ`, `y' ~ π_ref` with `r*(y) > r*(y')`, ties counting one half.
/// `samples` draws per prompt.
pub fn true_winrate(pair: &ReferencePair, world: &World, samples: usize, seed: u64) -> Result<f64> {
    if samples == 0 {
        return Err(LabError::Invalid("true_winrate needs at least one sample".into()));
    }
    let mut total = 0.0;
    for ctx in &world.contexts {
        let lp = pair.policy.candidate_log_probs(ctx)?;
        let lr = pair.reference().candidate_log_probs(ctx)?;
        let r = &world.rewards.rewards[ctx.prompt_id];
        let mut rng = rng::stream(seed, ctx.prompt_id as u64);
        for _ in 0..samples {
            let i = rng::sample_log_categorical(&mut rng, &lp);
            let j = rng::sample_log_categorical(&mut rng, &lr);
            total += win_score(r[i], r[j]);
        }
    }
    Ok(total / (samples * world.contexts.len()) as f64)
}

/// Expectation of [`true_winrate`] by enumeration.
pub fn exact_winrate(pair: &ReferencePair, world: &World) -> Result<f64> {
    let mut total = 0.0;
    for ctx in &world.contexts {
        let p: Vec<f64> = pair.policy.candidate_log_probs(ctx)?.iter().map(|l| l.exp()).collect();
        let q: Vec<f64> = pair.reference().candidate_log_probs(ctx)?.iter().map(|l| l.exp()).collect();
        let r = &world.rewards.rewards[ctx.prompt_id];
        for i in 0..p.len() {
            for j in 0..q.len() {
                total += p[i] * q[j] * win_score(r[i], r[j]);
            }
        }
    }
    Ok(total / world.contexts.len() as f64)
}

fn win_score(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else if a == b {
        0.5
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> WorldSpec {
        WorldSpec { n_prompts: 20, seed, ..WorldSpec::default() }
    }

    #[test]
    fn world_is_reproducible() {
        let a = gen_world(&small(3)).unwrap();
        let b = gen_world(&small(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.rewards, gen_world(&small(4)).unwrap().rewards);
    }

    #[test]
    fn world_shapes() {
        let w = gen_world(&small(1)).unwrap();
        for ctx in &w.contexts {
            assert_eq!(ctx.candidates.len(), 5);
            assert_eq!(ctx.hidden_states.len(), ctx.tokens.len());
            assert!(ctx.hidden_states.iter().all(|h| h.len() == 16));
            for c in &ctx.candidates {
                assert!((2..=12).contains(&c.len()));
            }
            let lp = w.reference.candidate_log_probs(ctx).unwrap();
            assert!((lp.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn same_token_same_embedding() {
        let w = gen_world(&small(2)).unwrap();
        let mut seen = std::collections::HashMap::new();
        for ctx in &w.contexts {
            for (t, h) in ctx.tokens.tokens().iter().zip(&ctx.hidden_states) {
                assert_eq!(seen.entry(*t).or_insert_with(|| h.clone()), h);
            }
        }
    }

    #[test]
    fn too_few_candidates_rejected() {
        let spec = WorldSpec { n_candidates: 1, ..small(0) };
        assert!(matches!(gen_world(&spec), Err(LabError::Config(_))));
        let spec = WorldSpec { n_candidates: 3, ..small(0) };
        let w = gen_world(&spec).unwrap();
        let c = ConstructionSpec { form: DatasetForm::Multi, ..Default::default() };
        assert!(matches!(annotate(&w, &AnnotatorSpec::rational(0), &c), Err(LabError::Config(_))));
    }

    #[test]
    fn zero_flip_rate_equals_rational() {
        let w = gen_world(&small(5)).unwrap();
        let c = ConstructionSpec { pairs_per_prompt: 3, ..Default::default() };
        let clean = annotate(&w, &AnnotatorSpec::rational(9), &c).unwrap();
        let noisy = annotate(&w, &AnnotatorSpec::noisy(0.0, 9), &c).unwrap();
        assert_eq!(clean.records, noisy.records);
    }

    #[test]
    fn full_flip_inverts_every_label() {
        let w = gen_world(&small(5)).unwrap();
        let c = ConstructionSpec { pairs_per_prompt: 2, ..Default::default() };
        let clean = annotate(&w, &AnnotatorSpec::rational(1), &c).unwrap();
        let flipped = annotate(&w, &AnnotatorSpec::noisy(1.0, 1), &c).unwrap();
        for (a, b) in clean.records.iter().zip(&flipped.records) {
            assert_eq!(a.winners, b.losers);
            assert_eq!(a.losers, b.winners);
        }
    }

    #[test]
    fn multi_shape_and_winner() {
        let w = gen_world(&small(6)).unwrap();
        let c = ConstructionSpec { form: DatasetForm::Multi, ..Default::default() };
        let m = annotate(&w, &AnnotatorSpec::rational(0), &c).unwrap();
        for r in &m.records {
            assert_eq!((r.winners.len(), r.losers.len()), (1, 3));
            let best = w.rewards.argmax(r.prompt_id);
            assert_eq!(r.winners[0], w.contexts[r.prompt_id].candidates[best]);
        }
        for (form, wins, loses) in [(DatasetForm::WinnersOnly, 1, 0), (DatasetForm::LosersOnly, 0, 3)] {
            let c = ConstructionSpec { form, ..Default::default() };
            let m = annotate(&w, &AnnotatorSpec::rational(0), &c).unwrap();
            assert!(m.records.iter().all(|r| r.winners.len() == wins && r.losers.len() == loses));
        }
    }

    #[test]
    fn argmax_ties_prefer_lower_index() {
        let t = TrueRewardTable { separation: 0.0, seed: 0, rewards: vec![vec![1.0, 2.0, 2.0, 0.0]] };
        assert_eq!(t.argmax(0), 1);
    }

    #[test]
    fn fixed_subset_swaps_exact_count() {
        let w = gen_world(&WorldSpec { n_prompts: 100, ..small(0) }).unwrap();
        let c = ConstructionSpec::default();
        let clean = annotate(&w, &AnnotatorSpec::rational(2), &c).unwrap();
        let spec = AnnotatorSpec { fixed_subset: true, ..AnnotatorSpec::noisy(0.4, 2) };
        let noisy = annotate(&w, &spec, &c).unwrap();
        let swapped = clean.records.iter().zip(&noisy.records).filter(|(a, b)| a != b).count();
        assert_eq!(swapped, 40);
    }

    #[test]
    fn rational_with_flips_is_config_error() {
        let spec = AnnotatorSpec { flip_rate: 0.2, ..AnnotatorSpec::rational(0) };
        assert!(matches!(spec.validate(), Err(LabError::Config(_))));
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let w = gen_world(&small(8)).unwrap();
        let m = annotate(&w, &AnnotatorSpec::noisy(0.3, 4), &ConstructionSpec::default()).unwrap();
        let text = m.to_jsonl().unwrap();
        let back = DatasetManifest::from_reader(text.as_bytes()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_jsonl().unwrap(), text);
    }

    #[test]
    fn reference_winrate_is_half() {
        let w = gen_world(&small(2)).unwrap();
        let pair = w.reference_pair();
        assert!((exact_winrate(&pair, &w).unwrap() - 0.5).abs() < 1e-12);
        let n = 2000 * w.contexts.len();
        let est = true_winrate(&pair, &w, 2000, 7).unwrap();
        assert!((est - 0.5).abs() <= 3.0 * (0.25 / n as f64).sqrt(), "{est}");
        assert_eq!(est, true_winrate(&pair, &w, 2000, 7).unwrap());
    }
}
