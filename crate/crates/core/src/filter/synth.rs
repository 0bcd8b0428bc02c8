//! Deterministic synthetic corpora with planted noise and a ground-truth
//! oracle.
//!
//! Clean QAs point mostly along their image embedding, tilted towards one of
//! three fixed capacity directions, and carry high entailment. Three kinds of
//! corruption can be planted: misaligned QAs (embedding nearly orthogonal to
//! the image), contradictions (low entailment, embedding untouched) and
//! duplicates (a verbatim copy of a clean sibling under a new id).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{FilterError, Oracle, OracleEntry, Result};
use crate::corpus::{l2_norm, Capacity, Corpus, QaRecord, Sample};
use crate::rng::RngKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    ImageMisalignment,
    CaptionContradiction,
    DuplicateQa,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] =
        [NoiseKind::ImageMisalignment, NoiseKind::CaptionContradiction, NoiseKind::DuplicateQa];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::ImageMisalignment => "image_misalignment",
            NoiseKind::CaptionContradiction => "caption_contradiction",
            NoiseKind::DuplicateQa => "duplicate_qa",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        NoiseKind::ALL.into_iter().find(|k| k.as_str().eq_ignore_ascii_case(s)).ok_or_else(|| {
            format!("unknown noise kind `{s}` (expected caption_contradiction, image_misalignment or duplicate_qa)")
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub qas_min: usize,
    pub qas_max: usize,
    pub f: usize,
    /// Fraction of QAs to corrupt; the count is `round(noise_rate · n_qas)`.
    pub noise_rate: f64,
    /// Corruptions cycle through these kinds in equal shares.
    pub noise_kinds: Vec<NoiseKind>,
    pub seed: u64,
    /// Length of the random offset added to the image direction for captions.
    pub caption_noise: f64,
    /// Length of the random offset added to the image direction for clean QAs.
    pub qa_noise: f64,
    /// Length of the capacity-class offset in QA embeddings.
    pub capacity_strength: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 500,
            qas_min: 3,
            qas_max: 3,
            f: 64,
            noise_rate: 0.25,
            noise_kinds: NoiseKind::ALL.to_vec(),
            seed: 42,
            caption_noise: 0.8,
            qa_noise: 0.8,
            capacity_strength: 0.5,
        }
    }
}

/// Entailment range of clean and misaligned QAs.
pub const CLEAN_NLI: (f64, f64) = (0.7, 1.0);
/// Entailment range of contradictions.
pub const CONTRADICTION_NLI: (f64, f64) = (0.0, 0.2);
/// Misaligned QAs have `|cos(image, qa)|` at most this.
pub const MISALIGNED_MAX_COS: f64 = 0.1;

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(FilterError::Synth(m));
        if self.f < 2 {
            return fail(format!("f must be at least 2, got {}", self.f));
        }
        if self.qas_min == 0 || self.qas_min > self.qas_max {
            return fail(format!("need 1 <= qas_min <= qas_max, got {}..={}", self.qas_min, self.qas_max));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return fail(format!("noise_rate {} outside [0, 1]", self.noise_rate));
        }
        if self.noise_rate > 0.0 && self.noise_kinds.is_empty() {
            return fail("noise_rate > 0 needs at least one noise kind".into());
        }
        if self.noise_kinds.contains(&NoiseKind::DuplicateQa) && self.qas_max < 2 {
            return fail("duplicates need samples with at least two QAs".into());
        }
        for (name, v) in [
            ("caption_noise", self.caption_noise),
            ("qa_noise", self.qa_noise),
            ("capacity_strength", self.capacity_strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn random_unit<R: Rng>(rng: &mut R, f: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..f).map(|_| rng.sample(StandardNormal)).collect();
        if l2_norm(&v) > 1e-6 {
            return normalize(v);
        }
    }
}

fn axpy(a: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(xi, yi)| a * xi + yi).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Role {
    Clean,
    Source,
    Corrupt(NoiseKind),
}

/// Chooses which QAs to corrupt and how. Duplicates are placed first so each
/// can claim a clean sibling as its source; sources are never corrupted.
fn plan_noise(cfg: &SynthConfig, sample_of: &[usize], key: RngKey) -> Result<(Vec<Role>, Vec<Option<usize>>)> {
    let n = sample_of.len();
    let m = (cfg.noise_rate * n as f64).round() as usize;
    let mut rng = key.rng();
    let mut kinds: Vec<NoiseKind> = (0..m).map(|j| cfg.noise_kinds[j % cfg.noise_kinds.len()]).collect();
    kinds.shuffle(&mut rng);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut roles = vec![Role::Clean; n];
    let mut sources = vec![None; n];
    let mut start = vec![0usize; n];
    for i in 1..n {
        start[i] = if sample_of[i] == sample_of[i - 1] { start[i - 1] } else { i };
    }

    let n_dup = kinds.iter().filter(|&&k| k == NoiseKind::DuplicateQa).count();
    let mut placed = 0;
    for &x in &order {
        if placed == n_dup {
            break;
        }
        if roles[x] != Role::Clean {
            continue;
        }
        let siblings = (start[x]..n).take_while(|&j| sample_of[j] == sample_of[x]);
        let source = siblings.filter(|&j| j != x).find(|&j| matches!(roles[j], Role::Clean | Role::Source));
        if let Some(y) = source {
            roles[y] = Role::Source;
            roles[x] = Role::Corrupt(NoiseKind::DuplicateQa);
            sources[x] = Some(y);
            placed += 1;
        }
    }
    let mut rest = kinds.into_iter().filter(|&k| k != NoiseKind::DuplicateQa);
    let mut remaining = m - n_dup;
    for &x in &order {
        if remaining == 0 {
            break;
        }
        if roles[x] == Role::Clean {
            roles[x] = Role::Corrupt(rest.next().expect("kind list sized to m"));
            remaining -= 1;
        }
    }
    if placed < n_dup || remaining > 0 {
        return Err(FilterError::Synth(format!(
            "cannot plant {m} corrupt QAs among {n} (duplicates need clean siblings); lower noise_rate"
        )));
    }
    Ok((roles, sources))
}

/// Generates a corpus and its oracle. Identical configs give identical output.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<(Corpus, Oracle)> {
    cfg.validate()?;
    let root = RngKey::new(cfg.seed);
    let f = cfg.f;
    let capacity_dirs: Vec<Vec<f64>> = {
        let mut rng = root.named("capacity").rng();
        (0..3).map(|_| random_unit(&mut rng, f)).collect()
    };
    let mut size_rng = root.named("sizes").rng();
    let sizes: Vec<usize> = (0..cfg.n_samples).map(|_| size_rng.random_range(cfg.qas_min..=cfg.qas_max)).collect();

    let mut samples = Vec::with_capacity(cfg.n_samples);
    for (i, &size) in sizes.iter().enumerate() {
        let mut rng = root.named("sample").split(i as u64).rng();
        let sample_id = format!("s{i:05}");
        let image = random_unit(&mut rng, f);
        let caption = normalize(axpy(cfg.caption_noise, &random_unit(&mut rng, f), &image));
        let qas = (0..size)
            .map(|k| {
                let cls = rng.random_range(0..3);
                let offset = axpy(
                    cfg.capacity_strength,
                    &capacity_dirs[cls],
                    &random_unit(&mut rng, f).iter().map(|x| x * cfg.qa_noise).collect::<Vec<_>>(),
                );
                QaRecord {
                    qa_id: format!("{sample_id}-q{k}"),
                    question_text: format!("question {k} about sample {i}"),
                    answer_text: format!("answer {k} for sample {i}"),
                    qa_embedding: normalize(axpy(1.0, &image, &offset)),
                    nli_entailment: rng.random_range(CLEAN_NLI.0..=CLEAN_NLI.1),
                    capacity_label: Capacity::from_index(cls).expect("class index < 3"),
                }
            })
            .collect();
        samples.push(Sample {
            caption_text: format!("synthetic caption for sample {i}"),
            sample_id,
            image_embedding: image,
            caption_embedding: caption,
            qas,
        });
    }

    let mut locate = Vec::new();
    for (s, sample) in samples.iter().enumerate() {
        locate.extend((0..sample.qas.len()).map(|k| (s, k)));
    }
    let sample_of: Vec<usize> = locate.iter().map(|&(s, _)| s).collect();
    let (roles, sources) = plan_noise(cfg, &sample_of, root.named("plan"))?;

    for (x, role) in roles.iter().enumerate() {
        let Role::Corrupt(kind) = *role else { continue };
        let (s, k) = locate[x];
        let mut rng = root.named("corrupt").split(x as u64).rng();
        match kind {
            NoiseKind::ImageMisalignment => {
                let image = samples[s].image_embedding.clone();
                let cls = samples[s].qas[k].capacity_label.index();
                let raw = axpy(cfg.capacity_strength, &capacity_dirs[cls], &random_unit(&mut rng, f));
                let perp = normalize(axpy(-dot(&raw, &image), &image, &raw));
                let eps = rng.random_range(-MISALIGNED_MAX_COS..=MISALIGNED_MAX_COS);
                samples[s].qas[k].qa_embedding = normalize(axpy(eps, &image, &perp));
            }
            NoiseKind::CaptionContradiction => {
                samples[s].qas[k].nli_entailment = rng.random_range(CONTRADICTION_NLI.0..=CONTRADICTION_NLI.1);
            }
            NoiseKind::DuplicateQa => {
                let (_, src) = locate[sources[x].expect("duplicate has a source")];
                let original = samples[s].qas[src].clone();
                samples[s].qas[k] = QaRecord { qa_id: samples[s].qas[k].qa_id.clone(), ..original };
            }
        }
    }

    let entries = roles
        .iter()
        .zip(&sources)
        .zip(&locate)
        .map(|((role, source), &(s, k))| {
            let kind = match role {
                Role::Corrupt(kind) => Some(*kind),
                _ => None,
            };
            OracleEntry {
                sample_id: samples[s].sample_id.clone(),
                qa_id: samples[s].qas[k].qa_id.clone(),
                corrupt: kind.is_some(),
                kind,
                source_qa_id: source.map(|y| samples[s].qas[locate[y].1].qa_id.clone()),
            }
        })
        .collect();

    let mut source_meta = BTreeMap::new();
    source_meta.insert("generator".to_string(), "hicqa-synth".to_string());
    source_meta.insert("seed".to_string(), cfg.seed.to_string());
    source_meta.insert("noise_rate".to_string(), cfg.noise_rate.to_string());
    let corpus = Corpus { f, samples, source_meta };
    Ok((corpus, Oracle { seed: cfg.seed, noise_rate: cfg.noise_rate, entries }))
}
