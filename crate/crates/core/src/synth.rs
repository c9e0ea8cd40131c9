//! Synthetic benchmark with planted concepts and a known label rule.
//!
//! Each concept owns a disjoint 4×4 block of the image. When the concept is
//! present its block is stamped at intensity 0.9; Gaussian noise is added and
//! pixels are clipped to `[0, 1]`. The class label depends only on the
//! noise-free presence of the causal concepts.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Csv};
use crate::net::Tensor;

pub const MOTIF_SIZE: usize = 4;
pub const MOTIF_INTENSITY: f64 = 0.9;
pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Rule {
    And,
    Or,
    TwoOfThree,
}

impl Rule {
    pub fn eval(self, present: &[bool]) -> bool {
        match self {
            Rule::And => present.iter().all(|p| *p),
            Rule::Or => present.iter().any(|p| *p),
            Rule::TwoOfThree => present.iter().filter(|p| **p).count() >= 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub grid_size: usize,
    pub num_concepts: usize,
    pub causal_set: Vec<usize>,
    pub rule: Rule,
    pub concept_prevalence: Vec<f64>,
    pub noise_sigma: f64,
    pub missing_prob: f64,
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid_size: 16,
            num_concepts: 8,
            causal_set: vec![0, 1],
            rule: Rule::And,
            concept_prevalence: vec![0.5; 8],
            noise_sigma: 0.1,
            missing_prob: 0.05,
            num_samples: 2000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Top-left corners of the reserved motif blocks, one per concept.
    ///
    /// Blocks are laid out on a checkerboard of the 4×4 block grid so that no
    /// two concept regions share a pixel or an edge. Slots are handed out
    /// farthest-first, so low concept ids sit far apart: with the default
    /// causal set {0, 1} the causal motifs take opposite corners and no
    /// distractor touches both.
    pub fn motif_origins(&self) -> Result<Vec<(usize, usize)>> {
        let blocks = self.grid_size / MOTIF_SIZE;
        let mut slots: Vec<(usize, usize)> = (0..blocks)
            .flat_map(|r| (0..blocks).map(move |c| (r, c)))
            .filter(|(r, c)| (r + c) % 2 == 0)
            .map(|(r, c)| (r * MOTIF_SIZE, c * MOTIF_SIZE))
            .collect();
        if self.num_concepts > slots.len() {
            return Err(Error::config(
                "synth.num_concepts",
                format!(
                    "{} concepts need disjoint {MOTIF_SIZE}x{MOTIF_SIZE} regions but a {}x{} grid holds {}",
                    self.num_concepts,
                    self.grid_size,
                    self.grid_size,
                    slots.len()
                ),
            ));
        }
        let mut order = Vec::with_capacity(self.num_concepts);
        while order.len() < self.num_concepts {
            let gap = |p: &(usize, usize)| {
                order
                    .iter()
                    .map(|q: &(usize, usize)| p.0.abs_diff(q.0).pow(2) + p.1.abs_diff(q.1).pow(2))
                    .min()
                    .unwrap_or(0)
            };
            // first slot is the top-left corner; ties keep scan order
            let best = (0..slots.len()).rev().max_by_key(|&i| gap(&slots[i])).unwrap();
            order.push(slots.remove(best));
        }
        Ok(order)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < MOTIF_SIZE {
            return Err(Error::config("synth.grid_size", "must be at least 4"));
        }
        if self.num_concepts == 0 {
            return Err(Error::config("synth.num_concepts", "must be >= 1"));
        }
        self.motif_origins()?;
        if self.causal_set.is_empty() {
            return Err(Error::config("synth.causal_set", "must be nonempty"));
        }
        let unique: BTreeSet<usize> = self.causal_set.iter().copied().collect();
        if unique.len() != self.causal_set.len() {
            return Err(Error::config("synth.causal_set", "contains duplicates"));
        }
        if let Some(k) = self.causal_set.iter().find(|k| **k >= self.num_concepts) {
            return Err(Error::config(
                "synth.causal_set",
                format!("concept {k} is outside 0..{}", self.num_concepts),
            ));
        }
        if self.rule == Rule::TwoOfThree && self.causal_set.len() != 3 {
            return Err(Error::config("synth.rule", "TWO_OF_THREE needs exactly three causal concepts"));
        }
        if self.concept_prevalence.len() != self.num_concepts {
            return Err(Error::config(
                "synth.concept_prevalence",
                format!("expected {} entries, got {}", self.num_concepts, self.concept_prevalence.len()),
            ));
        }
        for (k, p) in self.concept_prevalence.iter().enumerate() {
            if !(*p > 0.0 && *p < 1.0) {
                return Err(Error::config(
                    format!("synth.concept_prevalence[{k}]"),
                    "must lie strictly inside (0, 1)",
                ));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("synth.noise_sigma", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.missing_prob) {
            return Err(Error::config("synth.missing_prob", "must lie in [0, 1)"));
        }
        if self.num_samples < 5 {
            return Err(Error::config("synth.num_samples", "must be >= 5"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `grid × grid × 1` image with pixels in `[0, 1]`.
    pub x: Tensor,
    /// Class index; `1` when the label rule fires.
    pub y: usize,
    /// Observed concept labels: 1 present, 0 absent, -1 missing.
    pub c: Vec<i8>,
    /// Noise-free concept presence, for evaluation only.
    pub c_true: Vec<u8>,
}

impl Sample {
    pub fn one_hot(&self) -> [f64; NUM_CLASSES] {
        let mut v = [0.0; NUM_CLASSES];
        v[self.y] = 1.0;
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let origins = config.motif_origins()?;
    let g = config.grid_size;
    let k = config.num_concepts;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma validated");

    let mut samples = Vec::with_capacity(config.num_samples);
    for _ in 0..config.num_samples {
        let c_true: Vec<u8> = config
            .concept_prevalence
            .iter()
            .map(|p| u8::from(rng.random_bool(*p)))
            .collect();
        let mut pixels = vec![0.0; g * g];
        for (kk, &(r0, c0)) in origins.iter().enumerate() {
            if c_true[kk] == 1 {
                for r in r0..r0 + MOTIF_SIZE {
                    for c in c0..c0 + MOTIF_SIZE {
                        pixels[r * g + c] = MOTIF_INTENSITY;
                    }
                }
            }
        }
        if config.noise_sigma > 0.0 {
            for p in pixels.iter_mut() {
                *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        let c: Vec<i8> = c_true
            .iter()
            .map(|&t| {
                if rng.random::<f64>() < config.missing_prob {
                    -1
                } else {
                    t as i8
                }
            })
            .collect();
        let present: Vec<bool> = config.causal_set.iter().map(|&i| c_true[i] == 1).collect();
        let y = usize::from(config.rule.eval(&present));
        samples.push(Sample {
            x: Tensor::new(vec![g, g, 1], pixels)?,
            y,
            c,
            c_true,
        });
        debug_assert_eq!(samples.last().unwrap().c.len(), k);
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_train = (config.num_samples * 4) / 5;
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<Sample> { idx.iter().map(|&i| slots[i].take().unwrap()).collect() };
    let train = take(&order[..n_train]);
    let test = take(&order[n_train..]);
    Ok(Dataset {
        config: config.clone(),
        train,
        test,
    })
}

/// Indices of the concepts that enter the label rule.
pub fn ground_truth(config: &SynthConfig) -> BTreeSet<usize> {
    config.causal_set.iter().copied().collect()
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    config: SynthConfig,
    grid: [usize; 3],
    num_concepts: usize,
    n_train: usize,
    n_test: usize,
    files: Vec<String>,
}

const PARTS: [&str; 2] = ["train", "test"];

impl Dataset {
    pub fn part(&self, name: &str) -> &[Sample] {
        if name == "train" {
            &self.train
        } else {
            &self.test
        }
    }

    /// Writes the manifest, the little-endian binary arrays and `concepts.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let g = self.config.grid_size;
        let mut files = Vec::new();
        let mut csv_header = vec!["split".to_string(), "index".into(), "label".into()];
        csv_header.extend((0..self.config.num_concepts).map(|k| format!("c_{k}")));
        let header_refs: Vec<&str> = csv_header.iter().map(String::as_str).collect();
        let mut csv = Csv::with_header(&header_refs);
        for name in PARTS {
            let part = self.part(name);
            let images: Vec<f64> = part.iter().flat_map(|s| s.x.data().iter().copied()).collect();
            let labels: Vec<i8> = part.iter().map(|s| s.y as i8).collect();
            let concepts: Vec<i8> = part.iter().flat_map(|s| s.c.iter().copied()).collect();
            let truth: Vec<i8> = part.iter().flat_map(|s| s.c_true.iter().map(|v| *v as i8)).collect();
            for (suffix, bytes) in [
                ("images.bin", io::f64_to_le_bytes(&images)),
                ("labels.bin", io::i8_to_bytes(&labels)),
                ("concepts.bin", io::i8_to_bytes(&concepts)),
                ("concepts_true.bin", io::i8_to_bytes(&truth)),
            ] {
                let file = format!("{name}_{suffix}");
                io::write_atomic(&dir.join(&file), &bytes)?;
                files.push(file);
            }
            for (i, s) in part.iter().enumerate() {
                let mut row = vec![name.to_string(), i.to_string(), s.y.to_string()];
                row.extend(s.c.iter().map(|v| v.to_string()));
                csv.row(&row);
            }
        }
        io::write_atomic(&dir.join("concepts.csv"), csv.as_bytes())?;
        files.push("concepts.csv".into());
        let manifest = DatasetManifest {
            config: self.config.clone(),
            grid: [g, g, 1],
            num_concepts: self.config.num_concepts,
            n_train: self.train.len(),
            n_test: self.test.len(),
            files,
        };
        io::write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = io::read_json(&dir.join("manifest.json"))?;
        let g = manifest.grid;
        let pixels = g[0] * g[1] * g[2];
        let k = manifest.num_concepts;
        let mut parts = Vec::new();
        for (name, n) in [("train", manifest.n_train), ("test", manifest.n_test)] {
            let img_path = dir.join(format!("{name}_images.bin"));
            let images = io::f64_from_le_bytes(&fs::read(&img_path)?, &img_path)?;
            let labels = io::i8_from_bytes(&fs::read(dir.join(format!("{name}_labels.bin")))?);
            let concepts = io::i8_from_bytes(&fs::read(dir.join(format!("{name}_concepts.bin")))?);
            let truth = io::i8_from_bytes(&fs::read(dir.join(format!("{name}_concepts_true.bin")))?);
            if images.len() != n * pixels || labels.len() != n || concepts.len() != n * k || truth.len() != n * k {
                return Err(Error::Artifact {
                    path: dir.display().to_string(),
                    message: format!("{name} arrays do not match manifest sizes"),
                });
            }
            let mut samples = Vec::with_capacity(n);
            for i in 0..n {
                samples.push(Sample {
                    x: Tensor::new(g.to_vec(), images[i * pixels..(i + 1) * pixels].to_vec())?,
                    y: labels[i] as usize,
                    c: concepts[i * k..(i + 1) * k].to_vec(),
                    c_true: truth[i * k..(i + 1) * k].iter().map(|v| *v as u8).collect(),
                });
            }
            parts.push(samples);
        }
        let test = parts.pop().unwrap();
        let train = parts.pop().unwrap();
        Ok(Self {
            config: manifest.config,
            train,
            test,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            num_samples: 200,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_is_identical() {
        assert_eq!(generate(&small(3)).unwrap(), generate(&small(3)).unwrap());
        assert_ne!(generate(&small(3)).unwrap(), generate(&small(4)).unwrap());
    }

    #[test]
    fn noiseless_absent_concepts_give_blank_image() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            concept_prevalence: vec![1e-9; 8],
            num_samples: 20,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        for s in ds.train.iter().chain(&ds.test) {
            assert!(s.c_true.iter().all(|v| *v == 0));
            assert!(s.x.data().iter().all(|p| *p == 0.0));
        }
    }

    #[test]
    fn too_many_concepts_is_config_error() {
        let cfg = SynthConfig {
            num_concepts: 9,
            concept_prevalence: vec![0.5; 9],
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn motif_regions_are_disjoint() {
        let origins = SynthConfig::default().motif_origins().unwrap();
        let mut seen = std::collections::HashSet::new();
        for (r0, c0) in origins {
            for r in r0..r0 + MOTIF_SIZE {
                for c in c0..c0 + MOTIF_SIZE {
                    assert!(seen.insert((r, c)));
                }
            }
        }
    }

    #[test]
    fn label_rule_and_missing_labels_are_consistent() {
        let ds = generate(&small(11)).unwrap();
        for s in ds.train.iter().chain(&ds.test) {
            assert_eq!(s.y, usize::from(s.c_true[0] == 1 && s.c_true[1] == 1));
            for (c, t) in s.c.iter().zip(&s.c_true) {
                assert!(*c == -1 || *c == *t as i8);
            }
        }
        assert_eq!(ds.train.len(), 160);
        assert_eq!(ds.test.len(), 40);
    }

    #[test]
    fn ground_truth_is_causal_set() {
        assert_eq!(ground_truth(&SynthConfig::default()), BTreeSet::from([0, 1]));
        let cfg = SynthConfig {
            rule: Rule::TwoOfThree,
            causal_set: vec![0, 1, 2],
            seed: 99,
            ..SynthConfig::default()
        };
        assert_eq!(ground_truth(&cfg), BTreeSet::from([0, 1, 2]));
    }

    #[test]
    fn invalid_prevalence_names_field() {
        let mut cfg = SynthConfig::default();
        cfg.concept_prevalence[3] = 1.0;
        match cfg.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "synth.concept_prevalence[3]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small(5)).unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
        let csv = fs::read_to_string(dir.path().join("concepts.csv")).unwrap();
        assert!(csv.starts_with("split,index,label,c_0,"));
        assert_eq!(csv.lines().count(), 201);
    }
}
