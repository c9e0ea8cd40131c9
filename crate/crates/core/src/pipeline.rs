//! End-to-end pipeline: seeded stages that read and write artifacts under one
//! output directory.
//!
//! ```text
//! data/        gen-data        synthetic dataset
//! model/       train           classifier
//! probes/      fit-concepts    concept probes, probe_metrics.csv, masks.csv
//! cf/          counterfactuals counterfactuals.csv, x_prime.bin, summary.json
//! mediation/   mediate         heatmap.csv, records.json
//! ranking/     rank            ranking.csv, ranking.json
//! surrogate/   surrogate       tree.json, tree.txt, sweep.csv, fidelity.json
//! report/      report          the eight report files
//! manifest.json                running manifest (timings, checksums)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::counterfactual::{self, AteSummary, CounterfactualConfig, Pair};
use crate::error::{Error, Result};
use crate::io::{self, Csv};
use crate::mediation::{self, ConceptRanking, MediationRecord, Mediator};
use crate::net::{self, LayeredNetwork, Tensor, TrainConfig};
use crate::probe::{self, ConceptModel, ConceptModelFile, LambdaSelection, ProbeMetrics, Vectorization};
use crate::surrogate::{self, Fidelity, SweepPoint};
use crate::synth::{self, Dataset, SynthConfig, MOTIF_SIZE};
use crate::units::Granularity;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub lambda_grid: Vec<f64>,
    pub cv_folds: usize,
    /// Vectorization used at spatial splits; flat splits always flatten.
    pub spatial_mode: Vectorization,
    pub counterfactual: CounterfactualConfig,
    pub splits: Vec<usize>,
    /// Split whose effects drive the ranking and the surrogate.
    pub rank_split: usize,
    /// Class whose probability the TCAV baseline differentiates, and whose recall the sweep reports.
    pub positive_class: usize,
    pub fractions: Vec<f64>,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub mask_quantile: f64,
    /// Gaussian noise added to the non-causal concept columns of the sweep
    /// features, as a multiple of each column's std. 0 disables it.
    pub sweep_distractor_noise: f64,
    pub seed: u64,
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            lambda_grid: probe::default_lambda_grid(),
            cv_folds: 10,
            spatial_mode: Vectorization::Flatten,
            counterfactual: CounterfactualConfig::default(),
            splits: vec![2, 5, 8],
            rank_split: 5,
            positive_class: 1,
            fractions: (1..=8).map(|i| f64::from(i) / 8.0).collect(),
            max_depth: 3,
            min_leaf: 5,
            mask_quantile: 0.99,
            sweep_distractor_noise: 0.0,
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str::<Self>(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.counterfactual.validate()?;
        if self.lambda_grid.is_empty() {
            return Err(Error::config("lambda_grid", "must be nonempty"));
        }
        if let Some(l) = self.lambda_grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::config("lambda_grid", format!("invalid value {l}")));
        }
        if self.cv_folds < 2 {
            return Err(Error::config("cv_folds", "must be >= 2"));
        }
        let probe_net = self.architecture()?;
        if self.splits.is_empty() {
            return Err(Error::config("splits", "must be nonempty"));
        }
        for s in &self.splits {
            if !probe_net.split_candidates().contains(s) {
                return Err(Error::config(
                    "splits",
                    format!("{s} is not a split candidate {:?}", probe_net.split_candidates()),
                ));
            }
        }
        if !self.splits.contains(&self.rank_split) {
            return Err(Error::config("rank_split", "must be one of `splits`"));
        }
        if self.positive_class >= synth::NUM_CLASSES {
            return Err(Error::config("positive_class", "out of range"));
        }
        if self.fractions.is_empty() {
            return Err(Error::config("fractions", "must be nonempty"));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::config("fractions", format!("{f} is outside (0, 1]")));
        }
        if self.min_leaf == 0 {
            return Err(Error::config("min_leaf", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.mask_quantile) {
            return Err(Error::config("mask_quantile", "must lie in [0, 1]"));
        }
        if !(self.sweep_distractor_noise >= 0.0 && self.sweep_distractor_noise.is_finite()) {
            return Err(Error::config("sweep_distractor_noise", "must be finite and >= 0"));
        }
        Ok(())
    }

    fn architecture(&self) -> Result<LayeredNetwork> {
        let g = self.synth.grid_size;
        LayeredNetwork::default_architecture(g, g, 1, synth::NUM_CLASSES, 0)
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed.wrapping_add(stage.ordinal())
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    Train,
    FitConcepts,
    Counterfactuals,
    Mediate,
    Rank,
    Surrogate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenData,
        Stage::Train,
        Stage::FitConcepts,
        Stage::Counterfactuals,
        Stage::Mediate,
        Stage::Rank,
        Stage::Surrogate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::FitConcepts => "fit-concepts",
            Stage::Counterfactuals => "counterfactuals",
            Stage::Mediate => "mediate",
            Stage::Rank => "rank",
            Stage::Surrogate => "surrogate",
            Stage::Report => "report",
        }
    }

    pub fn ordinal(self) -> u64 {
        Stage::ALL.iter().position(|s| *s == self).unwrap() as u64
    }

    pub fn parse(name: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::config("stage", format!("unknown stage `{name}`")))
    }

    /// Upstream artifacts and the stage producing each.
    fn requires(self) -> &'static [(&'static str, Stage)] {
        const DATA: (&str, Stage) = ("data/manifest.json", Stage::GenData);
        const MODEL: (&str, Stage) = ("model/network.json", Stage::Train);
        const PROBES: (&str, Stage) = ("probes/index.json", Stage::FitConcepts);
        const CF: (&str, Stage) = ("cf/summary.json", Stage::Counterfactuals);
        const MED: (&str, Stage) = ("mediation/records.json", Stage::Mediate);
        const RANK: (&str, Stage) = ("ranking/ranking.json", Stage::Rank);
        const TREE: (&str, Stage) = ("surrogate/tree.json", Stage::Surrogate);
        match self {
            Stage::GenData => &[],
            Stage::Train => &[DATA],
            Stage::FitConcepts => &[DATA, MODEL],
            Stage::Counterfactuals => &[DATA, MODEL],
            Stage::Mediate => &[DATA, MODEL, PROBES, CF],
            Stage::Rank => &[DATA, MODEL, PROBES, MED],
            Stage::Surrogate => &[DATA, MODEL, PROBES, RANK],
            Stage::Report => &[PROBES, CF, MED, RANK, TREE],
        }
    }
}

/// Files the report stage assembles under `report/`.
pub const REPORT_FILES: [(&str, &str); 7] = [
    ("probe_metrics.csv", "probes/probe_metrics.csv"),
    ("counterfactuals.csv", "cf/counterfactuals.csv"),
    ("heatmap.csv", "mediation/heatmap.csv"),
    ("ranking.csv", "ranking/ranking.csv"),
    ("sweep.csv", "surrogate/sweep.csv"),
    ("tree.json", "surrogate/tree.json"),
    ("tree.txt", "surrogate/tree.txt"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub seed: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: serde_json::Value,
    pub stages: BTreeMap<String, StageTiming>,
    /// Relative path → SHA-256 of every artifact written so far.
    pub artifacts: BTreeMap<String, String>,
    pub columns: BTreeMap<String, Vec<String>>,
}

fn columns_doc() -> BTreeMap<String, Vec<String>> {
    let cols = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    BTreeMap::from([
        ("probe_metrics.csv".into(), cols(&["concept", "split", "auc", "recall", "lambda", "n_units", "folds"])),
        (
            "counterfactuals.csv".into(),
            cols(&["sample_id", "success", "target", "iterations", "l2", "p_target_x", "p_target_x_prime"]),
        ),
        ("heatmap.csv".into(), cols(&["concept", "split", "ie_mean", "ie_abs_mean", "de_mean", "n_pairs", "ate_ratio"])),
        ("ranking.csv".into(), cols(&["rank", "concept", "score", "tcav_score"])),
        ("sweep.csv".into(), cols(&["fraction", "n_concepts", "recall", "agreement"])),
    ])
}

pub fn concept_name(k: usize, num_concepts: usize) -> String {
    if k == num_concepts {
        "random".into()
    } else {
        format!("concept_{k}")
    }
}

fn load_manifest(cfg: &PipelineConfig) -> RunManifest {
    io::read_json(&cfg.path("manifest.json")).unwrap_or_default()
}

fn config_echo(cfg: &PipelineConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

/// Writes an artifact atomically and records its checksum.
struct Writer<'a> {
    cfg: &'a PipelineConfig,
    written: BTreeMap<String, String>,
}

impl<'a> Writer<'a> {
    fn new(cfg: &'a PipelineConfig) -> Self {
        Self {
            cfg,
            written: BTreeMap::new(),
        }
    }

    fn bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        io::write_atomic(&self.cfg.path(rel), bytes)?;
        self.written.insert(rel.to_string(), io::sha256_hex(bytes));
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.bytes(rel, s.as_bytes())
    }

    fn record_dir(&mut self, rel_dir: &str) -> Result<()> {
        let dir = self.cfg.path(rel_dir);
        let mut names: Vec<_> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| !n.starts_with('.'))
            .collect();
        names.sort();
        for n in names {
            let bytes = fs::read(dir.join(&n))?;
            self.written.insert(format!("{rel_dir}/{n}"), io::sha256_hex(&bytes));
        }
        Ok(())
    }
}

fn check_dependencies(stage: Stage, cfg: &PipelineConfig) -> Result<()> {
    for (artifact, producer) in stage.requires() {
        if !cfg.path(artifact).exists() {
            return Err(Error::Dependency {
                stage: producer.name().into(),
                artifact: (*artifact).into(),
            });
        }
    }
    Ok(())
}

/// Runs one stage, writing its outputs and updating `manifest.json`.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<RunManifest> {
    cfg.validate()?;
    check_dependencies(stage, cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let started = Instant::now();
    let mut w = Writer::new(cfg);
    let seed = cfg.stage_seed(stage);
    match stage {
        Stage::GenData => gen_data(cfg, seed, &mut w)?,
        Stage::Train => train_stage(cfg, seed, &mut w)?,
        Stage::FitConcepts => fit_concepts(cfg, seed, &mut w)?,
        Stage::Counterfactuals => counterfactual_stage(cfg, &mut w)?,
        Stage::Mediate => mediate_stage(cfg, &mut w)?,
        Stage::Rank => rank_stage(cfg, &mut w)?,
        Stage::Surrogate => surrogate_stage(cfg, seed, &mut w)?,
        Stage::Report => {}
    }
    let mut manifest = load_manifest(cfg);
    manifest.tool_version = TOOL_VERSION.into();
    manifest.config = config_echo(cfg)?;
    manifest.columns = columns_doc();
    manifest.artifacts.extend(std::mem::take(&mut w.written));
    manifest.stages.insert(
        stage.name().into(),
        StageTiming {
            seed,
            seconds: started.elapsed().as_secs_f64(),
        },
    );
    if stage == Stage::Report {
        for (name, src) in REPORT_FILES {
            let bytes = fs::read(cfg.path(src))?;
            w.bytes(&format!("report/{name}"), &bytes)?;
        }
        manifest.artifacts.extend(std::mem::take(&mut w.written));
        io::write_json(&cfg.path("report/manifest.json"), &manifest)?;
    }
    io::write_json(&cfg.path("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Runs every stage in dependency order; the first failure names its stage.
pub fn run_all(cfg: &PipelineConfig) -> Result<RunManifest> {
    cfg.validate()?;
    // start from a clean manifest so reruns do not inherit stale entries
    let _ = fs::remove_file(cfg.path("manifest.json"));
    let mut last = RunManifest::default();
    for stage in Stage::ALL {
        last = run_stage(stage, cfg).map_err(|e| Error::Stage {
            stage: stage.name().into(),
            source: Box::new(e),
        })?;
    }
    Ok(last)
}

fn gen_data(cfg: &PipelineConfig, seed: u64, _w: &mut Writer) -> Result<()> {
    let synth_cfg = SynthConfig {
        seed,
        ..cfg.synth.clone()
    };
    let ds = synth::generate(&synth_cfg)?;
    ds.save(&cfg.path("data"))?;
    _w.record_dir("data")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

fn inputs_of(samples: &[synth::Sample]) -> Vec<Tensor> {
    samples.iter().map(|s| s.x.clone()).collect()
}

fn labels_of(samples: &[synth::Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.y).collect()
}

fn train_stage(cfg: &PipelineConfig, seed: u64, w: &mut Writer) -> Result<()> {
    let ds = Dataset::load(&cfg.path("data"))?;
    let arch = cfg.architecture()?;
    let tcfg = TrainConfig { seed, ..cfg.train.clone() };
    let xs = inputs_of(&ds.train);
    let net = net::train(&arch, &xs, &labels_of(&ds.train), &tcfg)?;
    net.save(&cfg.path("model"))?;
    w.record_dir("model")?;
    let metrics = TrainMetrics {
        train_accuracy: net::accuracy(&net, &xs, &labels_of(&ds.train))?,
        test_accuracy: net::accuracy(&net, &inputs_of(&ds.test), &labels_of(&ds.test))?,
    };
    w.json("model/metrics.json", &metrics)
}

/// Index of everything the fit-concepts stage produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeIndex {
    pub num_concepts: usize,
    pub entries: Vec<ProbeEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub concept_id: usize,
    pub name: String,
    pub split: usize,
    pub file: String,
    /// `None` for the random-unit control.
    pub metrics: Option<ProbeMetrics>,
    pub selection: Option<LambdaSelection>,
    pub n_units: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub concept_id: usize,
    pub split: usize,
    pub channel: usize,
    pub threshold: f64,
    pub iou: f64,
}

fn mode_for(cfg: &PipelineConfig, spatial: bool) -> Vectorization {
    if spatial {
        cfg.spatial_mode
    } else {
        Vectorization::Flatten
    }
}

/// Split activations of every sample.
fn split_activations(net: &LayeredNetwork, samples: &[synth::Sample], s: usize) -> Result<Vec<net::Activation>> {
    samples.iter().map(|x| net.forward_split(&x.x, s)).collect()
}

/// The random-unit control: as many units as the median concept probe, all with
/// equal positive weight.
pub fn random_control(models: &[ConceptModel], unit_count: usize, id: usize, split: usize, mode: Vectorization, seed: u64) -> Result<ConceptModel> {
    let mut sizes: Vec<usize> = models.iter().map(|m| m.nonzero_count()).collect();
    sizes.sort_unstable();
    let size = sizes.get(sizes.len() / 2).copied().unwrap_or(1).clamp(1, unit_count);
    let units = probe::random_units(size, unit_count, mode.granularity(), split, seed)?;
    let mut beta = vec![0.0; unit_count];
    let v = 1.0 / (size as f64).sqrt();
    for &i in units.indices() {
        beta[i] = v;
    }
    // not a fitted probe: no regularization weight applies
    Ok(ConceptModel::new(id, beta, 0.0, 0.0, mode, split))
}

/// Mean IoU, over images containing the concept, between the top unit's mask
/// and the concept's motif region.
fn mask_iou(cfg: &PipelineConfig, model: &ConceptModel, acts: &[net::Activation], samples: &[synth::Sample]) -> Result<Option<MaskRecord>> {
    let Some(first) = acts.first() else { return Ok(None) };
    if !first.spatial {
        return Ok(None);
    }
    let c = first.tensor.shape()[2];
    let Some(top) = model
        .units
        .indices()
        .iter()
        .copied()
        .filter(|&i| model.beta[i] > 0.0)
        .max_by(|a, b| model.beta[*a].total_cmp(&model.beta[*b]).then(b.cmp(a)))
    else {
        return Ok(None);
    };
    let channel = match model.mode {
        Vectorization::Flatten => top % c,
        Vectorization::Maxpool => top,
    };
    let masks = probe::activation_mask(channel, acts, cfg.mask_quantile)?;
    let origins = cfg.synth.motif_origins()?;
    let (r0, c0) = origins[model.concept_id];
    let g = cfg.synth.grid_size;
    let scale = g / masks.height;
    let mut total = 0.0;
    let mut n = 0usize;
    for (mask, s) in masks.masks.iter().zip(samples) {
        if s.c_true[model.concept_id] != 1 {
            continue;
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for r in 0..g {
            for col in 0..g {
                let m = mask[(r / scale) * masks.width + col / scale];
                let inside = (r0..r0 + MOTIF_SIZE).contains(&r) && (c0..c0 + MOTIF_SIZE).contains(&col);
                inter += usize::from(m && inside);
                union += usize::from(m || inside);
            }
        }
        total += inter as f64 / union.max(1) as f64;
        n += 1;
    }
    Ok(Some(MaskRecord {
        concept_id: model.concept_id,
        split: model.split,
        channel,
        threshold: masks.threshold,
        iou: if n == 0 { 0.0 } else { total / n as f64 },
    }))
}

fn fit_concepts(cfg: &PipelineConfig, seed: u64, w: &mut Writer) -> Result<()> {
    let ds = Dataset::load(&cfg.path("data"))?;
    let net = LayeredNetwork::load(&cfg.path("model"))?;
    let k_total = ds.config.num_concepts;
    let mut index = ProbeIndex {
        num_concepts: k_total,
        entries: Vec::new(),
    };
    let mut metrics_csv = Csv::with_header(&["concept", "split", "auc", "recall", "lambda", "n_units", "folds"]);
    let mut mask_csv = Csv::with_header(&["concept", "split", "channel", "threshold", "iou"]);
    for &s in &cfg.splits {
        let train_acts = split_activations(&net, &ds.train, s)?;
        let test_acts = split_activations(&net, &ds.test, s)?;
        let spatial = train_acts[0].spatial;
        let mode = mode_for(cfg, spatial);
        let train_vecs = train_acts.iter().map(|a| probe::vectorize(a, mode)).collect::<Result<Vec<_>>>()?;
        let test_vecs = test_acts.iter().map(|a| probe::vectorize(a, mode)).collect::<Result<Vec<_>>>()?;
        let mut models = Vec::new();
        for k in 0..k_total {
            let concept_seed = seed.wrapping_add(1000 * s as u64 + k as u64);
            let observed: Vec<i8> = ds.train.iter().map(|x| x.c[k]).collect();
            let (idx, labels) = probe::balanced_indices(&observed, concept_seed);
            let acts: Vec<Vec<f64>> = idx.iter().map(|&i| train_vecs[i].clone()).collect();
            let (model, selection) =
                probe::fit_concept_cv(k, s, mode, &acts, &labels, &cfg.lambda_grid, cfg.cv_folds, concept_seed)?;

            let (test_vecs_k, test_labels): (Vec<Vec<f64>>, Vec<u8>) = ds
                .test
                .iter()
                .zip(&test_vecs)
                .filter(|(x, _)| x.c[k] != -1)
                .map(|(x, v)| (v.clone(), x.c[k] as u8))
                .unzip();
            let metrics = probe::eval_probe(&model, &test_vecs_k, &test_labels)?;
            metrics_csv.row(&[
                concept_name(k, k_total),
                s.to_string(),
                metrics.auc.to_string(),
                metrics.recall.to_string(),
                model.lambda.to_string(),
                model.nonzero_count().to_string(),
                selection.folds.to_string(),
            ]);
            if let Some(m) = mask_iou(cfg, &model, &test_acts, &ds.test)? {
                mask_csv.row(&[
                    concept_name(k, k_total),
                    s.to_string(),
                    m.channel.to_string(),
                    m.threshold.to_string(),
                    m.iou.to_string(),
                ]);
            }
            let file = format!("probes/split{s}_concept{k}.json");
            w.json(&file, &model.to_file())?;
            index.entries.push(ProbeEntry {
                concept_id: k,
                name: concept_name(k, k_total),
                split: s,
                file,
                metrics: Some(metrics),
                selection: Some(selection),
                n_units: model.nonzero_count(),
            });
            models.push(model);
        }
        let unit_count = train_acts[0].unit_count(mode.granularity())?;
        let control = random_control(&models, unit_count, k_total, s, mode, seed.wrapping_add(1000 * s as u64 + 999))?;
        let file = format!("probes/split{s}_random.json");
        w.json(&file, &control.to_file())?;
        index.entries.push(ProbeEntry {
            concept_id: k_total,
            name: concept_name(k_total, k_total),
            split: s,
            file,
            metrics: None,
            selection: None,
            n_units: control.nonzero_count(),
        });
    }
    w.bytes("probes/probe_metrics.csv", metrics_csv.as_bytes())?;
    w.bytes("probes/masks.csv", mask_csv.as_bytes())?;
    w.json("probes/index.json", &index)
}

/// Loads every probe (including random controls) from the index.
pub fn load_probes(out_dir: &Path) -> Result<(ProbeIndex, Vec<ConceptModel>)> {
    let index: ProbeIndex = io::read_json(&out_dir.join("probes/index.json"))?;
    let models = index
        .entries
        .iter()
        .map(|e| {
            let f: ConceptModelFile = io::read_json(&out_dir.join(&e.file))?;
            ConceptModel::from_file(&f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((index, models))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSummary {
    pub attempts: usize,
    pub successes: usize,
    pub flip_rate: f64,
    pub ate: Option<AteSummary>,
    pub success_ids: Vec<usize>,
    pub targets: Vec<usize>,
}

fn counterfactual_stage(cfg: &PipelineConfig, w: &mut Writer) -> Result<()> {
    let ds = Dataset::load(&cfg.path("data"))?;
    let net = LayeredNetwork::load(&cfg.path("model"))?;
    let xs = inputs_of(&ds.test);
    let results = counterfactual::run_batch(&net, &xs, &cfg.counterfactual)?;
    w.bytes("cf/counterfactuals.csv", counterfactual::results_csv(&results).as_bytes())?;
    let x_prime: Vec<f64> = results.iter().flat_map(|r| r.x_prime.data().iter().copied()).collect();
    w.bytes("cf/x_prime.bin", &io::f64_to_le_bytes(&x_prime))?;
    let pairs: Vec<Pair> = results
        .iter()
        .zip(&xs)
        .filter(|(r, _)| r.success)
        .map(|(r, x)| Pair::from_result(x, r))
        .collect();
    let ate = if pairs.is_empty() {
        None
    } else {
        Some(counterfactual::compute_ate(&net, &pairs, results.len())?)
    };
    let successes = pairs.len();
    w.json(
        "cf/summary.json",
        &CounterfactualSummary {
            attempts: results.len(),
            successes,
            flip_rate: successes as f64 / results.len().max(1) as f64,
            ate,
            success_ids: results.iter().enumerate().filter(|(_, r)| r.success).map(|(i, _)| i).collect(),
            targets: results.iter().map(|r| r.target_class).collect(),
        },
    )
}

/// Successful counterfactual pairs, rebuilt from the stage artifacts.
pub fn load_pairs(out_dir: &Path, ds: &Dataset) -> Result<Vec<Pair>> {
    let summary: CounterfactualSummary = io::read_json(&out_dir.join("cf/summary.json"))?;
    let path = out_dir.join("cf/x_prime.bin");
    let data = io::f64_from_le_bytes(&fs::read(&path)?, &path)?;
    let shape = ds.test[0].x.shape().to_vec();
    let px: usize = shape.iter().product();
    if data.len() != px * ds.test.len() {
        return Err(Error::Artifact {
            path: path.display().to_string(),
            message: "counterfactual count does not match the test split".into(),
        });
    }
    summary
        .success_ids
        .iter()
        .map(|&i| {
            Ok(Pair {
                x: ds.test[i].x.clone(),
                x_prime: Tensor::new(shape.clone(), data[i * px..(i + 1) * px].to_vec())?,
                target: summary.targets[i],
            })
        })
        .collect()
}

fn mediate_stage(cfg: &PipelineConfig, w: &mut Writer) -> Result<()> {
    let ds = Dataset::load(&cfg.path("data"))?;
    let net = LayeredNetwork::load(&cfg.path("model"))?;
    let (index, models) = load_probes(&cfg.out_dir)?;
    let pairs = load_pairs(&cfg.out_dir, &ds)?;
    let mediators: Vec<Mediator> = index
        .entries
        .iter()
        .zip(&models)
        .filter(|(e, _)| cfg.splits.contains(&e.split))
        .map(|(e, m)| Mediator::from_model(m, e.name.clone()))
        .collect();
    let records = mediation::mediation_sweep(&net, &pairs, &mediators)?;
    w.bytes("mediation/heatmap.csv", mediation::heatmap_csv(&records).as_bytes())?;
    w.json("mediation/records.json", &records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingArtifact {
    pub split: usize,
    /// Ranking by mean |IE|, random control included.
    pub ie: ConceptRanking,
    /// Ranking by TCAV sensitivity, random control included.
    pub tcav: ConceptRanking,
}

fn rank_stage(cfg: &PipelineConfig, w: &mut Writer) -> Result<()> {
    let ds = Dataset::load(&cfg.path("data"))?;
    let net = LayeredNetwork::load(&cfg.path("model"))?;
    let (index, models) = load_probes(&cfg.out_dir)?;
    let records: Vec<MediationRecord> = io::read_json(&cfg.path("mediation/records.json"))?;
    let at_split: Vec<MediationRecord> = records.into_iter().filter(|r| r.split == cfg.rank_split).collect();
    let ie = mediation::rank_concepts(&at_split);
    let class_inputs: Vec<Tensor> = ds
        .test
        .iter()
        .filter(|s| s.y == cfg.positive_class)
        .map(|s| s.x.clone())
        .collect();
    let mut tcav_scores = BTreeMap::new();
    for (e, m) in index.entries.iter().zip(&models) {
        if e.split != cfg.rank_split {
            continue;
        }
        let score = match mediation::tcav_score(&net, cfg.rank_split, m, &class_inputs, cfg.positive_class) {
            Ok(v) => v,
            // a probe with no selected units has no direction
            Err(Error::UndefinedDirection) => 0.0,
            Err(e) => return Err(e),
        };
        tcav_scores.insert(e.concept_id, (e.name.clone(), score));
    }
    let tcav = mediation::rank_by(tcav_scores.iter().map(|(id, (n, s))| (*id, n.clone(), *s)));
    let mut csv = Csv::with_header(&["rank", "concept", "score", "tcav_score"]);
    for (i, e) in ie.entries.iter().enumerate() {
        let t = tcav_scores.get(&e.concept_id).map_or(f64::NAN, |v| v.1);
        csv.row(&[(i + 1).to_string(), e.name.clone(), e.score.to_string(), t.to_string()]);
    }
    w.bytes("ranking/ranking.csv", csv.as_bytes())?;
    w.json(
        "ranking/ranking.json",
        &RankingArtifact {
            split: cfg.rank_split,
            ie,
            tcav,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSummary {
    pub split: usize,
    pub train_fidelity: Fidelity,
    pub test_fidelity: Fidelity,
    pub depth: usize,
    pub sweep: Vec<SweepPoint>,
    /// Test recall of the positive class against ground-truth labels.
    pub ground_truth_recall: Option<f64>,
}

fn surrogate_stage(cfg: &PipelineConfig, seed: u64, w: &mut Writer) -> Result<()> {
    let ds = Dataset::load(&cfg.path("data"))?;
    let net = LayeredNetwork::load(&cfg.path("model"))?;
    let (index, models) = load_probes(&cfg.out_dir)?;
    let ranking: RankingArtifact = io::read_json(&cfg.path("ranking/ranking.json"))?;
    let k_total = index.num_concepts;
    let concept_models: Vec<ConceptModel> = models
        .into_iter()
        .filter(|m| m.split == cfg.rank_split && m.concept_id < k_total)
        .collect();
    let train_fm = surrogate::build_features(&concept_models, &inputs_of(&ds.train), &net, cfg.rank_split)?;
    let test_fm = surrogate::build_features(&concept_models, &inputs_of(&ds.test), &net, cfg.rank_split)?;
    let tree = surrogate::fit_tree(&train_fm, cfg.max_depth, cfg.min_leaf)?;
    let train_fid = surrogate::fidelity(&tree, &train_fm)?;
    let test_fid = surrogate::fidelity(&tree, &test_fm)?;
    w.json("surrogate/tree.json", &tree)?;
    w.bytes("surrogate/tree.txt", tree.render(|id| concept_name(id, k_total)).as_bytes())?;

    let mut gt_hits = 0usize;
    let mut gt_pos = 0usize;
    for (row, s) in test_fm.rows.iter().zip(&ds.test) {
        if s.y == cfg.positive_class {
            gt_pos += 1;
            if tree.predict(row)? == cfg.positive_class {
                gt_hits += 1;
            }
        }
    }

    let ranked: Vec<usize> = ranking.ie.filtered(|id| id < k_total).ids();
    let causal = synth::ground_truth(&ds.config);
    let (sweep_train, sweep_test) = if cfg.sweep_distractor_noise > 0.0 {
        (
            corrupt_distractors(&train_fm, &causal, cfg.sweep_distractor_noise, seed),
            corrupt_distractors(&test_fm, &causal, cfg.sweep_distractor_noise, seed.wrapping_add(1)),
        )
    } else {
        (train_fm.clone(), test_fm.clone())
    };
    let sweep = surrogate::topk_sweep(&ranked, &cfg.fractions, &sweep_train, &sweep_test, cfg.max_depth, cfg.min_leaf, cfg.positive_class)?;
    w.bytes("surrogate/sweep.csv", surrogate::sweep_csv(&sweep).as_bytes())?;
    w.json(
        "surrogate/fidelity.json",
        &SurrogateSummary {
            split: cfg.rank_split,
            train_fidelity: train_fid,
            test_fidelity: test_fid,
            depth: tree.depth(),
            sweep,
            ground_truth_recall: (gt_pos > 0).then(|| gt_hits as f64 / gt_pos as f64),
        },
    )
}

/// Adds seeded Gaussian noise to every non-causal concept column. The noise
/// std is `scale` times that column's own std, so the corruption is unit-free.
pub fn corrupt_distractors(fm: &surrogate::FeatureMatrix, causal: &std::collections::BTreeSet<usize>, scale: f64, seed: u64) -> surrogate::FeatureMatrix {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = fm.rows.len().max(1) as f64;
    let std: Vec<f64> = (0..fm.concept_ids.len())
        .map(|j| {
            let mean = fm.rows.iter().map(|r| r[j]).sum::<f64>() / n;
            (fm.rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect();
    let mut out = fm.clone();
    for row in out.rows.iter_mut() {
        for ((v, id), sd) in row.iter_mut().zip(&fm.concept_ids).zip(&std) {
            if !causal.contains(id) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += scale * sd * z;
            }
        }
    }
    out
}

/// Unit count of a split for the configured vectorization.
pub fn unit_count_at(cfg: &PipelineConfig, s: usize) -> Result<(usize, Granularity)> {
    let arch = cfg.architecture()?;
    let shape = arch.activation_shape(s)?;
    let mode = mode_for(cfg, shape.len() == 3);
    Ok(match mode {
        Vectorization::Flatten => (shape.iter().product(), Granularity::Scalar),
        Vectorization::Maxpool => (shape[2], Granularity::Channel),
    })
}
