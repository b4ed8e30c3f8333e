//! Experiment harness: per-seed pipelines, the experiment grids and report
//! emission.
//!
//! A seed run goes through four stages (data, pretraining, golden scores,
//! predictor training). Each stage draws from its own stream forked off the
//! seed, so a run is a pure function of `(config, seed)` whether it is built
//! in memory or assembled from cached artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clipcore::{
    argmax, pretrain_contrastive, zero_shot_accuracy, ClassEmbeddings, ClipModel, PretrainConfig, PretrainLog,
    TextConfig, VisionConfig,
};
use crate::data::{
    few_shot_sample, generate_synthetic, load_dataset, patchify, save_dataset, Dataset, DatasetSplit, SplitRole,
    SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::golden::{golden_table, GoldenConfig, GoldenTable, ScoreCache};
use crate::nncore::io::write_file;
use crate::nncore::{SeededRng, Tensor};
use crate::predictor::{
    extract_features, mean_matching_rate, train_predictor, Predictor, PredictorConfig, PredictorKind,
    PredictorTrainConfig, PredictorTrainLog,
};
use crate::prompt::{project_visual_prompts, tune_prompts, PromptMode, PromptState, TuneConfig, TuneLog};
use crate::pruning::{count_flops, make_schedule, prune_infer, KeepRate, PruneInputs, PruneSchedule, Strategy};

mod tag {
    pub const DATA: u64 = 1;
    pub const MODEL_INIT: u64 = 2;
    pub const PRETRAIN: u64 = 3;
    pub const PREDICTOR_INIT: u64 = 4;
    pub const PREDICTOR_TRAIN: u64 = 5;
    pub const FEW_SHOT: u64 = 6;
    pub const TUNE: u64 = 7;
    pub const RANDOM: u64 = 8;
    pub const ARCH: u64 = 16;
    pub const CROSS: u64 = 32;
}

/// Stream for one pipeline stage; independent of every other stage.
pub fn stage_rng(seed: u64, stage: u64) -> SeededRng {
    SeededRng::new(seed).fork(stage)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSetup {
    pub arch: PredictorKind,
    pub attach_layer: usize,
    pub train: PredictorTrainConfig,
}

impl Default for PredictorSetup {
    fn default() -> Self {
        PredictorSetup {
            arch: PredictorKind::MixMlp,
            attach_layer: 2,
            train: PredictorTrainConfig::default(),
        }
    }
}

/// Everything an experiment needs; the JSON config file maps onto this.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: SyntheticConfig,
    pub vision: VisionConfig,
    pub text: TextConfig,
    pub pretrain: PretrainConfig,
    pub golden: GoldenConfig,
    pub predictor: PredictorSetup,
    pub tune: TuneConfig,
    pub keep_rates: Vec<f32>,
    /// Removal layers for the sweep, tuning and transfer experiments.
    pub locations: Vec<usize>,
    pub location_sets: Vec<Vec<usize>>,
    pub location_keep: f32,
    pub arch_keep_rates: Vec<f32>,
    pub cross_variants: Vec<usize>,
    pub cross_keep: f32,
    pub tuning_keep: f32,
    /// Matching-rate cutoff; `None` means a quarter of the tokens.
    pub match_k: Option<usize>,
    /// Wall time is written as 0 unless set, so reports stay byte-stable.
    pub record_wall_time: bool,
    pub seeds: Vec<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: SyntheticConfig::default(),
            vision: VisionConfig::default(),
            text: TextConfig::default(),
            pretrain: PretrainConfig::default(),
            golden: GoldenConfig::default(),
            predictor: PredictorSetup::default(),
            tune: TuneConfig::default(),
            keep_rates: vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.5],
            locations: vec![2, 3, 4, 5],
            location_sets: vec![vec![2, 3, 4, 5], vec![3, 4, 5, 6], vec![1, 3, 5, 6], vec![2, 4, 5, 6]],
            location_keep: 0.6,
            arch_keep_rates: vec![0.9, 0.8, 0.7, 0.6, 0.5],
            cross_variants: vec![0, 1],
            cross_keep: 0.5,
            tuning_keep: 0.6,
            match_k: None,
            record_wall_time: false,
            seeds: vec![0, 1, 2],
        }
    }
}

impl PipelineConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn num_tokens(&self) -> usize {
        self.vision.num_patches
    }

    pub fn match_k(&self) -> usize {
        self.match_k.unwrap_or(self.num_tokens() / 4).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.vision.validate()?;
        self.text.validate()?;
        self.tune.validate()?;
        let (n, layers) = (self.vision.num_patches, self.vision.layers);
        if self.data.num_tokens() != n || self.data.token_dim() != self.vision.patch_dim {
            return Err(Error::Config(format!(
                "data yields {} tokens of width {}, vision expects {} of width {}",
                self.data.num_tokens(),
                self.data.token_dim(),
                n,
                self.vision.patch_dim
            )));
        }
        for (what, layer) in [
            ("predictor attach layer", self.predictor.attach_layer),
            ("golden prune layer", self.golden.prune_layer),
        ] {
            if layer == 0 || layer > layers {
                return Err(Error::Config(format!("{what} {layer} outside 1..={layers}")));
            }
        }
        if self.keep_rates.is_empty() || self.location_sets.is_empty() || self.arch_keep_rates.is_empty() {
            return Err(Error::Config("keep-rate and location grids must be nonempty".into()));
        }
        let mut combos: Vec<(f32, &[usize])> = Vec::new();
        combos.extend(self.keep_rates.iter().map(|&k| (k, self.locations.as_slice())));
        combos.extend(self.arch_keep_rates.iter().map(|&k| (k, self.locations.as_slice())));
        combos.extend(self.location_sets.iter().map(|s| (self.location_keep, s.as_slice())));
        combos.push((self.cross_keep, &self.locations));
        combos.push((self.tuning_keep, &self.locations));
        for (keep, locs) in combos {
            let sched = make_schedule(KeepRate::new(keep)?, locs, n, Strategy::Predictor)?;
            sched.validate(layers, n).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.match_k() > n {
            return Err(Error::Config(format!("match_k {} exceeds {n} tokens", self.match_k())));
        }
        let mut variants = self.cross_variants.clone();
        variants.sort_unstable();
        variants.dedup();
        if variants.is_empty() || variants.len() != self.cross_variants.len() {
            return Err(Error::Config("cross_variants must be nonempty and distinct".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    /// Hash over the settings that shape cached artifacts.
    pub fn artifact_key(&self) -> String {
        let key = serde_json::json!({
            "data": self.data,
            "vision": self.vision,
            "text": self.text,
            "pretrain": self.pretrain,
            "golden": self.golden,
            "predictor": self.predictor,
        });
        let digest = Sha256::digest(key.to_string().as_bytes());
        hex::encode(&digest[..8])
    }
}

/// A named experiment over a list of seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub config: PipelineConfig,
    pub seeds: Vec<u64>,
}

impl ExperimentSpec {
    pub fn new(name: impl Into<String>, config: PipelineConfig) -> Self {
        let seeds = config.seeds.clone();
        ExperimentSpec {
            name: name.into(),
            config,
            seeds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config(format!("experiment '{}' has no seeds", self.name)));
        }
        self.config.validate()
    }
}

pub fn stage_data(cfg: &PipelineConfig, seed: u64) -> Result<Dataset> {
    generate_synthetic(&cfg.data, &mut stage_rng(seed, tag::DATA))
}

pub fn stage_pretrain(cfg: &PipelineConfig, seed: u64, ds: &Dataset) -> Result<(ClipModel, PretrainLog)> {
    let mut model = ClipModel::new(
        cfg.vision.clone(),
        cfg.text.clone(),
        ds.class_names(),
        &mut stage_rng(seed, tag::MODEL_INIT),
    )?;
    let log = pretrain_contrastive(
        &mut model,
        ds.split(SplitRole::Pretrain),
        &cfg.pretrain,
        &mut stage_rng(seed, tag::PRETRAIN),
    )?;
    Ok((model, log))
}

/// Golden tables for the predictor-training and test splits.
pub fn stage_golden(cfg: &PipelineConfig, model: &ClipModel, ds: &Dataset) -> Result<(GoldenTable, GoldenTable)> {
    let embs = model.encode_text(None)?;
    let train = golden_table(model, &embs, ds.split(SplitRole::PredictorTrain), &cfg.golden)?;
    let test = golden_table(model, &embs, ds.split(SplitRole::Test), &cfg.golden)?;
    Ok((train, test))
}

pub fn stage_predictor(
    cfg: &PipelineConfig,
    seed: u64,
    arch: PredictorKind,
    model: &ClipModel,
    split: &DatasetSplit,
    golden_train: &GoldenTable,
) -> Result<(Predictor, PredictorTrainLog)> {
    let (init, train) = if arch == cfg.predictor.arch {
        (tag::PREDICTOR_INIT, tag::PREDICTOR_TRAIN)
    } else {
        let a = tag::ARCH + 2 * PredictorKind::ALL.iter().position(|&k| k == arch).unwrap_or(0) as u64;
        (a, a + 1)
    };
    let pc = PredictorConfig::for_model(model, arch, cfg.predictor.attach_layer);
    let mut predictor = Predictor::new(pc, &mut stage_rng(seed, init))?;
    let log = train_predictor(
        model,
        split,
        golden_train,
        &mut predictor,
        &cfg.predictor.train,
        &mut stage_rng(seed, train),
    )?;
    Ok((predictor, log))
}

/// Test-split matching rate of `predictor` against `golden_test`.
pub fn predictor_matching_rate(
    model: &ClipModel,
    predictor: &Predictor,
    test: &DatasetSplit,
    golden_test: &GoldenTable,
    k: usize,
) -> Result<f32> {
    let features = extract_features(model, test, predictor.config.attach_layer)?;
    mean_matching_rate(predictor, &features, golden_test, k)
}

/// Every artifact of one seed, ready for evaluation.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub dataset: Dataset,
    pub model: ClipModel,
    pub embs: ClassEmbeddings,
    pub golden_train: GoldenTable,
    pub golden_test: GoldenTable,
    pub predictor: Predictor,
    pub zero_shot: f32,
    pub predictor_mr: f32,
}

impl SeedRun {
    /// Runs all stages in memory.
    pub fn build(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let dataset = stage_data(cfg, seed)?;
        let (model, _) = stage_pretrain(cfg, seed, &dataset)?;
        let (golden_train, golden_test) = stage_golden(cfg, &model, &dataset)?;
        let (predictor, _) = stage_predictor(
            cfg,
            seed,
            cfg.predictor.arch,
            &model,
            dataset.split(SplitRole::PredictorTrain),
            &golden_train,
        )?;
        Self::assemble(cfg, seed, dataset, model, golden_train, golden_test, predictor)
    }

    fn assemble(
        cfg: &PipelineConfig,
        seed: u64,
        dataset: Dataset,
        model: ClipModel,
        golden_train: GoldenTable,
        golden_test: GoldenTable,
        predictor: Predictor,
    ) -> Result<Self> {
        let embs = model.encode_text(None)?;
        let test = dataset.split(SplitRole::Test);
        let zero_shot = zero_shot_accuracy(&model, test)?;
        let predictor_mr = predictor_matching_rate(&model, &predictor, test, &golden_test, cfg.match_k())?;
        Ok(SeedRun {
            seed,
            dataset,
            model,
            embs,
            golden_train,
            golden_test,
            predictor,
            zero_shot,
            predictor_mr,
        })
    }

    pub fn test(&self) -> &DatasetSplit {
        self.dataset.split(SplitRole::Test)
    }
}

/// Builds every seed of `spec` in memory.
pub fn build_runs(spec: &ExperimentSpec) -> Result<Vec<SeedRun>> {
    spec.validate()?;
    spec.seeds.iter().map(|&s| SeedRun::build(&spec.config, s)).collect()
}

fn needs(stage: &str, e: Error) -> Error {
    match e {
        Error::MissingArtifact(m) => Error::MissingArtifact(format!("{m}; run `{stage}` first")),
        e => e,
    }
}

/// Stage artifacts under `{root}/{artifact key}/seed{seed}/`.
#[derive(Clone, Debug)]
pub struct ArtifactStore {
    root: PathBuf,
}

impl ArtifactStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ArtifactStore { root: root.into() }
    }

    pub fn run_dir(&self, cfg: &PipelineConfig, seed: u64) -> PathBuf {
        self.root.join(cfg.artifact_key()).join(format!("seed{seed}"))
    }

    fn golden_cache(&self, cfg: &PipelineConfig, seed: u64) -> ScoreCache {
        ScoreCache::new(self.run_dir(cfg, seed).join("golden"))
    }

    pub fn gen_data(&self, cfg: &PipelineConfig, seed: u64) -> Result<Dataset> {
        let ds = stage_data(cfg, seed)?;
        save_dataset(&self.run_dir(cfg, seed).join("data"), &ds)?;
        Ok(ds)
    }

    pub fn load_data(&self, cfg: &PipelineConfig, seed: u64) -> Result<Dataset> {
        load_dataset(&self.run_dir(cfg, seed).join("data")).map_err(|e| needs("gen-data", e))
    }

    pub fn pretrain(&self, cfg: &PipelineConfig, seed: u64) -> Result<(ClipModel, PretrainLog)> {
        let ds = self.load_data(cfg, seed)?;
        let (model, log) = stage_pretrain(cfg, seed, &ds)?;
        model.save(&self.run_dir(cfg, seed).join("model"))?;
        Ok((model, log))
    }

    pub fn load_model(&self, cfg: &PipelineConfig, seed: u64) -> Result<ClipModel> {
        ClipModel::load(&self.run_dir(cfg, seed).join("model")).map_err(|e| needs("pretrain", e))
    }

    pub fn golden(&self, cfg: &PipelineConfig, seed: u64) -> Result<(GoldenTable, GoldenTable)> {
        let ds = self.load_data(cfg, seed)?;
        let model = self.load_model(cfg, seed)?;
        let (train, test) = stage_golden(cfg, &model, &ds)?;
        let cache = self.golden_cache(cfg, seed);
        cache.store_table(SplitRole::PredictorTrain.as_str(), &train)?;
        cache.store_table(SplitRole::Test.as_str(), &test)?;
        Ok((train, test))
    }

    pub fn load_golden(&self, cfg: &PipelineConfig, seed: u64, ds: &Dataset) -> Result<(GoldenTable, GoldenTable)> {
        let cache = self.golden_cache(cfg, seed);
        let load = |role: SplitRole| {
            cache
                .load_table(role.as_str(), ds.split(role).len(), &cfg.golden)
                .map_err(|e| needs("golden", e))
        };
        Ok((load(SplitRole::PredictorTrain)?, load(SplitRole::Test)?))
    }

    pub fn train_predictor(&self, cfg: &PipelineConfig, seed: u64) -> Result<(Predictor, PredictorTrainLog)> {
        let ds = self.load_data(cfg, seed)?;
        let model = self.load_model(cfg, seed)?;
        let (train, _) = self.load_golden(cfg, seed, &ds)?;
        let split = ds.split(SplitRole::PredictorTrain);
        let (p, log) = stage_predictor(cfg, seed, cfg.predictor.arch, &model, split, &train)?;
        p.save(&self.run_dir(cfg, seed).join("predictor"), cfg.golden.kind, ds.config.grid_side)?;
        Ok((p, log))
    }

    /// Assembles a [`SeedRun`] from cached stages; a missing stage is
    /// reported together with the subcommand that produces it.
    pub fn load_run(&self, cfg: &PipelineConfig, seed: u64) -> Result<SeedRun> {
        let ds = self.load_data(cfg, seed)?;
        let model = self.load_model(cfg, seed)?;
        let (train, test) = self.load_golden(cfg, seed, &ds)?;
        let (predictor, _) =
            Predictor::load(&self.run_dir(cfg, seed).join("predictor")).map_err(|e| needs("train-predictor", e))?;
        SeedRun::assemble(cfg, seed, ds, model, train, test, predictor)
    }

    /// Like [`ArtifactStore::load_run`], running whichever stages are missing.
    pub fn ensure_run(&self, cfg: &PipelineConfig, seed: u64) -> Result<SeedRun> {
        fn missing<T>(r: Result<T>) -> Result<bool> {
            match r {
                Ok(_) => Ok(false),
                Err(Error::MissingArtifact(_)) => Ok(true),
                Err(e) => Err(e),
            }
        }
        if missing(self.load_data(cfg, seed))? {
            self.gen_data(cfg, seed)?;
        }
        if missing(self.load_model(cfg, seed))? {
            self.pretrain(cfg, seed)?;
        }
        let ds = self.load_data(cfg, seed)?;
        if missing(self.load_golden(cfg, seed, &ds))? {
            self.golden(cfg, seed)?;
        }
        if missing(Predictor::load(&self.run_dir(cfg, seed).join("predictor")))? {
            self.train_predictor(cfg, seed)?;
        }
        self.load_run(cfg, seed)
    }

    pub fn load_runs(&self, spec: &ExperimentSpec) -> Result<Vec<SeedRun>> {
        spec.validate()?;
        spec.seeds.iter().map(|&s| self.load_run(&spec.config, s)).collect()
    }

    pub fn save_prompts(&self, cfg: &PipelineConfig, seed: u64, mode: PromptMode, state: &PromptState) -> Result<PathBuf> {
        let dir = self.run_dir(cfg, seed).join(format!("prompts_{mode}"));
        let schedule = tuning_schedule(cfg)?;
        state.save(&dir, mode, cfg.tune.shots, &schedule)?;
        Ok(dir)
    }
}

/// What one evaluation needs besides the schedule.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub model: &'a ClipModel,
    pub embs: &'a ClassEmbeddings,
    pub split: &'a DatasetSplit,
    pub predictor: Option<&'a Predictor>,
    pub golden: Option<&'a GoldenTable>,
    pub prompts_v: Option<&'a Tensor>,
    /// Seeds the per-image streams of the random strategy.
    pub seed: u64,
}

impl<'a> EvalContext<'a> {
    pub fn for_run(run: &'a SeedRun) -> Self {
        EvalContext {
            model: &run.model,
            embs: &run.embs,
            split: run.test(),
            predictor: Some(&run.predictor),
            golden: Some(&run.golden_test),
            prompts_v: None,
            seed: run.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Percent in `[0, 100]`.
    pub accuracy: f32,
    pub mean_true_prob: f32,
    pub total_macs: u64,
    pub relative_macs: f64,
}

/// Pruned accuracy over the split, images in parallel.
pub fn evaluate(ctx: &EvalContext, schedule: &PruneSchedule) -> Result<Evaluation> {
    if ctx.split.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let per_image: Vec<(bool, f32)> = ctx
        .split
        .examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let grid = patchify(ex, ctx.split.patch_size)?;
            let mut rng = SeededRng::new(ctx.seed).fork(tag::RANDOM.wrapping_add((i as u64 + 1) << 8));
            let mut inputs = PruneInputs::new(ctx.embs);
            inputs.predictor = ctx.predictor;
            inputs.golden = match ctx.golden {
                Some(t) if schedule.strategy == Strategy::GoldenOracle => Some(t.get(i)?),
                _ => None,
            };
            inputs.rng = Some(&mut rng);
            inputs.prompts_v = ctx.prompts_v;
            let out = prune_infer(ctx.model, &grid, schedule, &mut inputs)?;
            let p = out.probs.data();
            Ok((argmax(p) == ex.label, p[ex.label]))
        })
        .collect::<Result<_>>()?;
    let n = per_image.len() as f64;
    let correct = per_image.iter().filter(|(c, _)| *c).count() as f64;
    let prob: f64 = per_image.iter().map(|&(_, p)| p as f64).sum();
    let flops = count_flops(
        &ctx.model.vision_config,
        schedule,
        ctx.prompts_v.map(|p| p.rows()).unwrap_or(0),
    );
    Ok(Evaluation {
        accuracy: (100.0 * correct / n) as f32,
        mean_true_prob: (prob / n) as f32,
        total_macs: flops.total_macs,
        relative_macs: flops.relative_to_unpruned,
    })
}

/// One line of a result table. Field order is the column order of the CSV
/// files (see [`COLUMNS`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub grid_id: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub keep_rate: f32,
    /// Removal layers joined with `-`; empty when nothing is pruned.
    pub locations: String,
    pub arch: Option<PredictorKind>,
    /// `none`, `t_only` or `t_and_v`.
    pub tuning: String,
    pub train_variant: Option<usize>,
    pub test_variant: Option<usize>,
    pub accuracy: f32,
    pub mean_true_prob: f32,
    pub matching_rate: Option<f32>,
    pub match_k: Option<usize>,
    pub total_macs: u64,
    pub relative_macs: f64,
    pub wall_time_s: f64,
}

pub const COLUMNS: [&str; 17] = [
    "experiment",
    "grid_id",
    "seed",
    "strategy",
    "keep_rate",
    "locations",
    "arch",
    "tuning",
    "train_variant",
    "test_variant",
    "accuracy",
    "mean_true_prob",
    "matching_rate",
    "match_k",
    "total_macs",
    "relative_macs",
    "wall_time_s",
];

fn join_locations(schedule: &PruneSchedule) -> String {
    schedule
        .entries
        .iter()
        .map(|e| e.layer.to_string())
        .collect::<Vec<_>>()
        .join("-")
}

impl ResultRow {
    fn new(experiment: &str, grid_id: String, seed: u64, keep: f32, schedule: &PruneSchedule, ev: Evaluation) -> Self {
        ResultRow {
            experiment: experiment.to_string(),
            grid_id,
            seed,
            strategy: schedule.strategy,
            keep_rate: keep,
            locations: join_locations(schedule),
            arch: None,
            tuning: "none".into(),
            train_variant: None,
            test_variant: None,
            accuracy: ev.accuracy,
            mean_true_prob: ev.mean_true_prob,
            matching_rate: None,
            match_k: None,
            total_macs: ev.total_macs,
            relative_macs: ev.relative_macs,
            wall_time_s: 0.0,
        }
    }

    fn timed(mut self, cfg: &PipelineConfig, start: Instant) -> Self {
        if cfg.record_wall_time {
            self.wall_time_s = start.elapsed().as_secs_f64();
        }
        self
    }

    /// Plot series: every identifying field except keep rate and seed.
    pub fn series(&self) -> String {
        let mut parts = vec![self.strategy.to_string()];
        if let Some(a) = self.arch {
            parts.push(a.to_string());
        }
        if self.experiment == "locations" {
            parts.push(format!("at{}", self.locations));
        }
        if self.tuning != "none" {
            parts.push(self.tuning.clone());
        }
        if let (Some(a), Some(b)) = (self.train_variant, self.test_variant) {
            parts.push(format!("v{a}->v{b}"));
        }
        parts.join("/")
    }
}

fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| a.grid_id.cmp(&b.grid_id).then(a.seed.cmp(&b.seed)));
}

fn schedule(cfg: &PipelineConfig, keep: f32, locations: &[usize], strategy: Strategy) -> Result<PruneSchedule> {
    make_schedule(KeepRate::new(keep)?, locations, cfg.num_tokens(), strategy)
}

/// Every strategy at every sweep keep rate.
pub fn run_keep_rate_sweep(cfg: &PipelineConfig, runs: &[SeedRun]) -> Result<Vec<ResultRow>> {
    let points: Vec<(&SeedRun, f32, Strategy)> = runs
        .iter()
        .flat_map(|r| {
            cfg.keep_rates
                .iter()
                .flat_map(move |&k| Strategy::ALL.into_iter().map(move |s| (r, k, s)))
        })
        .collect();
    let mut rows = points
        .par_iter()
        .map(|&(run, keep, strategy)| {
            let start = Instant::now();
            let sched = schedule(cfg, keep, &cfg.locations, strategy)?;
            let ev = evaluate(&EvalContext::for_run(run), &sched)?;
            let mut row = ResultRow::new("sweep", format!("sweep/{strategy}/keep{keep:.2}"), run.seed, keep, &sched, ev);
            if strategy == Strategy::Predictor {
                row.matching_rate = Some(run.predictor_mr);
                row.match_k = Some(cfg.match_k());
            }
            Ok(row.timed(cfg, start))
        })
        .collect::<Result<Vec<_>>>()?;
    sort_rows(&mut rows);
    Ok(rows)
}

/// Predictor pruning at the fixed location keep rate for every location set.
pub fn run_location_ablation(cfg: &PipelineConfig, runs: &[SeedRun]) -> Result<Vec<ResultRow>> {
    let points: Vec<(&SeedRun, &Vec<usize>)> = runs
        .iter()
        .flat_map(|r| cfg.location_sets.iter().map(move |l| (r, l)))
        .collect();
    let keep = cfg.location_keep;
    let mut rows = points
        .par_iter()
        .map(|&(run, locs)| {
            let start = Instant::now();
            let sched = schedule(cfg, keep, locs, Strategy::Predictor)?;
            let ev = evaluate(&EvalContext::for_run(run), &sched)?;
            let id = format!("locations/{}", join_locations(&sched));
            let mut row = ResultRow::new("locations", id, run.seed, keep, &sched, ev);
            row.matching_rate = Some(run.predictor_mr);
            row.match_k = Some(cfg.match_k());
            Ok(row.timed(cfg, start))
        })
        .collect::<Result<Vec<_>>>()?;
    sort_rows(&mut rows);
    Ok(rows)
}

/// Trains each predictor architecture on the same golden tables and prunes
/// with it at every ablation keep rate.
pub fn run_arch_ablation(cfg: &PipelineConfig, runs: &[SeedRun]) -> Result<Vec<ResultRow>> {
    let jobs: Vec<(&SeedRun, PredictorKind)> = runs
        .iter()
        .flat_map(|r| PredictorKind::ALL.into_iter().map(move |a| (r, a)))
        .collect();
    let trained = jobs
        .par_iter()
        .map(|&(run, arch)| {
            let start = Instant::now();
            let split = run.dataset.split(SplitRole::PredictorTrain);
            let (p, _) = stage_predictor(cfg, run.seed, arch, &run.model, split, &run.golden_train)?;
            let mr = predictor_matching_rate(&run.model, &p, run.test(), &run.golden_test, cfg.match_k())?;
            Ok((run, arch, p, mr, start.elapsed().as_secs_f64()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (run, arch, p, mr, train_time) in &trained {
        let part = cfg
            .arch_keep_rates
            .par_iter()
            .map(|&keep| {
                let start = Instant::now();
                let sched = schedule(cfg, keep, &cfg.locations, Strategy::Predictor)?;
                let ctx = EvalContext {
                    predictor: Some(p),
                    ..EvalContext::for_run(run)
                };
                let ev = evaluate(&ctx, &sched)?;
                let mut row = ResultRow::new("arch", format!("arch/{arch}/keep{keep:.2}"), run.seed, keep, &sched, ev);
                row.arch = Some(*arch);
                row.matching_rate = Some(*mr);
                row.match_k = Some(cfg.match_k());
                let mut row = row.timed(cfg, start);
                if cfg.record_wall_time {
                    row.wall_time_s += train_time;
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(part);
    }
    sort_rows(&mut rows);
    Ok(rows)
}

/// One model pretrained on the union of the variants' classes.
struct CrossWorld {
    model: ClipModel,
    variants: Vec<CrossVariant>,
}

struct CrossVariant {
    id: usize,
    dataset: Dataset,
    embs: ClassEmbeddings,
    predictor: Predictor,
    golden_test: GoldenTable,
}

fn subset_embeddings(all: &ClassEmbeddings, start: usize, count: usize) -> ClassEmbeddings {
    let rows: Vec<usize> = (start..start + count).collect();
    ClassEmbeddings {
        e: all.e.gather_rows(&rows),
        logit_scale: all.logit_scale,
    }
}

fn build_cross_world(cfg: &PipelineConfig, seed: u64) -> Result<CrossWorld> {
    let datasets = cfg
        .cross_variants
        .iter()
        .map(|&v| {
            let data = SyntheticConfig {
                variant: v,
                ..cfg.data.clone()
            };
            generate_synthetic(&data, &mut stage_rng(seed, tag::CROSS + 8 * v as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let c = cfg.data.num_classes;
    let mut union = datasets[0].split(SplitRole::Pretrain).truncated(0);
    union.class_names.clear();
    for (j, ds) in datasets.iter().enumerate() {
        let split = ds.split(SplitRole::Pretrain);
        union.class_names.extend(split.class_names.iter().cloned());
        union.examples.extend(split.examples.iter().map(|ex| {
            let mut ex = ex.clone();
            ex.label += j * c;
            ex
        }));
    }
    let mut model = ClipModel::new(
        cfg.vision.clone(),
        cfg.text.clone(),
        union.class_names.clone(),
        &mut stage_rng(seed, tag::CROSS + 1),
    )?;
    pretrain_contrastive(&mut model, &union, &cfg.pretrain, &mut stage_rng(seed, tag::CROSS + 2))?;
    let all = model.encode_text(None)?;
    let mut variants = Vec::with_capacity(datasets.len());
    for (j, dataset) in datasets.into_iter().enumerate() {
        let v = cfg.cross_variants[j];
        let embs = subset_embeddings(&all, j * c, c);
        let train_split = dataset.split(SplitRole::PredictorTrain);
        let golden_train = golden_table(&model, &embs, train_split, &cfg.golden)?;
        let golden_test = golden_table(&model, &embs, dataset.split(SplitRole::Test), &cfg.golden)?;
        let pc = PredictorConfig::for_model(&model, cfg.predictor.arch, cfg.predictor.attach_layer);
        let vt = tag::CROSS + 8 * v as u64;
        let mut predictor = Predictor::new(pc, &mut stage_rng(seed, vt + 3))?;
        train_predictor(
            &model,
            train_split,
            &golden_train,
            &mut predictor,
            &cfg.predictor.train,
            &mut stage_rng(seed, vt + 4),
        )?;
        variants.push(CrossVariant {
            id: v,
            dataset,
            embs,
            predictor,
            golden_test,
        });
    }
    Ok(CrossWorld { model, variants })
}

/// Transfer matrix: a predictor trained on each variant prunes every
/// variant's test split at the transfer keep rate.
pub fn run_cross_dataset(cfg: &PipelineConfig, seeds: &[u64]) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let world = build_cross_world(cfg, seed)?;
        let sched = schedule(cfg, cfg.cross_keep, &cfg.locations, Strategy::Predictor)?;
        let pairs: Vec<(&CrossVariant, &CrossVariant)> = world
            .variants
            .iter()
            .flat_map(|a| world.variants.iter().map(move |b| (a, b)))
            .collect();
        let part = pairs
            .par_iter()
            .map(|&(train, test)| {
                let start = Instant::now();
                let split = test.dataset.split(SplitRole::Test);
                let ctx = EvalContext {
                    model: &world.model,
                    embs: &test.embs,
                    split,
                    predictor: Some(&train.predictor),
                    golden: None,
                    prompts_v: None,
                    seed,
                };
                let ev = evaluate(&ctx, &sched)?;
                let mr =
                    predictor_matching_rate(&world.model, &train.predictor, split, &test.golden_test, cfg.match_k())?;
                let id = format!("cross/train{}/test{}", train.id, test.id);
                let mut row = ResultRow::new("cross", id, seed, cfg.cross_keep, &sched, ev);
                row.train_variant = Some(train.id);
                row.test_variant = Some(test.id);
                row.matching_rate = Some(mr);
                row.match_k = Some(cfg.match_k());
                Ok(row.timed(cfg, start))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(part);
    }
    sort_rows(&mut rows);
    Ok(rows)
}

/// The pruning schedule prompts are tuned against.
pub fn tuning_schedule(cfg: &PipelineConfig) -> Result<PruneSchedule> {
    schedule(cfg, cfg.tuning_keep, &cfg.locations, Strategy::Predictor)
}

/// Few-shot prompt tuning for one run; both modes see the same shots and
/// the same stream.
pub fn tune_run(cfg: &PipelineConfig, run: &SeedRun, mode: PromptMode) -> Result<(PromptState, TuneLog)> {
    let shots = few_shot_sample(
        run.dataset.split(SplitRole::TuneTrain),
        cfg.tune.shots,
        &mut stage_rng(run.seed, tag::FEW_SHOT),
    )?;
    let tc = TuneConfig {
        mode,
        ..cfg.tune.clone()
    };
    tune_prompts(
        &run.model,
        Some(&run.predictor),
        &tuning_schedule(cfg)?,
        &shots,
        None,
        &tc,
        &mut stage_rng(run.seed, tag::TUNE),
    )
}

/// Pruned and unpruned evaluation of one run under the given prompts.
pub fn evaluate_prompted(
    cfg: &PipelineConfig,
    run: &SeedRun,
    prompts: Option<(&PromptState, PromptMode)>,
    pruned: bool,
) -> Result<Evaluation> {
    let embs = match prompts {
        Some((s, _)) => run.model.encode_text(Some(&s.p_t))?,
        None => run.embs.clone(),
    };
    let p_v = match prompts {
        Some((s, PromptMode::TAndV)) if s.b() > 0 => Some(project_visual_prompts(s)?),
        _ => None,
    };
    let sched = if pruned {
        tuning_schedule(cfg)?
    } else {
        PruneSchedule::empty(Strategy::Predictor)
    };
    let ctx = EvalContext {
        embs: &embs,
        prompts_v: p_v.as_ref(),
        ..EvalContext::for_run(run)
    };
    evaluate(&ctx, &sched)
}

/// `{none, t_only, t_and_v} x {pruned, unpruned}` at the tuning keep rate.
pub fn run_tuning_grid(cfg: &PipelineConfig, runs: &[SeedRun]) -> Result<Vec<ResultRow>> {
    let modes = [PromptMode::TOnly, PromptMode::TAndV];
    let jobs: Vec<(&SeedRun, PromptMode)> = runs
        .iter()
        .flat_map(|r| modes.into_iter().map(move |m| (r, m)))
        .collect();
    let tuned = jobs
        .par_iter()
        .map(|&(run, mode)| {
            let start = Instant::now();
            let (state, _) = tune_run(cfg, run, mode)?;
            Ok((run.seed, mode, state, start.elapsed().as_secs_f64()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cells: Vec<(&SeedRun, Option<usize>, bool)> = Vec::new();
    for run in runs {
        for pruned in [true, false] {
            cells.push((run, None, pruned));
            for (i, t) in tuned.iter().enumerate() {
                if t.0 == run.seed {
                    cells.push((run, Some(i), pruned));
                }
            }
        }
    }
    let mut rows = cells
        .par_iter()
        .map(|&(run, which, pruned)| {
            let start = Instant::now();
            let prompts = which.map(|i| (&tuned[i].2, tuned[i].1));
            let ev = evaluate_prompted(cfg, run, prompts, pruned)?;
            let tuning = prompts.map(|(_, m)| m.to_string()).unwrap_or_else(|| "none".into());
            let (keep, sched) = if pruned {
                (cfg.tuning_keep, tuning_schedule(cfg)?)
            } else {
                (1.0, PruneSchedule::empty(Strategy::Predictor))
            };
            let state = if pruned { "pruned" } else { "unpruned" };
            let mut row = ResultRow::new("tuning", format!("tuning/{tuning}/{state}"), run.seed, keep, &sched, ev);
            row.tuning = tuning;
            let mut row = row.timed(cfg, start);
            if cfg.record_wall_time {
                row.wall_time_s += which.map(|i| tuned[i].3).unwrap_or(0.0);
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    sort_rows(&mut rows);
    Ok(rows)
}

/// Per-grid-point aggregate over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub grid_id: String,
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub accuracy_mean: f32,
    pub accuracy_min: f32,
    pub accuracy_max: f32,
    pub mean_true_prob: f32,
    pub matching_rate_mean: Option<f32>,
    pub total_macs: u64,
    pub relative_macs: f64,
}

pub fn summarize(rows: &[ResultRow]) -> Vec<GridSummary> {
    let mut groups: BTreeMap<&str, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(&r.grid_id).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(id, rs)| {
            let n = rs.len() as f64;
            let mean = |f: &dyn Fn(&ResultRow) -> f32| (rs.iter().map(|r| f(r) as f64).sum::<f64>() / n) as f32;
            let mrs: Vec<f32> = rs.iter().filter_map(|r| r.matching_rate).collect();
            let mut seeds: Vec<u64> = rs.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            GridSummary {
                grid_id: id.to_string(),
                experiment: rs[0].experiment.clone(),
                seeds,
                accuracy_mean: mean(&|r| r.accuracy),
                accuracy_min: rs.iter().map(|r| r.accuracy).fold(f32::INFINITY, f32::min),
                accuracy_max: rs.iter().map(|r| r.accuracy).fold(f32::NEG_INFINITY, f32::max),
                mean_true_prob: mean(&|r| r.mean_true_prob),
                matching_rate_mean: (!mrs.is_empty())
                    .then(|| (mrs.iter().map(|&m| m as f64).sum::<f64>() / mrs.len() as f64) as f32),
                total_macs: rs[0].total_macs,
                relative_macs: rs[0].relative_macs,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub series: String,
    pub keep_rate: f32,
    pub accuracy: f32,
    pub mean_true_prob: f32,
}

/// Seed-averaged accuracy per `(series, keep rate)`.
pub fn plot_points(rows: &[ResultRow]) -> Vec<PlotPoint> {
    let mut groups: BTreeMap<(String, i64), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.series(), -(r.keep_rate as f64 * 1e4).round() as i64);
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((series, _), rs)| {
            let n = rs.len() as f64;
            PlotPoint {
                series,
                keep_rate: rs[0].keep_rate,
                accuracy: (rs.iter().map(|r| r.accuracy as f64).sum::<f64>() / n) as f32,
                mean_true_prob: (rs.iter().map(|r| r.mean_true_prob as f64).sum::<f64>() / n) as f32,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub rows: PathBuf,
    pub summary: PathBuf,
    pub plot: PathBuf,
}

fn csv_bytes<T: Serialize>(header: &[&str], items: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let wrap = |e: csv::Error| Error::Logic(format!("csv encoding: {e}"));
    w.write_record(header).map_err(wrap)?;
    for item in items {
        w.serialize(item).map_err(wrap)?;
    }
    w.into_inner().map_err(|e| Error::Logic(format!("csv encoding: {e}")))
}

/// Writes `{name}.csv` (rows sorted by grid id then seed),
/// `{name}_summary.json` and `{name}_plot.csv` into `dir`.
pub fn emit_report(rows: &[ResultRow], dir: &Path, name: &str) -> Result<ReportFiles> {
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    let files = ReportFiles {
        rows: dir.join(format!("{name}.csv")),
        summary: dir.join(format!("{name}_summary.json")),
        plot: dir.join(format!("{name}_plot.csv")),
    };
    write_file(&files.rows, &csv_bytes(&COLUMNS, &sorted)?)?;
    let mut summary = serde_json::to_string_pretty(&summarize(&sorted)).expect("summary serializes");
    summary.push('\n');
    write_file(&files.summary, summary.as_bytes())?;
    let plot = plot_points(&sorted);
    write_file(
        &files.plot,
        &csv_bytes(&["series", "keep_rate", "accuracy", "mean_true_prob"], &plot)?,
    )?;
    Ok(files)
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("result table {}", path.display())));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let header = r.headers().map_err(|e| Error::parse(path, e.to_string()))?;
    if header.iter().ne(COLUMNS.iter().copied()) {
        return Err(Error::parse(path, format!("unexpected columns {header:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::parse(path, e.to_string())))
        .collect()
}
