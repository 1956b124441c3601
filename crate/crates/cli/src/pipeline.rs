//! Stage execution, artifact layout and the run manifest.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest.json
//! data/dataset.bin  data/split.json
//! models/target/<arch_id>-<seed>.ckpt (+ .json sidecar)
//! models/shadow/<arch_id>-<seed>.ckpt (+ .json sidecar)
//! fabricated/<tag>.bin  fabricated/<tag>.csv
//! outcomes/<protocol>/<name>.csv (+ .json manifest)
//! report/...
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use memfab::data::{read_archive, write_archive};
use memfab::defense::{calibrate_lambda, DetectorRule, RobustWeightConfig};
use memfab::fabrication::{fabricate_all, save_fabricated, FabricationConfig};
use memfab::games::{
    config_hash, reweight, run_mi_game, save_outcome, score_armia_game, score_mfa_game, score_mfd_game, EvalSet,
    FabricatedSet, GameOutcome, References,
};
use memfab::geometry::{fit_feature_stats, lid_score, mahalanobis_score, LID_K, PENULTIMATE};
use memfab::metrics::summarize;
use memfab::split::make_membership_splits;
use memfab::train::{accuracy, shadow_seed, train_classifier};
use memfab::{Classifier, Dataset, LabeledExample, MembershipSplit, ShadowEnsemble, SplitConfig, TrainConfig};

use crate::config::{fabrication_tag, ExperimentConfig, StageSeeds};

pub const STAGES: [&str; 6] = ["train", "fabricate", "audit", "detect", "robust", "report"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub key: String,
    pub artifacts: Vec<PathBuf>,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seeds: StageSeeds,
    pub toolkit_version: String,
    pub stages: BTreeMap<String, StageRecord>,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, serde_json::Value>,
}

/// Everything a stage needs to locate and validate its inputs and outputs.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub manifest: RunManifest,
}

fn hash_of<T: Serialize>(v: &T) -> String {
    config_hash(&serde_json::to_value(v).expect("config serializes"))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(anyhow!("missing prerequisite artifact {}", path.display()))
    }
}

impl Run {
    pub fn open(cfg: ExperimentConfig, out: PathBuf) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join("manifest.json");
        let fresh = RunManifest {
            // The output location is not part of the experiment's identity.
            config_hash: hash_of(&ExperimentConfig { out: PathBuf::new(), ..cfg.clone() }),
            seeds: cfg.seeds(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            stages: BTreeMap::new(),
            metrics: BTreeMap::new(),
            notes: BTreeMap::new(),
        };
        let manifest = match std::fs::read_to_string(&path) {
            Ok(text) => {
                let old: RunManifest = serde_json::from_str(&text).context("reading run manifest")?;
                RunManifest { stages: old.stages, metrics: old.metrics, notes: old.notes, ..fresh }
            }
            Err(_) => fresh,
        };
        Ok(Self { cfg, out, manifest })
    }

    pub fn save_manifest(&self) -> Result<()> {
        std::fs::write(self.out.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }

    fn rel(&self, p: &Path) -> PathBuf {
        p.strip_prefix(&self.out).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
    }

    /// Hash of the config sections a stage depends on, chained with its upstream keys.
    pub fn stage_key(&self, stage: &str) -> String {
        let c = &self.cfg;
        let upstream = |s: &str| self.stage_key(s);
        match stage {
            "train" => hash_of(&json!({"dataset": c.dataset, "split": c.split, "model": c.model, "train": c.train, "seed": c.seed})),
            "fabricate" => hash_of(&json!({
                "up": upstream("train"), "grid": c.fabrication_grid(), "kinds": c.audit.kinds,
                "gamma": c.audit.gamma, "population": c.audit.population,
            })),
            "audit" => hash_of(&json!({"up": upstream("train"), "audit": c.audit})),
            "detect" => hash_of(&json!({"up": upstream("fabricate"), "detect": c.detect})),
            "robust" => hash_of(&json!({
                "up": upstream("fabricate"), "robust": c.robust, "kinds": c.robust_kinds(), "detect": c.detect,
                "gamma": c.audit.gamma, "population": c.audit.population,
            })),
            "report" => hash_of(&json!({
                "up": [upstream("fabricate"), upstream("audit"), upstream("detect"), upstream("robust")],
            })),
            _ => unreachable!("unknown stage {stage}"),
        }
    }

    /// True when the stage already ran with the same key and its artifacts exist.
    pub fn is_cached(&self, stage: &str) -> bool {
        match self.manifest.stages.get(stage) {
            Some(r) => r.key == self.stage_key(stage) && r.artifacts.iter().all(|p| self.out.join(p).exists()),
            None => false,
        }
    }

    fn mark_hit(&mut self, stage: &str) {
        if let Some(r) = self.manifest.stages.get_mut(stage) {
            r.cache_hit = true;
        }
    }

    fn record(&mut self, stage: &str, artifacts: Vec<PathBuf>) {
        let artifacts = artifacts.iter().map(|p| self.rel(p)).collect();
        self.manifest.stages.insert(stage.to_string(), StageRecord { key: self.stage_key(stage), artifacts, cache_hit: false });
    }

    fn dataset_path(&self) -> PathBuf {
        self.out.join("data/dataset.bin")
    }

    fn split_path(&self) -> PathBuf {
        self.out.join("data/split.json")
    }

    fn target_seed(&self) -> u64 {
        self.manifest.seeds.target
    }

    fn shadow_seeds(&self) -> Vec<u64> {
        (0..self.cfg.split.n_shadow).map(|i| shadow_seed(self.manifest.seeds.shadow, i)).collect()
    }

    pub fn target_path(&self) -> PathBuf {
        self.out.join(format!("models/target/{}-{}.ckpt", self.cfg.model.id(), self.target_seed()))
    }

    pub fn shadow_paths(&self) -> Vec<PathBuf> {
        self.shadow_seeds()
            .iter()
            .map(|s| self.out.join(format!("models/shadow/{}-{}.ckpt", self.cfg.model.id(), s)))
            .collect()
    }

    pub fn fabricated_paths(&self, c: &FabricationConfig) -> (PathBuf, PathBuf) {
        let tag = fabrication_tag(c);
        (self.out.join(format!("fabricated/{tag}.bin")), self.out.join(format!("fabricated/{tag}.csv")))
    }

    fn outcome_paths(&self, protocol: &str, name: &str) -> (PathBuf, PathBuf) {
        let dir = self.out.join("outcomes").join(protocol);
        (dir.join(format!("{name}.csv")), dir.join(format!("{name}.json")))
    }

    // Loading helpers shared by the downstream stages.

    fn load_data(&self) -> Result<(Dataset, MembershipSplit)> {
        require(&self.dataset_path())?;
        require(&self.split_path())?;
        let ds = Dataset::load_archive(&self.dataset_path())?;
        let split = MembershipSplit::load(&self.split_path())?;
        Ok((ds, split))
    }

    fn load_target(&self) -> Result<Classifier> {
        let p = self.target_path();
        require(&p)?;
        Ok(Classifier::load(&p)?)
    }

    fn load_shadows(&self, split: &MembershipSplit) -> Result<Option<ShadowEnsemble>> {
        if self.cfg.split.n_shadow == 0 {
            return Ok(None);
        }
        let mut models = Vec::new();
        for p in self.shadow_paths() {
            require(&p)?;
            models.push(Classifier::load(&p)?);
        }
        Ok(Some(ShadowEnsemble::new(models, split.shadow_splits[..self.cfg.split.n_shadow].to_vec())?))
    }

    fn load_fabricated(&self, c: &FabricationConfig, eval: &EvalSet) -> Result<FabricatedSet> {
        let (bin, _) = self.fabricated_paths(c);
        require(&bin)?;
        let (_, _, examples) = read_archive(&bin)?;
        let ids: Vec<&str> = eval.nonmembers.iter().map(|e| e.id.as_str()).collect();
        if examples.iter().map(|e| e.id.as_str()).ne(ids.iter().copied()) {
            bail!("{} does not match the evaluation nonmembers", bin.display());
        }
        Ok(FabricatedSet { config: c.clone(), examples, results: Vec::new() })
    }

    fn population(&self, ds: &Dataset, split: &MembershipSplit) -> Result<Vec<LabeledExample>> {
        let mut pop = ds.select(&split.shadow_filler)?;
        pop.truncate(self.cfg.audit.population);
        Ok(pop)
    }

    fn save(&self, outcome: &GameOutcome, model: &Classifier, seed: u64, protocol: &str, name: &str) -> Result<Vec<PathBuf>> {
        let (csv, json) = self.outcome_paths(protocol, name);
        std::fs::create_dir_all(csv.parent().unwrap())?;
        save_outcome(outcome, model, seed, &csv, &json)?;
        Ok(vec![csv, json])
    }

    // Stages.

    pub fn train(&mut self) -> Result<()> {
        if self.is_cached("train") {
            self.mark_hit("train");
            return Ok(());
        }
        let c = self.cfg.clone();
        let ds = c.dataset.load()?;
        let split = make_membership_splits(
            &ds,
            &SplitConfig { n_train: c.split.n_train, n_eval: c.split.n_eval, n_shadow: c.split.n_shadow, seed: self.manifest.seeds.split },
        )?;
        std::fs::create_dir_all(self.out.join("data"))?;
        write_archive(&self.dataset_path(), ds.shape, ds.n_classes, &ds.examples)?;
        split.save(&self.split_path())?;
        let eval = EvalSet::from_split(&ds, &split)?;
        let mut artifacts = vec![self.dataset_path(), self.split_path()];

        let train_set = ds.select(&split.train_members)?;
        let target_cfg = TrainConfig { seed: self.target_seed(), ..c.train.clone() };
        let trained = train_classifier(&train_set, &ds, &c.model, &target_cfg)?;
        let path = self.target_path();
        let sidecar = json!({
            "role": "target",
            "arch": c.model,
            "train": target_cfg,
            "checksum": trained.model.checksum(),
            "final_epoch_loss": trained.epoch_loss.last(),
            "train_accuracy": accuracy(&trained.model, &eval.members)?,
            "heldout_accuracy": accuracy(&trained.model, &eval.nonmembers)?,
        });
        artifacts.extend(save_checkpoint(&trained.model, &path, &sidecar)?);

        let seeds = self.shadow_seeds();
        let paths = self.shadow_paths();
        let shadows: Vec<Result<(Classifier, Vec<f64>)>> = {
            use rayon::prelude::*;
            split.shadow_splits[..c.split.n_shadow]
                .par_iter()
                .zip(&seeds)
                .map(|(s, &seed)| {
                    let examples = ds.select(&s.in_ids)?;
                    let t = train_classifier(&examples, &ds, &c.model, &TrainConfig { seed, ..c.train.clone() })?;
                    Ok((t.model, t.epoch_loss))
                })
                .collect()
        };
        for (i, (r, path)) in shadows.into_iter().zip(&paths).enumerate() {
            let (model, losses) = r.with_context(|| format!("shadow model {i}"))?;
            let sidecar = json!({
                "role": "shadow",
                "index": i,
                "arch": c.model,
                "train": TrainConfig { seed: seeds[i], ..c.train.clone() },
                "checksum": model.checksum(),
                "final_epoch_loss": losses.last(),
                "n_train": split.shadow_splits[i].in_ids.len(),
            });
            artifacts.extend(save_checkpoint(&model, path, &sidecar)?);
        }
        self.manifest.metrics.insert("target_train_accuracy".into(), sidecar["train_accuracy"].as_f64().unwrap_or(f64::NAN));
        self.manifest
            .metrics
            .insert("target_heldout_accuracy".into(), sidecar["heldout_accuracy"].as_f64().unwrap_or(f64::NAN));
        self.record("train", artifacts);
        Ok(())
    }

    pub fn fabricate(&mut self) -> Result<()> {
        if self.is_cached("fabricate") {
            self.mark_hit("fabricate");
            return Ok(());
        }
        let (ds, split) = self.load_data()?;
        let target = self.load_target()?;
        let shadows = self.load_shadows(&split)?;
        let eval = EvalSet::from_split(&ds, &split)?;
        let pool: Vec<LabeledExample> = eval.members.iter().chain(&eval.nonmembers).cloned().collect();
        let population = self.population(&ds, &split)?;
        let refs = shadows.as_ref().map(|e| References { ensemble: e, calibration: &pool, population: &population, gamma: self.cfg.audit.gamma });
        std::fs::create_dir_all(self.out.join("fabricated"))?;
        let mut artifacts = Vec::new();
        let mut identity = BTreeMap::new();
        for c in self.cfg.fabrication_grid() {
            let results = fabricate_all(&target, &eval.nonmembers, &c)?;
            let (bin, csv) = self.fabricated_paths(&c);
            save_fabricated(&bin, &csv, ds.shape, ds.n_classes, &eval.nonmembers, &results, &c)?;
            let tag = fabrication_tag(&c);
            let is_identity = results.iter().zip(&eval.nonmembers).all(|(r, e)| r.x_bar == e.x);
            identity.insert(tag.clone(), is_identity);
            artifacts.extend([bin, csv]);
            let examples = eval.nonmembers.iter().zip(&results).map(|(e, r)| e.with_pixels(r.x_bar.clone())).collect();
            let set = FabricatedSet { config: c.clone(), examples, results };
            for &kind in &self.cfg.audit.kinds {
                let o = score_mfa_game(&target, &eval, kind, &set, refs.as_ref())?;
                artifacts.extend(self.save(&o, &target, c.seed, "mfa", &format!("{tag}-{kind}"))?);
            }
        }
        self.manifest.notes.insert("identity_perturbation".into(), json!(identity));
        self.record("fabricate", artifacts);
        Ok(())
    }

    pub fn audit(&mut self) -> Result<()> {
        if self.is_cached("audit") {
            self.mark_hit("audit");
            return Ok(());
        }
        let (ds, split) = self.load_data()?;
        let target = self.load_target()?;
        let shadows = self.load_shadows(&split)?;
        let eval = EvalSet::from_split(&ds, &split)?;
        let pool: Vec<LabeledExample> = eval.members.iter().chain(&eval.nonmembers).cloned().collect();
        let population = self.population(&ds, &split)?;
        let refs = shadows.as_ref().map(|e| References { ensemble: e, calibration: &pool, population: &population, gamma: self.cfg.audit.gamma });
        let mut artifacts = Vec::new();
        for &kind in &self.cfg.audit.kinds.clone() {
            let o = run_mi_game(&target, &eval, kind, refs.as_ref())?;
            let roc = memfab::games::membership_roc(&o)?;
            self.manifest.metrics.insert(format!("mi_{kind}_auc"), summarize(&roc).auc);
            artifacts.extend(self.save(&o, &target, self.cfg.seed, "mi", &kind.to_string())?);
        }
        self.record("audit", artifacts);
        Ok(())
    }

    pub fn detect(&mut self) -> Result<()> {
        if self.is_cached("detect") {
            self.mark_hit("detect");
            return Ok(());
        }
        let (ds, split) = self.load_data()?;
        let target = self.load_target()?;
        let eval = EvalSet::from_split(&ds, &split)?;
        let main = self.cfg.fabrication_grid().remove(0);
        let set = self.load_fabricated(&main, &eval)?;
        let rule = DetectorRule { tau_prime: self.cfg.detect.tau_prime, backend: self.cfg.detect.backend };
        let mut o = score_mfd_game(&target, &eval, &set, &rule, &self.cfg.detect.fd)?;
        if self.cfg.detect.feature_baselines {
            let members = ds.select(&split.train_members)?;
            let stats = fit_feature_stats(&target, &members, PENULTIMATE)?;
            let lookup: BTreeMap<(&str, bool), &LabeledExample> = eval
                .members
                .iter()
                .map(|e| ((e.id.as_str(), false), e))
                .chain(set.examples.iter().map(|e| ((e.id.as_str(), true), e)))
                .collect();
            for r in &mut o.records {
                let e = lookup[&(r.sample_id.as_str(), r.fabricated)];
                r.mahalanobis = Some(mahalanobis_score(&stats, &target, e)?);
                r.lid = Some(lid_score(&stats, &target, e, LID_K)?);
            }
        }
        if let Ok(roc) = memfab::games::detector_roc(&o) {
            self.manifest.metrics.insert("mfd_auc".into(), summarize(&roc).auc);
        }
        let artifacts = self.save(&o, &target, self.cfg.detect.fd.seed, "mfd", &fabrication_tag(&main))?;
        self.record("detect", artifacts);
        Ok(())
    }

    pub fn robust(&mut self) -> Result<()> {
        if self.is_cached("robust") {
            self.mark_hit("robust");
            return Ok(());
        }
        let (ds, split) = self.load_data()?;
        let target = self.load_target()?;
        let shadows = self.load_shadows(&split)?;
        let eval = EvalSet::from_split(&ds, &split)?;
        let pool: Vec<LabeledExample> = eval.members.iter().chain(&eval.nonmembers).cloned().collect();
        let population = self.population(&ds, &split)?;
        let main = self.cfg.fabrication_grid().remove(0);
        let set = self.load_fabricated(&main, &eval)?;
        let grid = self.cfg.robust.lambda_grid.clone();
        let seeds = self.manifest.seeds;
        let mut artifacts = Vec::new();
        let mut chosen = BTreeMap::new();
        for kind in self.cfg.robust_kinds() {
            let refs = shadows.as_ref().map(|e| References { ensemble: e, calibration: &pool, population: &population, gamma: self.cfg.audit.gamma });
            let weight = RobustWeightConfig { lambda: grid.first().copied().unwrap_or(10.0), grid: grid.clone() };
            let base = score_armia_game(
                &target,
                &eval,
                kind,
                &set,
                &weight,
                &self.cfg.robust.mixture,
                self.cfg.detect.backend,
                &self.cfg.detect.fd,
                refs.as_ref(),
                seeds.mixture,
            )?;
            artifacts.extend(self.save(&base, &target, seeds.mixture, "armia", &format!("{kind}-baseline"))?);
            for &l in &grid {
                let o = reweight(&base, l)?;
                artifacts.extend(self.save(&o, &target, seeds.mixture, "armia", &format!("{kind}-lambda{l}"))?);
            }
            if grid.is_empty() {
                continue;
            }
            if let Some(l) = self.calibrate(kind, &ds, &split, &main, shadows.as_ref())? {
                chosen.insert(kind.to_string(), l);
            }
        }
        self.manifest.notes.insert("calibrated_lambda".into(), json!(chosen));
        self.record("robust", artifacts);
        Ok(())
    }

    /// Pick λ on shadow model 0, with the remaining shadows as its references.
    fn calibrate(
        &self,
        kind: memfab::mia::StatisticKind,
        ds: &Dataset,
        split: &MembershipSplit,
        fab: &FabricationConfig,
        shadows: Option<&ShadowEnsemble>,
    ) -> Result<Option<f64>> {
        let Some(ens) = shadows else {
            return Ok(None);
        };
        let pool_ids = split.eval_pool();
        let members: Vec<String> = pool_ids.iter().filter(|id| ens.manifest[0].contains(id)).cloned().collect();
        let nonmembers: Vec<String> = pool_ids.iter().filter(|id| !ens.manifest[0].contains(id)).cloned().collect();
        let shadow_eval = EvalSet { members: ds.select(&members)?, nonmembers: ds.select(&nonmembers)? };
        let rest = ens.without(0);
        let pool: Vec<LabeledExample> = shadow_eval.members.iter().chain(&shadow_eval.nonmembers).cloned().collect();
        let population = self.population(ds, split)?;
        let refs = References { ensemble: &rest, calibration: &pool, population: &population, gamma: self.cfg.audit.gamma };
        let use_refs = if kind.needs_ensemble() && rest.len() >= 2 { Some(&refs) } else { None };
        if kind.needs_ensemble() && use_refs.is_none() {
            return Ok(None);
        }
        let (l, _) = calibrate_lambda(
            &ens.models[0],
            &shadow_eval,
            kind,
            fab,
            &self.cfg.robust.mixture,
            use_refs,
            &self.cfg.robust.lambda_grid,
            self.cfg.robust.objective,
            self.manifest.seeds.calibration,
        )?;
        Ok(Some(l))
    }

    pub fn report(&mut self) -> Result<()> {
        if self.is_cached("report") {
            self.mark_hit("report");
            return Ok(());
        }
        let (artifacts, metrics) = crate::report::write_report(self)?;
        self.manifest.metrics.extend(metrics);
        self.record("report", artifacts);
        Ok(())
    }

    pub fn run_stage(&mut self, stage: &str) -> Result<()> {
        let r = match stage {
            "train" => self.train(),
            "fabricate" => self.fabricate(),
            "audit" => self.audit(),
            "detect" => self.detect(),
            "robust" => self.robust(),
            "report" => self.report(),
            _ => bail!("unknown stage {stage}"),
        };
        r.with_context(|| format!("stage {stage}"))?;
        self.save_manifest()
    }
}

fn save_checkpoint(model: &Classifier, path: &Path, sidecar: &serde_json::Value) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(path.parent().unwrap())?;
    model.save(path)?;
    let side = path.with_extension("json");
    std::fs::write(&side, serde_json::to_string_pretty(sidecar)? + "\n")?;
    Ok(vec![path.to_path_buf(), side])
}
