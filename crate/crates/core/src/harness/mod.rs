//! Suite orchestration: runs relations over clean and mutant subjects and
//! assembles kill matrices.
//!
//! Every (subject, relation, seed) cell is keyed by a content hash of its
//! full description and the data it sees; finished cells are written to the
//! output directory and reused on the next run, so an interrupted suite
//! resumes where it stopped.

mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cnn::{CnnModel, TrainedSubject};
use crate::dataset::synth::synthetic_images;
use crate::dataset::{
    split_stratified, DatasetManifest, DatasetSplit, LabeledImageSet, LabeledVectorSet,
    LoadedDataset,
};
use crate::error::{Error, Result};
use crate::faults::{
    apply_mutant, build_cnn_subject, build_svm_subject, find_mutant, SubjectConfig, SubjectKind,
};
use crate::metamorphic::{
    run_cnn_test_only_mr, run_cnn_training_mr, run_svm_mr, CnnSubject, Family, MrId, MrSpec,
    MrStatus, MrSuite, MrVerdict, Permutation, TransformSpec, DESK_SIGMA_THRESHOLD,
};

pub use report::{
    emit_loss_curves, emit_matrix_loss_curves, emit_report, render_csv, render_text, summarize,
    summarize_many, MrSummary, ReportFormat, Summary,
};

/// Environment variable capping the number of concurrently running cells.
pub const WORKERS_ENV: &str = "MTVERIFY_WORKERS";

/// Row label of the unmutated subject.
pub const BASELINE: &str = "clean";

const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// A manifest file; relative paths resolve against the plan's directory.
    Manifest { path: PathBuf },
    /// The procedural image corpus, split stratified.
    SyntheticImages {
        per_class: usize,
        seed: u64,
        test_fraction: f64,
        split_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum SuiteData {
    Vectors(DatasetSplit<LabeledVectorSet>),
    Images(DatasetSplit<LabeledImageSet>),
}

impl DatasetSource {
    pub fn load(&self, base: &Path) -> Result<SuiteData> {
        match self {
            DatasetSource::Manifest { path } => {
                let path = if path.is_absolute() {
                    path.clone()
                } else {
                    base.join(path)
                };
                let (manifest, dir) = DatasetManifest::from_file(&path)?;
                Ok(match manifest.load(&dir)? {
                    LoadedDataset::Digits(s) => SuiteData::Vectors(s),
                    LoadedDataset::Images(s) => SuiteData::Images(s),
                })
            }
            DatasetSource::SyntheticImages {
                per_class,
                seed,
                test_fraction,
                split_seed,
            } => {
                let set = synthetic_images(*per_class, *seed);
                Ok(SuiteData::Images(split_stratified(
                    &set,
                    *test_fraction,
                    *split_seed,
                )?))
            }
        }
    }
}

impl SuiteData {
    /// Content hash of both halves of the split.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        match self {
            SuiteData::Vectors(s) => {
                for set in [&s.train, &s.test] {
                    h.update((set.n_features() as u64).to_le_bytes());
                    h.update(set.labels());
                    for v in set.features() {
                        h.update(v.to_le_bytes());
                    }
                }
            }
            SuiteData::Images(s) => {
                for set in [&s.train, &s.test] {
                    h.update((set.height() as u64).to_le_bytes());
                    h.update(set.labels());
                    for v in set.pixels() {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// What to run: one subject family over a dataset, a relation subset, a
/// mutant subset and a list of seeds.
///
/// An empty `relations` list selects every relation applicable to the
/// subject. Seeds set the CNN training seed and the SVM instance-shuffle
/// seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub dataset: DatasetSource,
    pub subject: SubjectKind,
    #[serde(default)]
    pub relations: Vec<MrId>,
    #[serde(default)]
    pub mutants: Vec<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Replaces the standard relation definitions when present.
    #[serde(default)]
    pub suite: Option<MrSuite>,
    #[serde(default = "default_sigma_threshold")]
    pub sigma_threshold: f64,
    pub output_dir: PathBuf,
    /// Directory relative dataset paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_sigma_threshold() -> f64 {
    DESK_SIGMA_THRESHOLD
}

impl RunPlan {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut plan: RunPlan = serde_json::from_str(&text)?;
        plan.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(plan)
    }

    pub fn family(&self) -> Family {
        match self.subject {
            SubjectKind::Svm { .. } => Family::Svm,
            SubjectKind::Cnn { .. } => Family::Cnn,
        }
    }

    fn is_linear(&self) -> bool {
        matches!(
            self.subject,
            SubjectKind::Svm {
                kernel: crate::faults::SvmKernelChoice::Linear,
                ..
            }
        )
    }

    /// The relations this plan runs, in id order.
    pub fn selected_relations(&self) -> Vec<MrId> {
        let mut ids: Vec<MrId> = if self.relations.is_empty() {
            MrId::all(self.family())
                .into_iter()
                .filter(|id| self.family() == Family::Cnn || id.applies_to_kernel(self.is_linear()))
                .collect()
        } else {
            self.relations.clone()
        };
        ids.sort();
        ids.dedup();
        ids
    }

    fn relation_spec(&self, id: MrId) -> Result<MrSpec> {
        match &self.suite {
            Some(suite) => suite
                .get(id)
                .cloned()
                .ok_or_else(|| Error::Config(format!("suite does not define {id}"))),
            None => Ok(MrSpec::standard(id, self.sigma_threshold)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("plan lists no seeds".into()));
        }
        if !(self.sigma_threshold > 0.0) {
            return Err(Error::Config("sigma threshold must be positive".into()));
        }
        let family = self.family();
        for id in self.selected_relations() {
            if id.family != family {
                return Err(Error::Config(format!(
                    "{id} does not apply to {family:?} subjects"
                )));
            }
            if family == Family::Svm && !id.applies_to_kernel(self.is_linear()) {
                return Err(Error::Config(format!("{id} does not apply to this kernel")));
            }
            self.relation_spec(id)?.validate()?;
        }
        let clean = SubjectConfig::clean(self.subject.clone());
        for m in &self.mutants {
            if m == BASELINE {
                return Err(Error::Config(format!("`{BASELINE}` is not a mutant id")));
            }
            find_mutant(m)?;
            apply_mutant(&clean, m)?;
        }
        Ok(())
    }
}

/// Verdict of one relation on one subject under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedVerdict {
    pub seed: u64,
    pub verdict: MrVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mr: MrId,
    /// Killed if any seed kills (evidence is that seed's); otherwise
    /// inconclusive if any seed is; otherwise the largest evidence.
    pub verdict: MrVerdict,
    pub seeds: Vec<SeedVerdict>,
}

impl Cell {
    pub fn from_seeds(mr: MrId, seeds: Vec<SeedVerdict>) -> Self {
        let pick = |status: MrStatus| {
            seeds
                .iter()
                .filter(|s| s.verdict.status == status)
                .max_by(|a, b| a.verdict.evidence.total_cmp(&b.verdict.evidence))
        };
        let verdict = pick(MrStatus::Killed)
            .or_else(|| pick(MrStatus::Inconclusive))
            .or_else(|| pick(MrStatus::Pass))
            .map(|s| s.verdict.clone())
            .unwrap_or_else(|| MrVerdict::inconclusive(mr, f64::NAN, "no seeds ran".into()));
        Self { mr, verdict, seeds }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    /// Mutant id, or [`BASELINE`].
    pub mutant: String,
    pub cells: Vec<Cell>,
}

/// Relation verdicts per subject: the baseline row first, then mutants in
/// plan order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KillMatrix {
    pub subject: String,
    pub relations: Vec<MrId>,
    pub seeds: Vec<u64>,
    pub rows: Vec<MatrixRow>,
}

impl KillMatrix {
    pub fn row(&self, mutant: &str) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.mutant == mutant)
    }

    pub fn cell(&self, mutant: &str, mr: MrId) -> Option<&Cell> {
        self.row(mutant)?.cells.iter().find(|c| c.mr == mr)
    }

    pub fn baseline(&self) -> Option<&MatrixRow> {
        self.row(BASELINE)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn subject_label(plan: &RunPlan) -> String {
    let s = SubjectConfig::clean(plan.subject.clone()).to_string();
    s.trim_end_matches("/clean").to_string()
}

/// Subject configuration with the plan seed applied.
fn seeded_subject(cfg: &SubjectConfig, seed: u64) -> SubjectConfig {
    let mut cfg = cfg.clone();
    if let SubjectKind::Cnn { train } = &mut cfg.subject {
        train.seed = seed;
    }
    cfg
}

/// Relation definition with the plan seed applied to seeded shuffles.
fn seeded_spec(spec: &MrSpec, seed: u64) -> MrSpec {
    let mut spec = spec.clone();
    for v in &mut spec.variants {
        if let TransformSpec::InstanceShuffle {
            order: Permutation::Derangement { seed: s },
        } = v
        {
            *s = seed;
        }
    }
    spec
}

fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    let text = serde_json::to_string(value)?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

#[derive(Serialize)]
struct CellKey<'a> {
    version: u32,
    subject: &'a SubjectConfig,
    relation: &'a MrSpec,
    dataset: &'a str,
}

#[derive(Serialize)]
struct ModelKey<'a> {
    version: u32,
    subject: &'a SubjectConfig,
    dataset: &'a str,
}

/// On-disk store of finished cells and trained models.
struct Cache {
    dir: PathBuf,
}

impl Cache {
    fn new(output_dir: &Path) -> Result<Self> {
        let dir = output_dir.join("cache");
        for sub in ["cells", "models"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        Ok(Self { dir })
    }

    fn read<T: for<'de> Deserialize<'de>>(&self, kind: &str, key: &str) -> Option<T> {
        let path = self.dir.join(kind).join(format!("{key}.json"));
        let text = fs::read_to_string(&path).ok()?;
        match serde_json::from_str(&text) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {}: {e}", path.display());
                None
            }
        }
    }

    fn write<T: Serialize>(&self, kind: &str, key: &str, value: &T) -> Result<()> {
        let path = self.dir.join(kind).join(format!("{key}.json"));
        let tmp = path.with_extension("json.partial");
        let text = serde_json::to_string(value)?;
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

struct Context<'a> {
    plan: &'a RunPlan,
    data: &'a SuiteData,
    fingerprint: String,
    cache: Cache,
    specs: Vec<MrSpec>,
}

impl Context<'_> {
    /// All relation verdicts of one subject under one seed, in relation order.
    fn run_subject(&self, mutant: &str, seed: u64) -> Result<Vec<MrVerdict>> {
        let clean = SubjectConfig::clean(self.plan.subject.clone());
        let cfg = if mutant == BASELINE {
            clean
        } else {
            apply_mutant(&clean, mutant)?
        };
        let cfg = seeded_subject(&cfg, seed);
        let mut trained: Option<std::result::Result<CnnModel<f32>, String>> = None;
        let mut out = Vec::with_capacity(self.specs.len());
        for spec in &self.specs {
            let spec = seeded_spec(spec, seed);
            let key = hash_json(&CellKey {
                version: CACHE_VERSION,
                subject: &cfg,
                relation: &spec,
                dataset: &self.fingerprint,
            })?;
            if let Some(v) = self.cache.read::<MrVerdict>("cells", &key) {
                log::debug!("{cfg} {}: cached", spec.id);
                out.push(v);
                continue;
            }
            log::info!("{cfg} {} seed {seed}: running", spec.id);
            let verdict = match self.data {
                SuiteData::Vectors(split) => run_svm_mr(&spec, split, &build_svm_subject(&cfg)?)?,
                SuiteData::Images(split) => {
                    if spec.id.is_training() {
                        run_cnn_training_mr(&spec, split, &build_cnn_subject(&cfg)?)?
                    } else {
                        let model = trained.get_or_insert_with(|| self.trained_model(&cfg, split));
                        match model {
                            Ok(m) => run_cnn_test_only_mr(&spec, m, &split.test)?,
                            Err(msg) => {
                                MrVerdict::inconclusive(spec.id, spec.threshold, msg.clone())
                            }
                        }
                    }
                }
            };
            self.cache.write("cells", &key, &verdict)?;
            out.push(verdict);
        }
        Ok(out)
    }

    /// The subject's model trained on the untransformed split, or the
    /// failure that prevented it.
    fn trained_model(
        &self,
        cfg: &SubjectConfig,
        split: &DatasetSplit<LabeledImageSet>,
    ) -> std::result::Result<CnnModel<f32>, String> {
        let key = hash_json(&ModelKey {
            version: CACHE_VERSION,
            subject: cfg,
            dataset: &self.fingerprint,
        })
        .map_err(|e| e.to_string())?;
        if let Some(m) = self.cache.read::<CnnModel<f32>>("models", &key) {
            return Ok(m);
        }
        let subject = build_cnn_subject(cfg).map_err(|e| e.to_string())?;
        let TrainedSubject { model, .. } = subject.train(split).map_err(|e| {
            log::warn!("{cfg}: training failed: {e}");
            format!("training: {e}")
        })?;
        if let Err(e) = self.cache.write("models", &key, &model) {
            log::warn!("could not cache model: {e}");
        }
        Ok(model)
    }

    fn run_row(&self, mutant: &str) -> Result<MatrixRow> {
        let per_seed = self
            .plan
            .seeds
            .par_iter()
            .map(|&seed| self.run_subject(mutant, seed).map(|v| (seed, v)))
            .collect::<Result<Vec<_>>>()?;
        let cells = self
            .specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let seeds = per_seed
                    .iter()
                    .map(|(seed, v)| SeedVerdict {
                        seed: *seed,
                        verdict: v[i].clone(),
                    })
                    .collect();
                Cell::from_seeds(spec.id, seeds)
            })
            .collect();
        Ok(MatrixRow {
            mutant: mutant.to_string(),
            cells,
        })
    }
}

/// Number of worker threads from [`WORKERS_ENV`], if set.
pub fn configured_workers() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| {
                Error::Config(format!(
                    "{WORKERS_ENV} must be a positive integer, got `{v}`"
                ))
            }),
        Err(_) => Ok(None),
    }
}

/// Runs the plan: the baseline row first, then every mutant row.
///
/// Fails with [`Error::BaselineKilled`] (after caching the baseline cells)
/// when any relation kills the clean subject, since the suite itself is
/// then suspect. Subject crashes become inconclusive cells.
pub fn run_suite(plan: &RunPlan) -> Result<KillMatrix> {
    plan.validate()?;
    let data = plan.dataset.load(&plan.base_dir)?;
    match (&data, plan.family()) {
        (SuiteData::Vectors(_), Family::Svm) | (SuiteData::Images(_), Family::Cnn) => {}
        _ => {
            return Err(Error::Config(
                "dataset kind does not match the subject family".into(),
            ))
        }
    }
    let relations = plan.selected_relations();
    let ctx = Context {
        plan,
        fingerprint: data.fingerprint(),
        data: &data,
        cache: Cache::new(&plan.output_dir)?,
        specs: relations
            .iter()
            .map(|&id| plan.relation_spec(id))
            .collect::<Result<_>>()?,
    };
    let run = || -> Result<KillMatrix> {
        let baseline = ctx.run_row(BASELINE)?;
        let killed: Vec<String> = baseline
            .cells
            .iter()
            .filter(|c| c.verdict.is_killed())
            .map(|c| c.mr.to_string())
            .collect();
        if !killed.is_empty() {
            return Err(Error::BaselineKilled { relations: killed });
        }
        let rows: BTreeMap<usize, MatrixRow> = plan
            .mutants
            .par_iter()
            .enumerate()
            .map(|(i, m)| ctx.run_row(m).map(|r| (i, r)))
            .collect::<Result<_>>()?;
        let mut all = vec![baseline];
        all.extend(rows.into_values());
        Ok(KillMatrix {
            subject: subject_label(plan),
            relations: relations.clone(),
            seeds: plan.seeds.clone(),
            rows: all,
        })
    };
    match configured_workers()? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metamorphic::VariantEvidence;

    fn verdict(mr: MrId, status: MrStatus, evidence: f64) -> MrVerdict {
        MrVerdict {
            mr,
            status,
            evidence,
            threshold: 1.0,
            variants: vec![VariantEvidence {
                variant: "v".into(),
                deviation: evidence,
                output_deviation: evidence,
                class_flips: 0,
                compared: 1,
            }],
            triggered_by: vec![],
            sigma: None,
            diagnostics: None,
        }
    }

    #[test]
    fn cell_aggregation_prefers_kills() {
        let mr = MrId::CNN_DIHEDRAL;
        let c = Cell::from_seeds(
            mr,
            vec![
                SeedVerdict {
                    seed: 0,
                    verdict: verdict(mr, MrStatus::Pass, 0.5),
                },
                SeedVerdict {
                    seed: 1,
                    verdict: verdict(mr, MrStatus::Killed, 3.0),
                },
                SeedVerdict {
                    seed: 2,
                    verdict: MrVerdict::inconclusive(mr, 1.0, "x".into()),
                },
            ],
        );
        assert_eq!(c.verdict.status, MrStatus::Killed);
        assert_eq!(c.verdict.evidence, 3.0);
        let c = Cell::from_seeds(
            mr,
            vec![
                SeedVerdict {
                    seed: 0,
                    verdict: verdict(mr, MrStatus::Pass, 0.5),
                },
                SeedVerdict {
                    seed: 1,
                    verdict: verdict(mr, MrStatus::Pass, 0.7),
                },
            ],
        );
        assert_eq!(c.verdict.status, MrStatus::Pass);
        assert_eq!(c.verdict.evidence, 0.7);
    }

    #[test]
    fn shuffle_seed_follows_the_plan_seed() {
        let spec = seeded_spec(&MrSpec::standard(MrId::SVM_SHUFFLE, 1.0), 7);
        assert_eq!(
            spec.variants[0],
            TransformSpec::InstanceShuffle {
                order: Permutation::Derangement { seed: 7 }
            }
        );
    }

    #[test]
    fn plan_defaults_to_applicable_relations() {
        let text = r#"{
            "dataset": {"kind": "manifest", "path": "m.json"},
            "subject": {"family": "svm", "kernel": {"kind": "linear"}},
            "mutants": ["l2"],
            "output_dir": "out"
        }"#;
        let plan: RunPlan = serde_json::from_str(text).unwrap();
        assert_eq!(
            plan.selected_relations(),
            vec![MrId::SVM_PERMUTE, MrId::SVM_SHUFFLE, MrId::SVM_SCALE]
        );
        assert_eq!(plan.seeds, vec![0]);
        plan.validate().unwrap();
        let mut bad = plan.clone();
        bad.mutants = vec!["r2".into()];
        assert!(bad.validate().is_err());
        let mut bad = plan.clone();
        bad.relations = vec![MrId::SVM_SHIFT];
        assert!(bad.validate().is_err());
        let mut bad = plan;
        bad.mutants = vec!["zz".into()];
        assert!(matches!(bad.validate(), Err(Error::UnknownMutant(_))));
    }
}
