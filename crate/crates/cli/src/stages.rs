//! Stage orchestration with manifests, prerequisite checks and skip-if-unchanged.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use prism_core::dataset::{generate_shapes, RealDataset, Split};
use prism_core::diversity::{export_features, extract_features, intra_class_cosine, DiversityReport};
use prism_core::recovery::{run_recovery, SyntheticDataset};
use prism_core::relabel::{relabel_dataset, SoftLabels};
use prism_core::student::{run_eval_protocol, EvalReport, EvalSet, ReportMeta};
use prism_core::zoo::{load_checkpoint, save_checkpoint, train_teacher, ArchSpec, TeacherPool};
use serde::Serialize;
use serde_json::json;

use crate::config::{sha256_hex, RunConfig};
use crate::error::{CliError, Result};
use crate::manifest::{hash_file, Manifest};
use crate::report::{emit_results, Tables};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum)]
pub enum DiversityInput {
    Synthetic,
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Squeeze,
    Recover,
    Relabel,
    Validate,
    Diversity(DiversityInput),
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Squeeze => "squeeze",
            Stage::Recover => "recover",
            Stage::Relabel => "relabel",
            Stage::Validate => "validate",
            Stage::Diversity(DiversityInput::Synthetic) => "diversity-synthetic",
            Stage::Diversity(DiversityInput::Real) => "diversity-real",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

pub const SYNTHETIC_FILE: &str = "synthetic.prsm";
pub const LABELS_FILE: &str = "soft_labels.prsl";
pub const REPORT_FILE: &str = "eval_report.json";
pub const DIVERSITY_FILE: &str = "diversity.json";

pub struct Pipeline {
    pub cfg: RunConfig,
    pub root: PathBuf,
    pub force: bool,
    pub quiet: bool,
}

fn stage_hash(stage: Stage, parts: serde_json::Value) -> String {
    sha256_hex(json!({ "stage": stage.to_string(), "parts": parts }).to_string().as_bytes())
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Self {
        let root = cfg.output_root();
        Self {
            cfg,
            root,
            force: false,
            quiet: false,
        }
    }

    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        match stage {
            Stage::Diversity(DiversityInput::Synthetic) => self.root.join("diversity").join("synthetic"),
            Stage::Diversity(DiversityInput::Real) => self.root.join("diversity").join("real"),
            s => self.root.join(s.to_string()),
        }
    }

    fn dataset_path(&self) -> PathBuf {
        if self.cfg.dataset.source == "shapes" {
            let spec = serde_json::to_string(&self.cfg.dataset).expect("dataset spec serializes");
            self.root.join("data").join(format!("shapes-{}.prsm", &sha256_hex(spec.as_bytes())[..12]))
        } else {
            PathBuf::from(&self.cfg.dataset.source)
        }
    }

    /// Loads (generating on first use) the real dataset and its content hash.
    pub fn dataset(&self) -> Result<(RealDataset, String)> {
        let d = &self.cfg.dataset;
        let path = self.dataset_path();
        if d.source == "shapes" && !path.exists() {
            let ds = generate_shapes(d.classes, d.per_class, d.image_size, d.seed)?;
            ds.save(&path)?;
        }
        if path.is_dir() {
            let ds = RealDataset::load(&path)?;
            let hash = sha256_hex(&ds.to_container().to_bytes()?);
            return Ok((ds, hash));
        }
        let bytes = std::fs::read(&path)
            .map_err(|e| CliError::Config(format!("dataset {}: {e}", path.display())))?;
        let ds = RealDataset::from_container(prism_core::io::DataContainer::from_bytes(&bytes, &path)?, &path)?;
        Ok((ds, sha256_hex(&bytes)))
    }

    /// Stage hashes implied by the current config and dataset.
    pub fn stage_hashes(&self, dataset_hash: &str) -> BTreeMap<String, String> {
        let c = &self.cfg;
        let squeeze = stage_hash(
            Stage::Squeeze,
            json!([dataset_hash, to_json(&c.dataset), c.pool.archs, to_json(&c.squeeze), c.seed]),
        );
        let mut rec = c.recovery.clone();
        rec.workers = 0;
        let recover = stage_hash(
            Stage::Recover,
            json!([squeeze, to_json(&rec), c.pool.k_max, c.pool.diverse, c.variant]),
        );
        let relabel = stage_hash(Stage::Relabel, json!([recover, to_json(&c.relabel)]));
        let soft = if c.validation.use_soft_labels { relabel.clone() } else { String::new() };
        let validate = stage_hash(
            Stage::Validate,
            json!([recover, soft, dataset_hash, to_json(&c.validation), c.protocol]),
        );
        let div_syn = stage_hash(
            Stage::Diversity(DiversityInput::Synthetic),
            json!([squeeze, recover, to_json(&c.diversity)]),
        );
        let div_real = stage_hash(
            Stage::Diversity(DiversityInput::Real),
            json!([squeeze, dataset_hash, to_json(&c.diversity)]),
        );
        [
            (Stage::Squeeze, squeeze),
            (Stage::Recover, recover),
            (Stage::Relabel, relabel),
            (Stage::Validate, validate),
            (Stage::Diversity(DiversityInput::Synthetic), div_syn),
            (Stage::Diversity(DiversityInput::Real), div_real),
        ]
        .into_iter()
        .map(|(s, h)| (s.to_string(), h))
        .collect()
    }

    fn prerequisites(&self, stage: Stage) -> Vec<Stage> {
        match stage {
            Stage::Squeeze => vec![],
            Stage::Recover => vec![Stage::Squeeze],
            Stage::Relabel => vec![Stage::Squeeze, Stage::Recover],
            Stage::Validate if self.cfg.validation.use_soft_labels => vec![Stage::Recover, Stage::Relabel],
            Stage::Validate => vec![Stage::Recover],
            Stage::Diversity(DiversityInput::Synthetic) => vec![Stage::Squeeze, Stage::Recover],
            Stage::Diversity(DiversityInput::Real) => vec![Stage::Squeeze],
        }
    }

    /// Checks that `needs` ran under the current config and its files are intact.
    fn require(&self, stage: Stage, needs: Stage, hashes: &BTreeMap<String, String>) -> Result<Manifest> {
        let dir = self.stage_dir(needs);
        let m = Manifest::read(&dir)?.ok_or_else(|| CliError::MissingPrerequisite {
            stage: stage.to_string(),
            needs: needs.to_string(),
        })?;
        if m.stage_hash != hashes[&needs.to_string()] {
            return Err(CliError::MixedProvenance {
                stage: stage.to_string(),
                needs: needs.to_string(),
            });
        }
        m.verify_outputs(&dir)?;
        Ok(m)
    }

    fn load_pool(&self, squeeze: &Manifest) -> Result<TeacherPool> {
        let dir = self.stage_dir(Stage::Squeeze);
        let teachers = squeeze
            .outputs
            .keys()
            .map(|name| load_checkpoint(&dir.join(name)))
            .collect::<prism_core::Result<Vec<_>>>()?;
        Ok(TeacherPool::new(teachers, self.cfg.pool.k_max, self.cfg.pool.diverse)?)
    }

    /// Runs one stage unless its manifest shows identical inputs.
    pub fn run(&self, stage: Stage) -> Result<StageOutcome> {
        let (real, dataset_hash) = self.dataset()?;
        let hashes = self.stage_hashes(&dataset_hash);
        let my_hash = hashes[&stage.to_string()].clone();
        let mut upstream = BTreeMap::new();
        for needs in self.prerequisites(stage) {
            upstream.insert(needs, self.require(stage, needs, &hashes)?);
        }
        let dir = self.stage_dir(stage);
        if !self.force {
            if let Some(m) = Manifest::read(&dir)? {
                if m.stage_hash == my_hash && m.outputs_intact(&dir)? {
                    self.note(format!("{stage}: up to date ({}), skipping", &my_hash[..12]));
                    return Ok(StageOutcome::Skipped);
                }
            }
        }
        std::fs::create_dir_all(&dir)?;
        let start = Instant::now();
        self.note(format!("{stage}: running"));
        let mut inputs: BTreeMap<String, String> = BTreeMap::new();
        inputs.insert("dataset".into(), dataset_hash.clone());
        for (s, m) in &upstream {
            for (name, h) in &m.outputs {
                inputs.insert(format!("{s}/{name}"), h.clone());
            }
        }
        let outputs = match stage {
            Stage::Squeeze => self.squeeze(&real, &dir)?,
            Stage::Recover => self.recover(&real, &upstream[&Stage::Squeeze], &dir)?,
            Stage::Relabel => self.relabel(&upstream[&Stage::Squeeze], &dir)?,
            Stage::Validate => self.validate(&real, &upstream, &dir)?,
            Stage::Diversity(input) => self.diversity(&real, input, &upstream[&Stage::Squeeze], &dir)?,
        };
        let mut out_hashes = BTreeMap::new();
        for name in outputs {
            out_hashes.insert(name.clone(), hash_file(&dir.join(&name))?);
        }
        Manifest {
            stage: stage.to_string(),
            config_hash: self.cfg.hash(),
            stage_hash: my_hash,
            seed: self.cfg.seed,
            inputs,
            outputs: out_hashes,
            wall_time_secs: start.elapsed().as_secs_f64(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
        .write(&dir)?;
        self.note(format!("{stage}: done in {:.1}s", start.elapsed().as_secs_f64()));
        Ok(StageOutcome::Ran)
    }

    fn squeeze(&self, real: &RealDataset, dir: &Path) -> Result<Vec<String>> {
        let (_, h, _) = real.image_dims();
        let mut names = Vec::new();
        for (i, arch) in self.cfg.pool.archs.iter().enumerate() {
            let spec = ArchSpec::family(arch, real.num_classes, h)?;
            let model = train_teacher(spec, real, &self.cfg.squeeze, self.cfg.seed.wrapping_add(i as u64))?;
            self.note(format!(
                "  teacher {arch}: train {:.3}, held-out {:.3}",
                model.train_accuracy, model.heldout_accuracy
            ));
            let name = format!("teacher_{i}_{arch}.ckpt");
            save_checkpoint(&model, &dir.join(&name))?;
            names.push(name);
        }
        Ok(names)
    }

    fn recover(&self, real: &RealDataset, squeeze: &Manifest, dir: &Path) -> Result<Vec<String>> {
        let pool = self.load_pool(squeeze)?;
        let synth = run_recovery(real, &pool, &self.cfg.recovery)?;
        let improved = synth.provenance.iter().filter(|p| p.bn_loss_end < p.bn_loss_start).count();
        self.note(format!("  bn alignment improved for {improved}/{} images", synth.len()));
        synth.save(&dir.join(SYNTHETIC_FILE))?;
        Ok(vec![
            SYNTHETIC_FILE.into(),
            format!("{SYNTHETIC_FILE}.provenance.json"),
        ])
    }

    fn synthetic(&self) -> Result<SyntheticDataset> {
        Ok(SyntheticDataset::load(&self.stage_dir(Stage::Recover).join(SYNTHETIC_FILE))?)
    }

    fn relabel(&self, squeeze: &Manifest, dir: &Path) -> Result<Vec<String>> {
        let pool = self.load_pool(squeeze)?;
        let labels = relabel_dataset(&self.synthetic()?, &self.cfg.relabel, &pool)?;
        labels.save(&dir.join(LABELS_FILE))?;
        Ok(vec![LABELS_FILE.into(), format!("{LABELS_FILE}.crops.json")])
    }

    fn validate(&self, real: &RealDataset, upstream: &BTreeMap<Stage, Manifest>, dir: &Path) -> Result<Vec<String>> {
        let synth = self.synthetic()?;
        let soft = if self.cfg.validation.use_soft_labels {
            Some(SoftLabels::load(&self.stage_dir(Stage::Relabel).join(LABELS_FILE))?)
        } else {
            None
        };
        let val = real.indices(Split::Val);
        let images = real.images.select_rows(&val);
        let labels = real.labels_usize(&val);
        let meta = ReportMeta {
            variant: self.cfg.variant.clone(),
            ipc: self.cfg.recovery.ipc,
            k_max: self.cfg.pool.k_max,
            policy: format!("{:?}", self.cfg.recovery.policy).to_lowercase(),
            config_hash: self.cfg.hash(),
            synthetic_hash: upstream[&Stage::Recover].outputs[SYNTHETIC_FILE].clone(),
        };
        let report = run_eval_protocol(
            &synth,
            soft.as_ref(),
            &EvalSet {
                images: &images,
                labels: &labels,
            },
            &self.cfg.validation,
            meta,
        )?;
        self.note(format!(
            "  student accuracy {}",
            crate::report::format_pm(report.mean, report.std)
        ));
        prism_core::io::write_atomic(&dir.join(REPORT_FILE), &serde_json::to_vec_pretty(&report)?)?;
        let csv = format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row());
        prism_core::io::write_atomic(&dir.join("eval_report.csv"), csv.as_bytes())?;
        Ok(vec![REPORT_FILE.into(), "eval_report.csv".into()])
    }

    fn diversity(&self, real: &RealDataset, input: DiversityInput, squeeze: &Manifest, dir: &Path) -> Result<Vec<String>> {
        let pool = self.load_pool(squeeze)?;
        let (images, labels, name) = match input {
            DiversityInput::Synthetic => {
                let s = self.synthetic()?;
                let labels = s.labels_usize();
                (s.images, labels, format!("synthetic:{}", self.cfg.variant))
            }
            DiversityInput::Real => {
                let idx = real.indices(Split::Train);
                (real.images.select_rows(&idx), real.labels_usize(&idx), "real:train".to_string())
            }
        };
        let fm = extract_features(pool.primary(), &images, &labels, self.cfg.diversity.batch_size)?;
        let report = intra_class_cosine(&fm, &name)?;
        if !report.excluded.is_empty() {
            self.note(format!("  classes with <2 samples excluded: {:?}", report.excluded));
        }
        self.note(format!("  mean intra-class cosine {:.4}", report.global_mean));
        export_features(&fm, &dir.join("features.csv"))?;
        report.save_json(&dir.join(DIVERSITY_FILE))?;
        report.save_class_csv(&dir.join("diversity_classes.csv"))?;
        Ok(vec!["features.csv".into(), DIVERSITY_FILE.into(), "diversity_classes.csv".into()])
    }

    /// squeeze, recover, relabel (when soft labels are used), validate and
    /// diversity on synthetic data, then result tables.
    pub fn run_all(&self) -> Result<Vec<(Stage, StageOutcome)>> {
        let mut stages = vec![Stage::Squeeze, Stage::Recover];
        if self.cfg.validation.use_soft_labels {
            stages.push(Stage::Relabel);
        }
        stages.extend([Stage::Validate, Stage::Diversity(DiversityInput::Synthetic)]);
        let mut done = Vec::new();
        for s in stages {
            done.push((s, self.run(s)?));
        }
        let tables = self.tables()?;
        prism_core::io::write_atomic(&self.root.join("tables.csv"), tables.csv.as_bytes())?;
        prism_core::io::write_atomic(&self.root.join("tables.txt"), tables.text.as_bytes())?;
        if !self.quiet {
            print!("{}", tables.text);
        }
        Ok(done)
    }

    pub fn tables(&self) -> Result<Tables> {
        let report: EvalReport =
            serde_json::from_slice(&std::fs::read(self.stage_dir(Stage::Validate).join(REPORT_FILE))?)?;
        emit_results(&[report])
    }

    pub fn diversity_report(&self, input: DiversityInput) -> Result<DiversityReport> {
        Ok(serde_json::from_slice(&std::fs::read(
            self.stage_dir(Stage::Diversity(input)).join(DIVERSITY_FILE),
        )?)?)
    }
}
