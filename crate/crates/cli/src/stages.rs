//! Pipeline stages on top of the artifact store.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use blemish_core::dataset::PairedDataset;
use blemish_core::diffusion::{pretrain, sample, text, ModelCheckpoint, SlotValues};
use blemish_core::digest::json_hash;
use blemish_core::embed::{FeatureEmbedder, OracleEmbedder};
use blemish_core::eval::{generate_case, ordered_cases, render_table, run_benchmark, Method, MetricReport};
use blemish_core::experiment::{method_tag, ExperimentConfig, VANILLA_TAG};
use blemish_core::image::{contact_sheet, ImageTensor};
use blemish_core::inversion::{build_embedding_bank, EmbeddingBank};
use blemish_core::rectify::{rectify_train, Variant};
use blemish_core::seed;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::store::{StageId, StageRecord, Store};

pub const AUGMENT: &str = "augment";
pub const PRETRAIN: &str = "pretrain";
pub const INVERT: &str = "invert";
pub const RECTIFY: &str = "rectify";
pub const GENERATE: &str = "generate";
pub const EVALUATE: &str = "evaluate";

/// Stage keys of one configuration, computable without running anything.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Plan {
    pub augment: StageId,
    pub pretrain: StageId,
    pub invert: StageId,
    pub rectify: BTreeMap<Variant, StageId>,
    pub generate: StageId,
    pub evaluate: StageId,
}

impl Plan {
    pub fn new(cfg: &RunConfig) -> Self {
        let e = &cfg.experiment;
        let augment = StageId::new(
            AUGMENT,
            &json!({"seed": e.seed, "image_size": e.image_size, "subjects": e.subjects, "artifacts": e.train_artifacts()}),
            &[],
        );
        let pretrain = StageId::new(PRETRAIN, &e.pretrain, &[]);
        let invert = StageId::new(INVERT, &json!({"seed": e.seed, "inversion": e.bank_inversion}), &[&augment, &pretrain]);
        let rectify: BTreeMap<Variant, StageId> =
            e.variants.iter().map(|&v| (v, StageId::new(&format!("{RECTIFY}-{}", v.name()), &e.rectify_config(v), &[&augment, &pretrain, &invert]))).collect();
        let (id, ood) = e.test_artifacts();
        let test = json!({
            "seed": e.seed,
            "image_size": e.image_size,
            "subjects": e.subjects,
            "id": id,
            "ood": ood,
            "ratio": e.artifacts.test_unblemished_ratio,
            "templates": e.templates,
            "benchmark": e.benchmark_config(),
        });
        let mut ups: Vec<&StageId> = vec![&pretrain];
        ups.extend(rectify.values());
        let generate = StageId::new(GENERATE, &test, &ups);
        let evaluate = StageId::new(EVALUATE, &json!({"test": test, "embedders": cfg.embedders}), &ups);
        Self { augment, pretrain, invert, rectify, generate, evaluate }
    }

    pub fn stages(&self) -> Vec<&StageId> {
        let mut v = vec![&self.augment, &self.pretrain, &self.invert];
        v.extend(self.rectify.values());
        v.extend([&self.generate, &self.evaluate]);
        v
    }
}

pub struct Pipeline<'a> {
    pub cfg: &'a RunConfig,
    pub store: &'a Store,
    pub plan: Plan,
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> CliResult<()> {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn save_sheet(images: &[ImageTensor], cols: usize, path: &Path) -> CliResult<()> {
    if images.is_empty() {
        return Ok(());
    }
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    contact_sheet(images, cols)?.save_png(path)?;
    Ok(())
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a RunConfig, store: &'a Store) -> Self {
        Self { cfg, store, plan: Plan::new(cfg) }
    }

    fn exp(&self) -> &ExperimentConfig {
        &self.cfg.experiment
    }

    pub fn augment(&self) -> CliResult<StageRecord> {
        let e = self.exp();
        let (rec, _) = self.store.run_stage(&self.plan.augment, e.seed, &[], |out| {
            let ds = e.training_dataset()?;
            ds.save(&out.join("dataset"))?;
            let mut sheet = Vec::new();
            for s in &ds.subjects {
                sheet.push(s.images[0].clone());
                for a in &ds.artifacts {
                    sheet.push(ds.subset(&s.subject_id, &a.artifact_id)?.images[0].clone());
                }
            }
            save_sheet(&sheet, 1 + ds.artifacts.len(), &out.join("sheet.png"))
        })?;
        Ok(rec)
    }

    pub fn pretrain(&self) -> CliResult<StageRecord> {
        let e = self.exp();
        let (rec, _) = self.store.run_stage(&self.plan.pretrain, e.pretrain.seed, &[], |out| {
            let every = (e.pretrain.steps / 20).max(1);
            let mut losses = Vec::with_capacity(e.pretrain.steps);
            let base = pretrain(&e.pretrain, &mut |step, loss| {
                losses.push(loss);
                if step % every == 0 || step + 1 == e.pretrain.steps {
                    tracing::info!(stage = PRETRAIN, step, loss, "progress");
                }
            })?;
            base.save(&out.join("base.ckpt"))?;
            write_csv(&out.join("losses.csv"), "step,loss", losses.iter().enumerate().map(|(i, l)| format!("{i},{l}")))?;
            let sched = base.schedule.build()?;
            let mut samples = Vec::new();
            for (i, shape) in blemish_core::corpus::SHAPES.iter().enumerate() {
                let color = blemish_core::corpus::COLORS[i % blemish_core::corpus::COLORS.len()].0;
                let tokens = base.vocab.tokenize(&format!("a photo of {color} {shape}"))?;
                let tokens = text::padded(&tokens, base.params.config.seq_len, base.vocab.pad_id())?;
                let y = text::encode(&base.params, &tokens, &SlotValues::new())?;
                let size = (e.generation.image_size, e.generation.image_size);
                samples.push(sample(&base.params, &base.autoencoder, &y, &sched, &e.generation.sampler, size, seed!(e.pretrain.seed, "preview", i))?);
            }
            save_sheet(&samples, 4, &out.join("samples.png"))
        })?;
        Ok(rec)
    }

    fn load_dataset(&self) -> CliResult<PairedDataset> {
        Ok(PairedDataset::load(&self.store.dir(&self.plan.augment).join("dataset"))?)
    }

    fn load_base(&self) -> CliResult<ModelCheckpoint> {
        Ok(ModelCheckpoint::load(&self.store.dir(&self.plan.pretrain).join("base.ckpt"))?)
    }

    pub fn invert(&self) -> CliResult<StageRecord> {
        let e = self.exp();
        let aug = self.store.require(&self.plan.augment, AUGMENT)?;
        let pre = self.store.require(&self.plan.pretrain, PRETRAIN)?;
        let (rec, _) = self.store.run_stage(&self.plan.invert, e.seed, &[&aug, &pre], |out| {
            let dataset = self.load_dataset()?;
            let base = self.load_base()?;
            let mut rows = Vec::new();
            let bank = build_embedding_bank(&dataset, &base, &e.bank_inversion, seed!(e.seed, "bank"), &mut |s, a, loss| {
                tracing::info!(stage = INVERT, subject = s, artifact = a, loss, "inverted");
                rows.push(format!("{s},{a},{loss}"));
            })?;
            bank.save(&out.join("bank"))?;
            write_csv(&out.join("losses.csv"), "subject,artifact,final_loss", rows.into_iter())
        })?;
        Ok(rec)
    }

    pub fn rectify(&self, variant: Variant) -> CliResult<StageRecord> {
        let e = self.exp();
        let id = self.plan.rectify.get(&variant).ok_or_else(|| CliError::Config(format!("variant {variant} is not listed in experiment.variants")))?;
        let aug = self.store.require(&self.plan.augment, AUGMENT)?;
        let pre = self.store.require(&self.plan.pretrain, PRETRAIN)?;
        let inv = self.store.require(&self.plan.invert, INVERT)?;
        let rcfg = e.rectify_config(variant);
        let (rec, _) = self.store.run_stage(id, rcfg.seed, &[&aug, &pre, &inv], |out| {
            let dataset = self.load_dataset()?;
            let base = self.load_base()?;
            let bank = EmbeddingBank::load(&self.store.dir(&self.plan.invert).join("bank"))?;
            let every = (rcfg.steps / 20).max(1);
            let outcome = rectify_train(&rcfg, &base, &dataset, &bank, &mut |step, loss| {
                if step % every == 0 || step + 1 == rcfg.steps {
                    tracing::info!(stage = RECTIFY, variant = variant.name(), step, loss, "progress");
                }
            })?;
            outcome.checkpoint.save(&out.join("model.ckpt"))?;
            if let Some(phi) = &outcome.phi {
                phi.save(out, "phi")?;
            }
            write_csv(&out.join("losses.csv"), "step,loss", outcome.losses.iter().enumerate().map(|(i, l)| format!("{i},{l}")))?;
            let training = json!({
                "variant": variant.name(),
                "seed": rcfg.seed,
                "config": rcfg,
                "dataset_hash": json_hash(&aug.outputs),
                "bank_hash": json_hash(&inv.outputs),
                "base_hash": base.params.hash(),
            });
            fs::write(out.join("training.json"), serde_json::to_vec_pretty(&training)?)?;
            Ok(())
        })?;
        Ok(rec)
    }

    fn methods_input(&self) -> CliResult<(ModelCheckpoint, Vec<(String, ModelCheckpoint)>, Vec<StageRecord>)> {
        let mut recs = vec![self.store.require(&self.plan.pretrain, PRETRAIN)?];
        let base = self.load_base()?;
        let mut models = Vec::new();
        for (v, id) in &self.plan.rectify {
            recs.push(self.store.require(id, RECTIFY)?);
            models.push((method_tag(*v), ModelCheckpoint::load(&self.store.dir(id).join("model.ckpt"))?));
        }
        Ok((base, models, recs))
    }

    pub fn generate(&self) -> CliResult<StageRecord> {
        let e = self.exp();
        let (base, models, recs) = self.methods_input()?;
        let ups: Vec<&StageRecord> = recs.iter().collect();
        let (rec, _) = self.store.run_stage(&self.plan.generate, e.seed, &ups, |out| {
            let mut methods = vec![Method { tag: VANILLA_TAG.into(), model: &base }];
            methods.extend(models.iter().map(|(t, m)| Method { tag: t.clone(), model: m }));
            let cases = e.test_cases()?;
            let bench = e.benchmark_config();
            let mut failures = Vec::new();
            for case in ordered_cases(&cases) {
                tracing::info!(stage = GENERATE, case = %case.id(), "generating");
                for (m, gens) in methods.iter().zip(generate_case(case, &base, &methods, &bench)) {
                    let dir = out.join(&m.tag).join(case.id());
                    match gens {
                        Ok(gens) => {
                            let mut sheet = Vec::new();
                            for (ti, g) in gens.iter().enumerate() {
                                for (k, img) in g.images.iter().enumerate() {
                                    fs::create_dir_all(&dir)?;
                                    img.save_png(&dir.join(format!("p{ti}-s{k}.png")))?;
                                }
                                sheet.extend(g.images.iter().cloned());
                            }
                            save_sheet(&sheet, e.generation.samples_per_prompt, &out.join("sheets").join(&m.tag).join(format!("{}.png", case.id())))?;
                        }
                        Err(err) => failures.push(json!({"method": m.tag, "case": case.id(), "error": err.to_string()})),
                    }
                }
            }
            fs::write(out.join("failures.json"), serde_json::to_vec_pretty(&failures)?)?;
            Ok(())
        })?;
        Ok(rec)
    }

    pub fn evaluate(&self) -> CliResult<(StageRecord, Vec<MetricReport>)> {
        let e = self.exp();
        let (base, models, recs) = self.methods_input()?;
        let ups: Vec<&StageRecord> = recs.iter().collect();
        let (rec, _) = self.store.run_stage(&self.plan.evaluate, e.seed, &ups, |out| {
            let mut methods = vec![Method { tag: VANILLA_TAG.into(), model: &base }];
            methods.extend(models.iter().map(|(t, m)| Method { tag: t.clone(), model: m }));
            let oracle = OracleEmbedder::default();
            let externals: Vec<_> = self.cfg.embedders.iter().map(|s| s.build()).collect();
            let mut embedders: Vec<&dyn FeatureEmbedder> = vec![&oracle];
            embedders.extend(externals.iter().map(|x| x as &dyn FeatureEmbedder));
            let mut keep = BTreeMap::new();
            let reports = run_benchmark(&e.test_cases()?, &base, &methods, &e.benchmark_config(), &embedders, Some(&mut keep))?;
            fs::write(out.join("report.json"), serde_json::to_vec_pretty(&reports)?)?;
            fs::write(out.join("table.txt"), render_table(&reports))?;
            for (tag, per_case) in &keep {
                for (case, gens) in per_case {
                    let images: Vec<ImageTensor> = gens.iter().flat_map(|(_, ims)| ims.iter().cloned()).collect();
                    save_sheet(&images, e.generation.samples_per_prompt, &out.join("sheets").join(tag).join(format!("{case}.png")))?;
                }
            }
            Ok(())
        })?;
        let reports: Vec<MetricReport> = serde_json::from_slice(&fs::read(self.store.dir(&self.plan.evaluate).join("report.json"))?)?;
        Ok((rec, reports))
    }

    /// Every stage in order, then the benchmark.
    pub fn run_all(&self) -> CliResult<(StageRecord, Vec<MetricReport>)> {
        self.augment()?;
        self.pretrain()?;
        self.invert()?;
        for v in self.plan.rectify.keys() {
            self.rectify(*v)?;
        }
        self.evaluate()
    }

    /// One line per stage: label and whether verified outputs already exist.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        for id in self.plan.stages() {
            let state = if self.store.exists(id) { "stored" } else { "pending" };
            let _ = writeln!(s, "{}", json!({"stage": id.stage, "key": id.key, "config_hash": id.config_hash, "state": state}));
        }
        s
    }
}
