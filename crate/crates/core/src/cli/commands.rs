//! Implementations of the subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::config::{Layout, RunConfig};
use super::CliError;
use crate::backbone::{finetune as finetune_backbone, pretrain_builtin, BackboneError, BackboneHandle, BackboneKind};
use crate::checkpoint::{small_backbone_to_checkpoint, Checkpoint, HeadCheckpoint, Tensor};
use crate::dataset::{
    benchmark_plate_spec, generate_synthetic, stratified_split, BlobTruth, DatasetManifest, ImageSource,
    ManifestSource, Split,
};
use crate::fsutil::write_atomic;
use crate::imaging::detect;
use crate::imaging::io::{read_plate, specimen_file_name, to_json_lines, write_png, DetectionRecord};
use crate::nn::{self, argmax, ClassifierParams, FeatureSet, FeatureSplits};
use crate::uncertainty::{
    histogram_csv, mc_predict, pass_accuracies, report_csv, report_json, report_rows, summarize, vote_accuracy, Flag,
};
use crate::{seed, CLASS_NAMES, NUM_CLASSES};

const FEATURE_CACHE_KIND: &str = "feature_cache";

fn require(path: &Path, what: &str, hint: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "{what} {} does not exist; {hint}",
            path.display()
        )))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes()).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

fn is_png(path: &Path) -> bool {
    path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Runtime(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

/// Ground truth of one synthetic plate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPlate {
    pub plate_id: String,
    pub class: String,
    /// Plate image relative to the plate directory.
    pub file: String,
    pub blobs: Vec<BlobTruth>,
}

pub fn synth(cfg: &RunConfig, layout: &Layout) -> Result<(), CliError> {
    let per_class = cfg.synth.plates_per_class;
    let jobs: Vec<(usize, usize)> = (0..NUM_CLASSES)
        .flat_map(|c| (0..per_class).map(move |p| (c, p)))
        .collect();
    let plates = jobs
        .par_iter()
        .map(|&(class, p)| {
            let index = (class * per_class + p) as u64;
            let id = format!("{}_{p:03}", CLASS_NAMES[class]);
            let spec = benchmark_plate_spec(&id, &[class], &cfg.synth, cfg.seed, index);
            let (plate, blobs) = generate_synthetic(&spec, seed::derive(cfg.seed, "synth", &[index]))?;
            let file = format!("{}/{id}.png", CLASS_NAMES[class]);
            write_png(&layout.plates.join(&file), plate.pixels())?;
            Ok(GroundTruthPlate {
                plate_id: id,
                class: CLASS_NAMES[class].to_string(),
                file,
                blobs,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    write_json(&layout.plates.join("ground_truth.json"), &plates)?;
    let min_area = cfg.detection.min_area;
    let all = plates.iter().flat_map(|p| &p.blobs);
    let specimens = all.clone().filter(|b| b.area >= min_area).count();
    println!(
        "wrote {} plates to {}: {specimens} specimens of at least {min_area} px, {} smaller debris",
        plates.len(),
        layout.plates.display(),
        all.count() - specimens
    );
    Ok(())
}

pub fn extract(cfg: &RunConfig, layout: &Layout) -> Result<(), CliError> {
    if !layout.plates.is_dir() {
        return Err(CliError::Validation(format!(
            "plate directory {} does not exist",
            layout.plates.display()
        )));
    }
    // Plates directly in the directory, or one level down in class folders.
    let mut plates: Vec<(String, PathBuf)> = Vec::new();
    for entry in sorted_entries(&layout.plates)? {
        if entry.is_dir() {
            let group = entry
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            for inner in sorted_entries(&entry)? {
                if is_png(&inner) {
                    plates.push((group.clone(), inner));
                }
            }
        } else if is_png(&entry) {
            plates.push((String::new(), entry));
        }
    }
    if plates.is_empty() {
        log::warn!("no PNG plates under {}", layout.plates.display());
        println!("processed 0 plates, extracted 0 specimens");
        return Ok(());
    }
    let results: Vec<Result<Vec<DetectionRecord>, String>> = plates
        .par_iter()
        .map(|(group, path)| {
            let work = || -> Result<Vec<DetectionRecord>, CliError> {
                let plate = read_plate(path)?;
                let found = detect(&plate, &cfg.detection)?;
                let mut records = Vec::with_capacity(found.len());
                for (i, d) in found.iter().enumerate() {
                    let name = specimen_file_name(&plate.id, i);
                    let rel = if group.is_empty() {
                        name
                    } else {
                        format!("{group}/{name}")
                    };
                    write_png(&layout.specimens.join(&rel), d.specimen.pixels())?;
                    records.push(DetectionRecord::new(d, i, rel));
                }
                Ok(records)
            };
            work().map_err(|e| format!("{}: {e}", path.display()))
        })
        .collect();
    let mut records = Vec::new();
    let mut failed = 0;
    for r in results {
        match r {
            Ok(mut v) => records.append(&mut v),
            Err(e) => {
                log::warn!("skipping plate {e}");
                failed += 1;
            }
        }
    }
    if failed == plates.len() {
        return Err(CliError::Runtime(format!("all {failed} plates failed to process")));
    }
    write_text(&layout.specimens.join("detections.jsonl"), &to_json_lines(&records)?)?;
    println!(
        "processed {} of {} plates, extracted {} specimens to {}",
        plates.len() - failed,
        plates.len(),
        records.len(),
        layout.specimens.display()
    );
    Ok(())
}

fn relative_root(root: &Path, manifest: &Path) -> PathBuf {
    let parent = manifest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    match (
        root.canonicalize(),
        std::fs::create_dir_all(parent).and_then(|_| parent.canonicalize()),
    ) {
        (Ok(r), Ok(p)) => match r.strip_prefix(&p) {
            Ok(rel) => rel.to_path_buf(),
            Err(_) => r,
        },
        _ => root.to_path_buf(),
    }
}

pub fn split(cfg: &RunConfig, layout: &Layout) -> Result<(), CliError> {
    require(&layout.specimens, "specimen directory", "run `extract` first")?;
    let ingested = DatasetManifest::ingest(&layout.specimens)?;
    if ingested.records.is_empty() {
        return Err(CliError::Validation(format!(
            "no specimen crops in class folders under {}",
            layout.specimens.display()
        )));
    }
    let s = &cfg.split;
    let mut m = stratified_split(&ingested, (s.train, s.val, s.test), cfg.seed)?;
    m.root = relative_root(&layout.specimens, &layout.manifest);
    m.save(&layout.manifest)?;
    let mut table = String::new();
    let _ = writeln!(table, "{:<22}{:>7}{:>7}{:>7}", "class", "train", "val", "test");
    for c in &m.class_names {
        let _ = writeln!(
            table,
            "{c:<22}{:>7}{:>7}{:>7}",
            m.count(Split::Train, c),
            m.count(Split::Val, c),
            m.count(Split::Test, c)
        );
    }
    print!("{table}");
    println!(
        "wrote manifest of {} specimens to {}",
        m.records.len(),
        layout.manifest.display()
    );
    Ok(())
}

fn load_manifest(layout: &Layout) -> Result<DatasetManifest, CliError> {
    require(&layout.manifest, "manifest", "run `split` first")?;
    let mut m = DatasetManifest::load(&layout.manifest)?;
    if m.root.is_relative() {
        let parent = layout.manifest.parent().unwrap_or(Path::new(""));
        m.root = parent.join(&m.root);
    }
    if m.class_names != class_names() {
        return Err(CliError::Validation(format!(
            "manifest classes {:?} differ from {:?}",
            m.class_names, CLASS_NAMES
        )));
    }
    Ok(m)
}

fn unsupported_is_validation(e: BackboneError) -> CliError {
    match e {
        BackboneError::Unsupported(m) => CliError::Validation(m),
        other => other.into(),
    }
}

fn source(m: &DatasetManifest, split: Split) -> Result<ManifestSource, CliError> {
    Ok(crate::dataset::split_source(m, split)?)
}

/// Loads the configured backbone. The built-in kind is trained from scratch
/// and saved when `train_if_missing` is set and no checkpoint exists.
fn load_backbone(
    cfg: &RunConfig,
    layout: &Layout,
    m: &DatasetManifest,
    train_if_missing: bool,
) -> Result<BackboneHandle, CliError> {
    match cfg.backbone.kind {
        BackboneKind::PretrainedInterchange => {
            let path = Path::new(&cfg.backbone.model_path);
            require(path, "pretrained model", "set backbone.model_path")?;
            Ok(BackboneHandle::pretrained(path)?)
        }
        BackboneKind::BuiltinSmall if layout.backbone.exists() => {
            Ok(BackboneHandle::builtin_from_file(&layout.backbone)?)
        }
        BackboneKind::BuiltinSmall if train_if_missing => {
            eprintln!(
                "no backbone checkpoint at {}; training the built-in backbone",
                layout.backbone.display()
            );
            let train = source(m, Split::Train)?.into_memory()?;
            let val = source(m, Split::Val)?.into_memory()?;
            let (handle, _, report) = pretrain_builtin(
                &train,
                &val,
                NUM_CLASSES,
                &cfg.backbone.pretrain,
                &cfg.augment,
                seed::derive(cfg.seed, "backbone", &[]),
            )?;
            small_backbone_to_checkpoint(handle.net().expect("builtin"))?.save(&layout.backbone)?;
            write_json(&layout.file("backbone_report.json"), &report)?;
            println!(
                "trained built-in backbone: val accuracy {:.4}, saved to {}",
                report.best_val_accuracy,
                layout.backbone.display()
            );
            Ok(handle)
        }
        BackboneKind::BuiltinSmall => Err(CliError::Validation(format!(
            "backbone checkpoint {} does not exist; run `train` first",
            layout.backbone.display()
        ))),
    }
}

/// Extracted features on disk, keyed by the backbone content hash.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub dir: PathBuf,
}

fn split_digest(m: &DatasetManifest, split: Split) -> String {
    let mut h = Sha256::new();
    for i in m.indices(split) {
        let r = &m.records[i];
        h.update(r.path.as_bytes());
        h.update([0]);
        h.update(r.label.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

impl FeatureCache {
    pub fn new(layout: &Layout, handle: &BackboneHandle) -> Self {
        Self {
            dir: layout.out.join("features").join(&handle.hash()[..16]),
        }
    }

    pub fn path(&self, split: Split) -> PathBuf {
        self.dir.join(format!("{}.ckpt", split.name()))
    }

    fn load(&self, handle: &BackboneHandle, digest: &str, split: Split) -> Option<FeatureSet> {
        let ck = Checkpoint::load(&self.path(split)).ok()?;
        ck.expect_kind(FEATURE_CACHE_KIND).ok()?;
        let fresh = ck.meta.get("backbone_hash")?.as_str()? == handle.hash()
            && ck.meta.get("split_digest")?.as_str()? == digest;
        if !fresh {
            return None;
        }
        let x = ck.matrix("features").ok()?;
        let labels = ck.vector("labels").ok()?.iter().map(|&v| v as usize).collect();
        FeatureSet::new(x, labels).ok()
    }

    /// Cached features of `split`, extracting and storing them when absent or stale.
    pub fn features(&self, handle: &BackboneHandle, m: &DatasetManifest, split: Split) -> Result<FeatureSet, CliError> {
        let digest = split_digest(m, split);
        if let Some(set) = self.load(handle, &digest, split) {
            log::info!("using cached {split} features from {}", self.path(split).display());
            return Ok(set);
        }
        let src = source(m, split)?;
        eprintln!("extracting {} {split} features", src.len());
        let (x, labels) = handle.extract_source(&src)?;
        let ck = Checkpoint {
            kind: FEATURE_CACHE_KIND.into(),
            meta: json!({
                "backbone_hash": handle.hash(),
                "backbone_kind": handle.kind(),
                "split": split,
                "split_digest": digest,
                "feature_order": "row-major (height, width, channel)",
            }),
            tensors: vec![
                Tensor::new("features", vec![x.nrows(), x.ncols()], x.iter().copied().collect())?,
                Tensor::new("labels", vec![labels.len()], labels.iter().map(|&l| l as f64).collect())?,
            ],
        };
        ck.save(&self.path(split))?;
        Ok(FeatureSet::new(x, labels)?)
    }
}

/// Features of `split`, or `None` when the manifest assigns it no specimens.
fn optional_split(
    cache: &FeatureCache,
    handle: &BackboneHandle,
    m: &DatasetManifest,
    split: Split,
) -> Result<Option<FeatureSet>, CliError> {
    if m.indices(split).is_empty() {
        return Ok(None);
    }
    cache.features(handle, m, split).map(Some)
}

fn print_report(name: &str, r: &nn::TrainReport) {
    println!(
        "{name}: best val accuracy {:.4} at epoch {} (start {:.4}, stopped after {})",
        r.best_val_accuracy, r.best_epoch, r.initial_val_accuracy, r.stopped_epoch
    );
    if let Some(t) = r.test_accuracy {
        println!("{name}: test accuracy {t:.4}");
    }
}

pub fn train(cfg: &RunConfig, layout: &Layout) -> Result<(), CliError> {
    let m = load_manifest(layout)?;
    let handle = load_backbone(cfg, layout, &m, true)?;
    let cache = FeatureCache::new(layout, &handle);
    let test = optional_split(&cache, &handle, &m, Split::Test)?;
    let data = FeatureSplits {
        train: cache.features(&handle, &m, Split::Train)?,
        val: cache.features(&handle, &m, Split::Val)?,
        test,
    };
    let mut head = ClassifierParams::new(
        handle.feature_len(),
        &cfg.head.hidden,
        NUM_CLASSES,
        cfg.head.dropout_rate,
        seed::derive(cfg.seed, "head", &[]),
    )?;
    let report = nn::train(&mut head, &data, &cfg.train, seed::derive(cfg.seed, "train", &[]))?;
    HeadCheckpoint {
        params: head,
        class_names: m.class_names.clone(),
        backbone_hash: handle.hash().to_string(),
    }
    .to_checkpoint()?
    .save(&layout.head)?;
    write_json(&layout.file("train_report.json"), &report)?;
    print_report("train", &report);
    println!("saved head to {}", layout.head.display());
    Ok(())
}

pub fn grid_search(cfg: &RunConfig, layout: &Layout) -> Result<(), CliError> {
    let m = load_manifest(layout)?;
    let handle = load_backbone(cfg, layout, &m, true)?;
    let cache = FeatureCache::new(layout, &handle);
    let data = FeatureSplits {
        train: cache.features(&handle, &m, Split::Train)?,
        val: cache.features(&handle, &m, Split::Val)?,
        test: None,
    };
    let results = nn::grid_search(
        &cfg.grid,
        &data,
        &cfg.train,
        NUM_CLASSES,
        seed::derive(cfg.seed, "grid_search", &[]),
    )?;
    write_json(&layout.file("grid_report.json"), &results)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "rank",
        "index",
        "hidden1",
        "hidden2",
        "dropout_rate",
        "optimizer",
        "learning_rate",
        "best_val_accuracy",
        "param_count",
    ])
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    for (rank, r) in results.iter().enumerate() {
        w.write_record([
            (rank + 1).to_string(),
            r.index.to_string(),
            r.entry.hidden.0.to_string(),
            r.entry.hidden.1.to_string(),
            r.entry.dropout_rate.to_string(),
            r.entry.optimizer.name().to_string(),
            r.entry.learning_rate.to_string(),
            r.best_val_accuracy.to_string(),
            r.param_count.to_string(),
        ])
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    write_atomic(&layout.file("grid_report.csv"), &bytes)?;
    for (rank, r) in results.iter().take(5).enumerate() {
        println!(
            "#{} hidden {:?} dropout {} {} lr {}: val accuracy {:.4}",
            rank + 1,
            r.entry.hidden,
            r.entry.dropout_rate,
            r.entry.optimizer.name(),
            r.entry.learning_rate,
            r.best_val_accuracy
        );
    }
    println!("ranked {} configurations", results.len());
    Ok(())
}

/// Head checkpoint with its class names and backbone checked against the run.
fn load_head(layout: &Layout, m: &DatasetManifest, handle: &BackboneHandle) -> Result<HeadCheckpoint, CliError> {
    require(&layout.head, "head checkpoint", "run `train` first")?;
    let head = HeadCheckpoint::from_checkpoint(&Checkpoint::load(&layout.head)?)?;
    if head.class_names != m.class_names {
        return Err(CliError::Validation(format!(
            "checkpoint classes {:?} do not match manifest classes {:?}",
            head.class_names, m.class_names
        )));
    }
    if head.backbone_hash != handle.hash() {
        return Err(CliError::Validation(format!(
            "head {} was trained on backbone {}, but the configured backbone is {}",
            layout.head.display(),
            &head.backbone_hash[..head.backbone_hash.len().min(16)],
            &handle.hash()[..16]
        )));
    }
    Ok(head)
}

pub fn finetune(cfg: &RunConfig, layout: &Layout) -> Result<(), CliError> {
    let m = load_manifest(layout)?;
    if cfg.backbone.kind == BackboneKind::PretrainedInterchange {
        return Err(CliError::Validation(
            "fine-tuning needs the built-in backbone; the pretrained one is inference-only".into(),
        ));
    }
    let mut handle = load_backbone(cfg, layout, &m, false)?;
    let mut head = load_head(layout, &m, &handle)?;
    let train = source(&m, Split::Train)?.into_memory()?;
    let val = source(&m, Split::Val)?.into_memory()?;
    let mut report = finetune_backbone(
        &mut handle,
        &mut head.params,
        &train,
        &val,
        &cfg.finetune,
        &cfg.augment,
        seed::derive(cfg.seed, "finetune", &[]),
    )
    .map_err(unsupported_is_validation)?;
    let cache = FeatureCache::new(layout, &handle);
    if let Some(test) = optional_split(&cache, &handle, &m, Split::Test)? {
        report.test_accuracy = Some(nn::accuracy(&head.params, &test)?);
    }
    let backbone_path = layout.file("finetuned_backbone.ckpt");
    let head_path = layout.file("finetuned_head.ckpt");
    small_backbone_to_checkpoint(handle.net().expect("builtin"))?.save(&backbone_path)?;
    head.backbone_hash = handle.hash().to_string();
    head.to_checkpoint()?.save(&head_path)?;
    write_json(&layout.file("finetune_report.json"), &report)?;
    print_report("finetune", &report);
    println!("saved {} and {}", backbone_path.display(), head_path.display());
    Ok(())
}

fn specimen_ids(m: &DatasetManifest, split: Split) -> Vec<String> {
    m.indices(split)
        .into_iter()
        .map(|i| m.records[i].path.clone())
        .collect()
}

pub fn evaluate(cfg: &RunConfig, layout: &Layout) -> Result<(), CliError> {
    let m = load_manifest(layout)?;
    let handle = load_backbone(cfg, layout, &m, false)?;
    let head = load_head(layout, &m, &handle)?;
    let split = cfg.mc.split;
    let set = FeatureCache::new(layout, &handle).features(&handle, &m, split)?;
    let probs = nn::predict(&head.params, &set.features)?;
    let mut confusion = vec![vec![0usize; NUM_CLASSES]; NUM_CLASSES];
    for (row, &label) in probs.outer_iter().zip(&set.labels) {
        confusion[label][argmax(row)] += 1;
    }
    let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / set.len() as f64;
    write_json(
        &layout.file(&format!("evaluation_{split}.json")),
        &json!({
            "split": split,
            "specimens": set.len(),
            "accuracy": accuracy,
            "class_names": m.class_names,
            "confusion_matrix": confusion,
            "confusion_layout": "rows are true classes, columns are predicted classes",
        }),
    )?;
    println!("{split} accuracy {accuracy:.4} ({correct} of {})", set.len());
    let mut table = format!("{:<22}", "true \\ predicted");
    for c in 0..NUM_CLASSES {
        let _ = write!(table, "{:>8}", format!("[{c}]"));
    }
    table.push('\n');
    for (c, row) in confusion.iter().enumerate() {
        let _ = write!(table, "{:<22}", format!("[{c}] {}", m.class_names[c]));
        for v in row {
            let _ = write!(table, "{v:>8}");
        }
        table.push('\n');
    }
    print!("{table}");
    Ok(())
}

pub fn mc_dropout(cfg: &RunConfig, layout: &Layout) -> Result<(), CliError> {
    let m = load_manifest(layout)?;
    let handle = load_backbone(cfg, layout, &m, false)?;
    let head = load_head(layout, &m, &handle)?;
    let split = cfg.mc.split;
    let set = FeatureCache::new(layout, &handle).features(&handle, &m, split)?;
    let run = mc_predict(
        &head.params,
        &set.features,
        cfg.mc.passes,
        seed::derive(cfg.seed, "mc_dropout", &[]),
    )?;
    let mut summary = summarize(&run);
    summary.apply_flags(Some(&set.labels), &cfg.mc.thresholds());
    let ids = specimen_ids(&m, split);
    let names = m.class_names.clone();
    let rows = report_rows(&summary, &ids, Some(&set.labels), &names);
    write_text(&layout.file("mc_report.csv"), &report_csv(&rows, &names)?)?;
    write_text(&layout.file("mc_report.json"), &report_json(&rows)?)?;
    write_text(
        &layout.file("mc_histograms.csv"),
        &histogram_csv(&run, &summary, &ids, &names)?,
    )?;
    let passes = pass_accuracies(&run, &set.labels);
    let mean_pass = passes.iter().sum::<f64>() / passes.len() as f64;
    let count = |f: Flag| summary.flags.iter().filter(|&&x| x == f).count();
    let votes = vote_accuracy(&summary, &set.labels);
    write_json(
        &layout.file("mc_summary.json"),
        &json!({
            "split": split,
            "specimens": set.len(),
            "passes": cfg.mc.passes,
            "vote_accuracy": votes,
            "mean_pass_accuracy": mean_pass,
            "min_pass_accuracy": passes.iter().copied().fold(f64::INFINITY, f64::min),
            "max_pass_accuracy": passes.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            "uncertain": count(Flag::Uncertain),
            "confident_wrong": count(Flag::ConfidentWrong),
            "thresholds": cfg.mc.thresholds(),
        }),
    )?;
    println!(
        "{} passes over {} {split} specimens: vote accuracy {votes:.4}, mean single-pass accuracy {mean_pass:.4}",
        cfg.mc.passes,
        set.len()
    );
    println!(
        "flagged {} uncertain and {} confident-wrong; reports in {}",
        count(Flag::Uncertain),
        count(Flag::ConfidentWrong),
        layout.out.display()
    );
    Ok(())
}
