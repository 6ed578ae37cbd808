use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use boxseg::dataio::{self, load_masks, save_masks, write_json, CorpusManifest, MaskRecord};
use boxseg::efpn::{self, build_enhanced_fpn, ParamStore, Tensor};
use boxseg::eval::{evaluate, GroundTruthImage, GroundTruthSet};
use boxseg::grabcut::{self, GrabCutConfig};
use boxseg::pipeline::{self, compute_stats, segment_detection, validity, Branch, MaskOrigin, Validity};
use boxseg::types::{BBox, Image, MaskInstance};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::staging::Staged;
use crate::GlobalArgs;

const SMALL_BRANCH_SALT: u64 = 0x5EED_5A11;

/// Independent seed per (image, item), so results do not depend on
/// scheduling or on which other tasks exist.
pub fn task_seed(seed: u64, image: usize, item: usize) -> u64 {
    let mut z = seed
        ^ (image as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (item as u64).wrapping_add(1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs tasks on the current pool and returns their results in task order,
/// or the error of the earliest failing task.
fn run_ordered<T: Sync, R: Send>(tasks: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    tasks.par_iter().map(f).collect::<Vec<_>>().into_iter().collect()
}

fn open_manifest(g: &GlobalArgs) -> Result<CorpusManifest> {
    let path = g.manifest()?;
    dataio::load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn load_images(manifest: &CorpusManifest) -> Result<Vec<Image>> {
    run_ordered(&manifest.images, |r| {
        manifest
            .load_image(r)
            .with_context(|| format!("loading image {}", r.path.display()))
    })
}

fn read_masks(dir: &Path, what: &str) -> Result<Vec<MaskRecord>> {
    if !dir.join(dataio::SIDECAR_NAME).is_file() {
        bail!("no {what} at {} (missing {})", dir.display(), dataio::SIDECAR_NAME);
    }
    load_masks(dir).with_context(|| format!("reading {what} from {}", dir.display()))
}

fn raw_box(b: &BBox) -> [u32; 4] {
    [b.x_min(), b.y_min(), b.x_max(), b.y_max()]
}

pub fn generate(g: &GlobalArgs) -> Result<()> {
    let manifest = open_manifest(g)?;
    let images = load_images(&manifest)?;
    let tasks: Vec<(usize, usize)> = manifest
        .images
        .iter()
        .enumerate()
        .flat_map(|(i, r)| (0..r.instances.len()).map(move |k| (i, k)))
        .collect();
    let base = g.grabcut();
    let records = run_ordered(&tasks, |&(i, k)| {
        let record = &manifest.images[i];
        let bbox = record.instances[k].bbox;
        let config = GrabCutConfig {
            seed: task_seed(g.seed, i, k),
            ..base
        };
        let r = grabcut::run(&images[i], &bbox, &config)
            .with_context(|| format!("GrabCut on {} instance {k}", record.path.display()))?;
        info!(
            "{}",
            json!({"event": "grabcut", "image": record.stem(), "instance": k,
                   "iterations": r.iterations_run, "energy_trace": r.energy_trace})
        );
        Ok(MaskRecord {
            image: record.stem(),
            index: k,
            mask: r.mask,
            source_box: Some(bbox),
            validity: None,
        })
    })?;

    let staged = Staged::new(&g.out, "masks")?;
    save_masks(&records, staged.path())?;
    ensure!(load_masks(staged.path())?.len() == records.len(), "mask directory does not reload");
    let target = staged.commit()?;
    eprintln!(
        "generate: {} masks for {} images -> {}",
        records.len(),
        manifest.images.len(),
        target.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct PartitionEntry {
    file: String,
    image: String,
    index: usize,
    class: u32,
    validity: Validity,
    gt_box: [u32; 4],
    mask_box: Option<[u32; 4]>,
    box_iou: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PartitionReport {
    threshold: f64,
    total: usize,
    valid: usize,
    invalid: usize,
    instances: Vec<PartitionEntry>,
}

pub fn partition(g: &GlobalArgs, masks: Option<PathBuf>) -> Result<()> {
    let dir = masks.unwrap_or_else(|| g.out.join("masks"));
    let records = read_masks(&dir, "generated masks")?;
    let mut valid = Vec::new();
    let mut invalid = Vec::new();
    let mut entries = Vec::with_capacity(records.len());
    for mut r in records {
        let gt = r
            .source_box
            .with_context(|| format!("{} has no source box in the sidecar", r.file_name()))?;
        let v = validity(&r.mask, &gt, g.validity_iou);
        let mask_box = r.mask.bbox();
        entries.push(PartitionEntry {
            file: r.file_name(),
            image: r.image.clone(),
            index: r.index,
            class: r.mask.class_id(),
            validity: v,
            gt_box: raw_box(&gt),
            mask_box: mask_box.as_ref().map(raw_box),
            box_iou: mask_box.map_or(0.0, |b| b.iou(&gt)),
        });
        r.validity = Some(v);
        match v {
            Validity::Valid => valid.push(r),
            Validity::Invalid => invalid.push(r),
        }
    }

    let staged = Staged::new(&g.out, "partition")?;
    save_masks(&valid, &staged.path().join("valid"))?;
    save_masks(&invalid, &staged.path().join("invalid"))?;
    let report = PartitionReport {
        threshold: g.validity_iou,
        total: entries.len(),
        valid: valid.len(),
        invalid: invalid.len(),
        instances: entries,
    };
    write_json(&staged.path().join("partition.json"), &report)?;
    let target = staged.commit()?;
    eprintln!(
        "partition: {} valid, {} invalid at IoU {} -> {}",
        report.valid,
        report.invalid,
        report.threshold,
        target.display()
    );
    Ok(())
}

pub fn stats(g: &GlobalArgs, partition_dir: Option<PathBuf>) -> Result<()> {
    let dir = partition_dir.unwrap_or_else(|| g.out.join("partition"));
    let report_path = dir.join("partition.json");
    ensure!(report_path.is_file(), "no partition at {} (run `partition` first)", dir.display());
    let report: PartitionReport = dataio::read_json(&report_path)?;
    let mut pairs: Vec<(MaskInstance, BBox)> = Vec::with_capacity(report.total);
    for side in ["valid", "invalid"] {
        for r in read_masks(&dir.join(side), "partitioned masks")? {
            let gt = r
                .source_box
                .with_context(|| format!("{} has no source box", r.file_name()))?;
            pairs.push((r.mask, gt));
        }
    }
    ensure!(pairs.len() == report.total, "partition.json lists {} instances, directories hold {}", report.total, pairs.len());
    let s = compute_stats(&pairs, report.threshold, g.size_area);
    ensure!(s.invalid_count == report.invalid, "invalid count disagrees with partition.json");

    let staged = Staged::new(&g.out, "stats")?;
    write_json(&staged.path().join("stats.json"), &s)?;
    let csv = staged.path().join("stats_histogram.csv");
    fs::write(&csv, s.histogram_csv()).with_context(|| format!("writing {}", csv.display()))?;
    let target = staged.commit()?;
    eprintln!(
        "stats: {}/{} invalid; small share of invalid {:.4}; invalid among small {:.4}, among large {:.4} -> {}",
        s.invalid_count,
        s.total_instances,
        s.small_invalid_over_invalid,
        s.invalid_over_small,
        s.invalid_over_large,
        target.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct OriginEntry {
    file: String,
    origin: MaskOrigin,
}

fn run_small_branch(g: &GlobalArgs) -> Result<(Vec<MaskRecord>, Vec<OriginEntry>)> {
    let manifest = open_manifest(g)?;
    let images = load_images(&manifest)?;
    let tasks: Vec<(usize, usize)> = manifest
        .images
        .iter()
        .enumerate()
        .flat_map(|(i, r)| (0..r.detections.len()).map(move |d| (i, d)))
        .collect();
    let base = g.grabcut();
    let out = run_ordered(&tasks, |&(i, d)| {
        let record = &manifest.images[i];
        let det = &record.detections[d];
        let config = GrabCutConfig {
            seed: task_seed(g.seed ^ SMALL_BRANCH_SALT, i, d),
            ..base
        };
        let (mask, origin) = segment_detection(&images[i], det, &config, g.validity_iou)
            .with_context(|| format!("small branch on {} detection {d}", record.path.display()))?;
        let rec = MaskRecord {
            image: record.stem(),
            index: d,
            mask,
            source_box: Some(det.bbox),
            validity: None,
        };
        let origin = OriginEntry {
            file: rec.file_name(),
            origin,
        };
        Ok((rec, origin))
    })?;
    Ok(out.into_iter().unzip())
}

#[derive(Debug, Serialize)]
struct RoutingEntry {
    file: String,
    image: String,
    index: usize,
    class: u32,
    score: f64,
    branch: Branch,
    source_file: String,
}

pub fn fuse(g: &GlobalArgs, large: Option<PathBuf>, small: Option<PathBuf>) -> Result<()> {
    let large_dir = large.unwrap_or_else(|| g.out.join("partition").join("valid"));
    let large = read_masks(&large_dir, "large-branch masks")?;
    let mut small_stage = None;
    let small = match small {
        Some(dir) => read_masks(&dir, "small-branch masks")?,
        None => {
            let (records, origins) = run_small_branch(g)?;
            let staged = Staged::new(&g.out, "small_branch")?;
            save_masks(&records, staged.path())?;
            write_json(&staged.path().join("origins.json"), &origins)?;
            small_stage = Some(staged);
            records
        }
    };

    let mut by_image: BTreeMap<&str, (Vec<&MaskRecord>, Vec<&MaskRecord>)> = BTreeMap::new();
    for r in &large {
        by_image.entry(&r.image).or_default().0.push(r);
    }
    for r in &small {
        by_image.entry(&r.image).or_default().1.push(r);
    }
    let mut fused = Vec::new();
    let mut routing = Vec::new();
    for (image, (l, s)) in &by_image {
        let lm: Vec<MaskInstance> = l.iter().map(|r| r.mask.clone()).collect();
        let sm: Vec<MaskInstance> = s.iter().map(|r| r.mask.clone()).collect();
        for (k, f) in pipeline::fuse(&lm, &sm, g.size_area).into_iter().enumerate() {
            let source = match f.branch {
                Branch::Large => l[f.source_index],
                Branch::Small => s[f.source_index],
            };
            let rec = MaskRecord {
                image: image.to_string(),
                index: k,
                mask: f.mask,
                source_box: source.source_box,
                validity: None,
            };
            routing.push(RoutingEntry {
                file: rec.file_name(),
                image: rec.image.clone(),
                index: k,
                class: rec.mask.class_id(),
                score: rec.mask.score(),
                branch: f.branch,
                source_file: source.file_name(),
            });
            fused.push(rec);
        }
    }

    let staged = Staged::new(&g.out, "fused")?;
    save_masks(&fused, staged.path())?;
    write_json(
        &staged.path().join("routing.json"),
        &json!({"size_area": g.size_area, "instances": routing}),
    )?;
    if let Some(s) = small_stage {
        s.commit()?;
    }
    let target = staged.commit()?;
    let from_small = routing.iter().filter(|r| r.branch == Branch::Small).count();
    eprintln!(
        "fuse: {} masks ({} large-branch, {from_small} small-branch) -> {}",
        fused.len(),
        fused.len() - from_small,
        target.display()
    );
    Ok(())
}

/// Prediction records grouped by manifest image, in sidecar order.
fn group_by_image(manifest: &CorpusManifest, records: Vec<MaskRecord>) -> Result<Vec<Vec<MaskInstance>>> {
    let index: HashMap<String, usize> = manifest.images.iter().enumerate().map(|(i, r)| (r.stem(), i)).collect();
    let mut grouped = vec![Vec::new(); manifest.images.len()];
    for r in records {
        let i = *index
            .get(&r.image)
            .with_context(|| format!("{} refers to image `{}`, which is not in the manifest", r.file_name(), r.image))?;
        grouped[i].push(r.mask);
    }
    Ok(grouped)
}

pub fn eval(g: &GlobalArgs, pred: Option<PathBuf>) -> Result<()> {
    let manifest = open_manifest(g)?;
    let dir = pred.unwrap_or_else(|| g.out.join("fused"));
    let predictions = group_by_image(&manifest, read_masks(&dir, "predictions")?)?;
    let gt = (0..manifest.images.len())
        .map(|i| {
            let r = &manifest.images[i];
            Ok(GroundTruthImage {
                width: r.width,
                height: r.height,
                instances: manifest
                    .load_gt_masks(i)
                    .with_context(|| format!("ground-truth masks for {}", r.path.display()))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let result = evaluate(&predictions, &GroundTruthSet::new(gt)?)?;

    let staged = Staged::new(&g.out, "eval")?;
    write_json(&staged.path().join("eval.json"), &result)?;
    staged.commit()?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    eprintln!(
        "eval: mAP@0.5 {:.4}  mAP@0.75 {:.4}  ABO {:.4}",
        result.map_50, result.map_75, result.abo
    );
    Ok(())
}

pub fn efpn_check(
    g: &GlobalArgs,
    side: usize,
    forward_side: usize,
    backbone_channels: &[usize],
    out_channels: usize,
    weights: Option<PathBuf>,
) -> Result<()> {
    let channels: [usize; 4] = backbone_channels
        .try_into()
        .map_err(|_| anyhow::anyhow!("--backbone-channels needs 4 values, got {}", backbone_channels.len()))?;
    let graph = build_enhanced_fpn(channels, out_channels)?;
    let report = graph.report(side, side)?;
    let strides: Vec<usize> = report.outputs.iter().map(|l| l.stride).collect();
    ensure!(
        strides == efpn::LEVEL_STRIDES,
        "output strides {strides:?} differ from {:?}",
        efpn::LEVEL_STRIDES
    );

    let params = match &weights {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            ParamStore::from_le_f32_bytes(&graph, &bytes)?
        }
        None => ParamStore::random(&graph, g.seed),
    };
    let shapes = graph.input_shapes_for_image(forward_side, forward_side);
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let inputs: [Tensor; 4] = std::array::from_fn(|i| Tensor::random(shapes[i], &mut rng));
    let outputs = efpn::forward(&graph, &inputs, &params)?;
    let forward: Vec<_> = outputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let n = t.data().len() as f64;
            json!({
                "level": format!("P{}", i + 2),
                "shape": t.shape(),
                "stride": forward_side / t.height(),
                "mean": t.data().iter().sum::<f64>() / n,
                "max_abs": t.data().iter().fold(0.0f64, |m, v| m.max(v.abs())),
            })
        })
        .collect();
    let doc = json!({
        "graph": report,
        "stride_table": report.outputs.iter().map(|l| json!({"level": l.level, "stride": l.stride})).collect::<Vec<_>>(),
        "forward": {"side": forward_side, "weights": if weights.is_some() { "file" } else { "random" }, "outputs": forward},
    });

    let staged = Staged::new(&g.out, "efpn")?;
    write_json(&staged.path().join("graph.json"), &doc)?;
    staged.commit()?;
    println!("{}", serde_json::to_string_pretty(&doc)?);
    for l in &report.outputs {
        eprintln!(
            "{}  stride {:>2}  {}x{}x{}",
            l.level, l.stride, l.shape.channels, l.shape.height, l.shape.width
        );
    }
    eprintln!("parameters: {}", report.total_parameters);
    Ok(())
}

pub fn render(g: &GlobalArgs, pred: Option<PathBuf>) -> Result<()> {
    let manifest = open_manifest(g)?;
    let dir = pred.unwrap_or_else(|| g.out.join("fused"));
    let grouped = group_by_image(&manifest, read_masks(&dir, "masks")?)?;
    let images = load_images(&manifest)?;
    let staged = Staged::new(&g.out, "overlays")?;
    let tasks: Vec<usize> = (0..images.len()).collect();
    run_ordered(&tasks, |&i| {
        let overlay = dataio::render_overlay(&images[i], &grouped[i]);
        let path = staged.path().join(format!("{}.png", manifest.images[i].stem()));
        dataio::save_image_png(&overlay, &path)?;
        Ok(())
    })?;
    let target = staged.commit()?;
    eprintln!("render: {} overlays -> {}", images.len(), target.display());
    Ok(())
}
