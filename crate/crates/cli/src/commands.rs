use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use candle_core::DType;
use partigen::data::{
    load_pair, load_sample, synth, DatasetLayout, DatasetManifest, PairTensors, PairedSample, SampleConditioning, Split,
};
use partigen::image::{ImagePlane, Mask};
use partigen::metrics::{backend_by_name, evaluate};
use partigen::partition::{heatmap_composite, split_background_with_fill, split_foreground_with_fill};
use partigen::training::{latest_checkpoint, Batch, Checkpoint, RunDirSink, Trainer};
use partigen::BodyPart;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{load_resolved, Resolved};
use crate::Usage;

pub const MANIFEST: &str = "manifest.json";
pub const DROP_REPORT: &str = "drop_report.json";
pub const SAMPLES_DIR: &str = "samples";

fn banner(items: &[(&str, &Path)]) {
    for (k, p) in items {
        println!("{k}: {}", p.display());
    }
}

fn sample_cache(prepared: &Path, id: &str) -> PathBuf {
    prepared.join(SAMPLES_DIR).join(format!("{id}.safetensors"))
}

fn load_manifest(prepared: &Path) -> Result<DatasetManifest> {
    let path = prepared.join(MANIFEST);
    if !path.is_file() {
        return Err(Usage(format!("{} not found; run `partigen prepare` first", path.display())).into());
    }
    Ok(DatasetManifest::load(&path)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn synth(cfg: &Resolved, out: &Path, pairs: usize, seed: u64) -> Result<()> {
    banner(&[("dataset", out)]);
    let m = &cfg.config.model;
    let manifest = synth::write_dataset(out, pairs, seed, m.height, m.width)?;
    println!("wrote {} pairs at {}x{}", manifest.pairs.len(), m.height, m.width);
    Ok(())
}

pub struct PrepareArgs<'a> {
    pub dataset: &'a Path,
    pub out: &'a Path,
    pub split: Split,
    pub identity_disjoint: bool,
}

pub fn prepare(cfg: &Resolved, args: PrepareArgs) -> Result<()> {
    banner(&[("dataset", args.dataset), ("cache", args.out)]);
    let layout = DatasetLayout::new(args.dataset);
    let pairs = layout.validate()?;
    let first = pairs
        .first()
        .ok_or_else(|| Usage(format!("{} lists no pairs", layout.pairs_path().display())))?;
    let probe = ImagePlane::load(&layout.image_path(&first.src))?;
    let manifest = DatasetManifest {
        root: args.dataset.to_path_buf(),
        split: args.split,
        height: probe.height(),
        width: probe.width(),
        identity_disjoint: args.identity_disjoint,
        pairs,
    };
    let (kept, report) = partigen::data::filter_detectable(&manifest);
    for (id, reason) in &report.dropped {
        println!("dropped {id}: {reason}");
    }
    if kept.pairs.is_empty() {
        return Err(Usage("no usable pairs left after filtering".into()).into());
    }
    let samples = args.out.join(SAMPLES_DIR);
    fs::create_dir_all(&samples).with_context(|| format!("creating {}", samples.display()))?;
    let res = (kept.height, kept.width);
    for id in kept.sample_ids() {
        let (_, mask, landmarks) = load_sample(&layout, &id, res).map_err(|e| Usage(e.to_string()))?;
        let c = SampleConditioning::compute(&landmarks, &mask, &cfg.config.data)?;
        c.save(&sample_cache(args.out, &id))?;
    }
    kept.save(&args.out.join(MANIFEST))?;
    write_json(&args.out.join(DROP_REPORT), &report)?;
    cfg.echo(args.out)?;
    println!(
        "kept {} pairs, dropped {} ({}x{})",
        report.kept,
        report.dropped.len(),
        kept.height,
        kept.width
    );
    Ok(())
}

/// Conditioning of one sample: the prepared cache when present, else computed.
fn conditioning(
    cfg: &Resolved,
    prepared: &Path,
    id: &str,
    sample: (&Mask, &partigen::LandmarkSet),
) -> Result<SampleConditioning> {
    let path = sample_cache(prepared, id);
    if path.is_file() {
        Ok(SampleConditioning::load(&path)?)
    } else {
        Ok(SampleConditioning::compute(sample.1, sample.0, &cfg.config.data)?)
    }
}

fn pair_tensors(
    cfg: &Resolved,
    prepared: &Path,
    sample: &PairedSample,
    skip_shapes: &[(usize, usize)],
) -> Result<PairTensors> {
    let src = conditioning(cfg, prepared, &sample.src_id, (&sample.src_mask, &sample.src_landmarks))?;
    let tgt = conditioning(cfg, prepared, &sample.tgt_id, (&sample.tgt_mask, &sample.tgt_landmarks))?;
    Ok(PairTensors::from_conditioning(
        sample,
        &src,
        &tgt,
        skip_shapes,
        &cfg.config.data,
    )?)
}

fn check_resolution(model: (usize, usize), depth: usize, manifest: &DatasetManifest) -> Result<()> {
    if model != (manifest.height, manifest.width) {
        return Err(Usage(format!(
            "model is {}x{} (depth {depth}) but the prepared data is {}x{}",
            model.0, model.1, manifest.height, manifest.width
        ))
        .into());
    }
    Ok(())
}

pub fn train(cfg: &Resolved, prepared: &Path, out: &Path) -> Result<()> {
    banner(&[("cache", prepared), ("run", out)]);
    let manifest = load_manifest(prepared)?;
    let c = &cfg.config;
    let spec = c.model.spec();
    check_resolution((c.model.height, c.model.width), c.model.depth, &manifest)?;
    if let Ok(prep) = load_resolved(prepared) {
        if prep.data != c.data {
            return Err(Usage(format!(
                "data settings differ from the ones {} was prepared with: {:?} vs {:?}",
                prepared.display(),
                c.data,
                prep.data
            ))
            .into());
        }
    }

    let mut trainer = match latest_checkpoint(out) {
        Some((epoch, path)) => {
            println!("resuming from {} (epoch {epoch})", path.display());
            let t = Trainer::load_checkpoint(&path, Some(c.train.clone()))?;
            if t.model().spec != spec {
                return Err(Usage(format!("{} was trained with a different model layout", path.display())).into());
            }
            t
        }
        None => Trainer::new(c.train.clone(), spec.clone(), DType::F32)?,
    };
    cfg.echo(out)?;
    if trainer.epochs_done() >= c.train.epochs {
        println!("already trained for {} epochs", trainer.epochs_done());
        return Ok(());
    }

    let skip = spec.generator.skip_shapes();
    let data = manifest
        .pairs
        .iter()
        .map(|rec| pair_tensors(cfg, prepared, &load_pair(&manifest, rec)?, &skip))
        .collect::<Result<Vec<_>>>()?;
    let mut sink = RunDirSink::open(out, trainer.epochs_done())?;
    trainer.run(&data, &mut sink)?;
    let counts = trainer.update_counts();
    println!(
        "trained to epoch {}: {} discriminator and {} generator updates in total",
        trainer.epochs_done(),
        counts.discriminator,
        counts.generator
    );
    Ok(())
}

#[derive(Serialize)]
struct Provenance<'a> {
    checkpoint: String,
    checkpoint_sha256: String,
    checkpoint_epoch: usize,
    src: &'a str,
    tgt: &'a str,
    config_hash: &'a str,
}

pub fn generate(cfg: &Resolved, checkpoint: &Path, prepared: &Path, src: &str, tgt: &str, out: &Path) -> Result<()> {
    banner(&[("checkpoint", checkpoint), ("cache", prepared), ("output", out)]);
    if !checkpoint.is_file() {
        return Err(Usage(format!("checkpoint {} not found", checkpoint.display())).into());
    }
    let manifest = load_manifest(prepared)?;
    let layout = manifest.layout();
    for id in [src, tgt] {
        if !layout.image_path(id).is_file() {
            return Err(Usage(format!(
                "unknown sample id `{id}` ({} missing)",
                layout.image_path(id).display()
            ))
            .into());
        }
    }
    let res = (manifest.height, manifest.width);
    let load = |id: &str| load_sample(&layout, id, res).map_err(|e| anyhow::Error::new(Usage(e.to_string())));
    let (src_image, src_mask, src_landmarks) = load(src)?;
    let (tgt_image, tgt_mask, tgt_landmarks) = load(tgt)?;
    let sample = PairedSample {
        src_id: src.into(),
        tgt_id: tgt.into(),
        src_image,
        tgt_image,
        src_landmarks,
        tgt_landmarks,
        src_mask,
        tgt_mask,
    };

    let bytes = fs::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let g = &ckpt.spec.generator;
    check_resolution((g.height, g.width), g.depth, &manifest)?;
    let model = ckpt.model()?;
    let pt = pair_tensors(cfg, prepared, &sample, &g.skip_shapes())?;
    let batch = Batch::from_pairs(&[&pt], ckpt.dtype)?;
    let image = model.generate_images(&batch)?.remove(0);

    let dir = parent_dir(out);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    image.save(out)?;
    write_json(
        &out.with_extension("json"),
        &Provenance {
            checkpoint: checkpoint.display().to_string(),
            checkpoint_sha256: hex::encode(Sha256::digest(&bytes)),
            checkpoint_epoch: ckpt.epoch,
            src,
            tgt,
            config_hash: &cfg.hash,
        },
    )?;
    cfg.echo(&dir)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// PNG files of a directory, sorted by name.
fn png_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Usage(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for e in entries {
        let path = e?.path();
        if path.extension().is_some_and(|x| x == "png") {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.push((name, path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Usage(format!("{} contains no .png images", dir.display())).into());
    }
    Ok(out)
}

pub fn evaluate_dirs(cfg: &Resolved, generated: &Path, real: &Path, masks: Option<&Path>, out: &Path) -> Result<()> {
    let mut paths = vec![("generated", generated), ("real", real)];
    if let Some(m) = masks {
        paths.push(("masks", m));
    }
    paths.push(("report", out));
    banner(&paths);
    let backend = backend_by_name(&cfg.config.eval.backend)?;
    let gen_files = png_files(generated)?;
    let load = |files: &[(String, PathBuf)]| -> Result<Vec<ImagePlane>> {
        files.iter().map(|(_, p)| Ok(ImagePlane::load(p)?)).collect()
    };
    let gen = load(&gen_files)?;
    let real_images = load(&png_files(real)?)?;
    let mask_set = match masks {
        Some(dir) => Some(
            gen_files
                .iter()
                .map(|(name, _)| {
                    let p = dir.join(name);
                    if !p.is_file() {
                        return Err(Usage(format!("no mask {} for {name}", p.display())).into());
                    }
                    Ok(Mask::load(&p)?)
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let records = evaluate(
        &gen,
        &real_images,
        mask_set.as_deref(),
        backend.as_ref(),
        cfg.config.eval.splits,
        &cfg.hash,
    )?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&r.to_json_line()?);
        text.push('\n');
        println!("{} = {}", r.metric, r.value);
    }
    let dir = parent_dir(out);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    cfg.echo(&dir)
}

pub fn partition_debug(cfg: &Resolved, prepared: &Path, id: &str, out: &Path) -> Result<()> {
    banner(&[("cache", prepared), ("output", out)]);
    let manifest = load_manifest(prepared)?;
    let cache = sample_cache(prepared, id);
    if !cache.is_file() {
        return Err(Usage(format!("sample `{id}` is not prepared ({} missing)", cache.display())).into());
    }
    let c = SampleConditioning::load(&cache)?;
    let (image, mask, _) = load_sample(&manifest.layout(), id, (manifest.height, manifest.width))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for part in BodyPart::ALL {
        let tag = format!("{:02}_{}", part.index(), part.name());
        c.regions[part.index()].save(&out.join(format!("region_{tag}.png")))?;
        c.refined[part.index()].save(&out.join(format!("refined_{tag}.png")))?;
    }
    heatmap_composite(&c.heatmaps).save(&out.join("heatmaps.png"))?;
    let fill = cfg.config.data.mask_fill;
    split_foreground_with_fill(&image, &mask, fill)?.save(&out.join("foreground.png"))?;
    split_background_with_fill(&image, &mask, fill)?.save(&out.join("background.png"))?;
    cfg.echo(out)?;
    println!(
        "wrote {} part overlays to {}",
        2 * BodyPart::ALL.len() + 3,
        out.display()
    );
    Ok(())
}
