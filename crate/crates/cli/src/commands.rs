//! Implementations of the `train`, `reconstruct`, `embed`, `attack`, and
//! `report` subcommands. Every command resolves to: read inputs, compute,
//! write deterministic artifacts (plus the expanded config) into the
//! output directory.

use std::fs;
use std::path::{Path, PathBuf};

use sae_core::attack::{latent_shift_from_points, make_adversarial, silhouette_score};
use sae_core::data::{split_channels, Dataset};
use sae_core::eval::{quality_report, QualityReport};
use sae_core::nets::{load_checkpoint, save_checkpoint, CheckpointMeta, Model};
use sae_core::tensor::Tensor;
use sae_core::train::{train_semantic, train_vanilla, TrainResult};
use sae_core::tsne::{embedding_csv, embedding_svg, run_tsne, EmbeddingResult, TsneConfig};

use crate::config::{ChannelMode, ExperimentConfig, Variant};
use crate::datasets::{load_eval_dataset, load_train_dataset, pool_channels, ModelPlan};
use crate::images::write_image_grid;
use crate::CliError;

pub type Result<T> = std::result::Result<T, CliError>;

fn prepare_out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = PathBuf::from(cfg.require_out_dir()?);
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), cfg.expanded())?;
    Ok(out)
}

fn eval_subset(cfg: &ExperimentConfig) -> Result<(Dataset, Tensor<f32>, Vec<usize>)> {
    let ds = load_eval_dataset(cfg)?;
    let n = if cfg.sample_count == 0 {
        ds.len()
    } else {
        cfg.sample_count.min(ds.len())
    };
    let indices: Vec<usize> = (0..n).collect();
    let (images, labels) = ds.gather(&indices);
    Ok((ds, images, labels))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let out = prepare_out_dir(cfg)?;
    let ds = load_train_dataset(cfg)?;

    // Multi-channel data with single-channel models trains either one
    // pooled model or one model per channel.
    let parts: Vec<Dataset> = if ds.channels() > 1 {
        match cfg.channel_mode {
            ChannelMode::Pooled => vec![pool_channels(&ds)?],
            ChannelMode::PerChannel => split_channels(&ds),
        }
    } else {
        vec![ds]
    };
    let multi = parts.len() > 1;

    let shared = load_shared_models(cfg, parts.len())?;
    for (c, part) in parts.iter().enumerate() {
        let shared_model = shared.as_ref().map(|models| &models[c]);
        let result = run_variant(cfg, part, shared_model)?;
        let suffix = if multi { format!("_ch{c}") } else { String::new() };
        let ckpt = out.join(format!("checkpoint{suffix}.sae"));
        let meta = CheckpointMeta {
            iterations: cfg.train.iterations,
            seed: cfg.train.seed,
            dataset_id: part.source().to_string(),
            lambda_cls: cfg.train.lambda_cls,
            shuffle_labels: cfg.train.shuffle_labels,
        };
        save_checkpoint(&result.model, &meta, &ckpt)?;
        result
            .trace
            .write_csv(out.join(format!("trace{suffix}.csv")))?;
        let last = result.trace.records.last().expect("non-empty trace");
        println!(
            "trained {} on {} ({} samples, {} iterations); final total loss {:.6}",
            cfg.variant,
            part.source(),
            part.len(),
            cfg.train.iterations,
            last.total_loss
        );
        println!("wrote {}", ckpt.display());
    }
    Ok(())
}

fn run_variant(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    shared: Option<&Model>,
) -> Result<TrainResult> {
    let result = match cfg.variant {
        Variant::Vanilla => train_vanilla(&cfg.train, ds)?,
        Variant::Semantic | Variant::SemanticShuffled => {
            train_semantic(&cfg.train, ds, shared)?
        }
    };
    Ok(result)
}

fn load_shared_models(cfg: &ExperimentConfig, count: usize) -> Result<Option<Vec<Model>>> {
    if cfg.shared_checkpoint.is_empty() {
        if cfg.variant == Variant::SemanticShuffled {
            return Err(CliError::Usage(
                "variant semantic-shuffled requires shared_checkpoint (the vanilla run)".into(),
            ));
        }
        return Ok(None);
    }
    if cfg.shared_checkpoint.len() != count {
        return Err(CliError::Usage(format!(
            "{} shared checkpoint(s) given but {count} model(s) will be trained",
            cfg.shared_checkpoint.len()
        )));
    }
    let mut models = Vec::with_capacity(count);
    for path in &cfg.shared_checkpoint {
        if !Path::new(path).exists() {
            return Err(CliError::Usage(format!(
                "shared checkpoint not found: {path}"
            )));
        }
        models.push(load_checkpoint(path)?.0);
    }
    Ok(Some(models))
}

// ---------------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------------

fn quality_text(report: &QualityReport) -> String {
    format!(
        "images: {}\n\
         mean PSNR: {:.4} dB over {} finite values ({} infinite excluded)\n\
         mean SSIM: {:.6} ({:.2}%)\n",
        report.psnr_db.len(),
        report.mean_psnr_db,
        report.finite_psnr_count,
        report.infinite_psnr_count,
        report.mean_ssim,
        report.mean_ssim_percent,
    )
}

pub fn cmd_reconstruct(checkpoints: &[String], cfg: &ExperimentConfig) -> Result<()> {
    let out = prepare_out_dir(cfg)?;
    let (ds, images, _labels) = eval_subset(cfg)?;
    let (plan, _meta) = ModelPlan::load(checkpoints, ds.channels())?;

    let recon = plan.reconstruct(&images)?;
    let report = quality_report(&images, &recon)?;
    report.write_csv(out.join("quality.csv"))?;
    let text = quality_text(&report);
    fs::write(out.join("quality.txt"), &text)?;

    let ext = if ds.channels() == 1 { "pgm" } else { "ppm" };
    write_image_grid(&out.join(format!("grid.{ext}")), &[&images, &recon])?;
    print!("{text}");
    Ok(())
}

// ---------------------------------------------------------------------------
// embed
// ---------------------------------------------------------------------------

fn tsne_outputs(
    out: &Path,
    stem: &str,
    result: &EmbeddingResult,
    labels: &[usize],
    class_names: &[String],
) -> Result<()> {
    fs::write(out.join(format!("{stem}.csv")), embedding_csv(result, labels))?;
    fs::write(
        out.join(format!("{stem}.svg")),
        embedding_svg(result, labels, class_names),
    )?;
    Ok(())
}

/// Silhouette of the embedded coordinates, using only the points t-SNE
/// kept after de-duplication.
fn embedded_silhouette(result: &EmbeddingResult, labels: &[usize]) -> Result<f64> {
    let coords: Vec<Vec<f64>> = result.y.iter().map(|p| p.to_vec()).collect();
    let kept_labels: Vec<usize> = result.indices.iter().map(|&i| labels[i]).collect();
    Ok(silhouette_score(&coords, &kept_labels)?)
}

fn silhouette_line(name: &str, value: Result<f64>) -> String {
    match value {
        Ok(v) => format!("silhouette ({name}): {v:.6}\n"),
        Err(e) => format!("silhouette ({name}): unavailable ({e})\n"),
    }
}

pub fn cmd_embed(checkpoints: &[String], cfg: &ExperimentConfig) -> Result<()> {
    let out = prepare_out_dir(cfg)?;
    let (ds, images, labels) = eval_subset(cfg)?;
    let (plan, _meta) = ModelPlan::load(checkpoints, ds.channels())?;

    let latents = plan.latents(&images)?;
    let dim = latents.first().map(Vec::len).unwrap_or(0);
    let mut latent_csv = String::from("id,label");
    for c in 0..dim {
        latent_csv.push_str(&format!(",c{c}"));
    }
    latent_csv.push('\n');
    for (i, row) in latents.iter().enumerate() {
        latent_csv.push_str(&format!("{i},{}", labels[i]));
        for v in row {
            latent_csv.push_str(&format!(",{v}"));
        }
        latent_csv.push('\n');
    }
    fs::write(out.join("latents.csv"), latent_csv)?;

    let tsne_config = TsneConfig {
        perplexity: cfg.perplexity,
        seed: cfg.train.seed,
        ..TsneConfig::default()
    };
    let result = run_tsne(&latents, &tsne_config)?;
    tsne_outputs(&out, "embedding", &result, &labels, ds.class_names())?;

    let text = format!(
        "samples: {}\nlatent dimension: {dim}\nperplexity: {}\nseed: {}\nfinal KL: {:.6}\n{}{}",
        latents.len(),
        cfg.perplexity,
        cfg.train.seed,
        result.kl_trace.last().copied().unwrap_or(f64::NAN),
        silhouette_line("raw latents", silhouette_score(&latents, &labels).map_err(Into::into)),
        silhouette_line("t-SNE coordinates", embedded_silhouette(&result, &labels)),
    );
    fs::write(out.join("embed.txt"), &text)?;
    print!("{text}");
    Ok(())
}

// ---------------------------------------------------------------------------
// attack
// ---------------------------------------------------------------------------

pub fn cmd_attack(
    vanilla_ckpts: &[String],
    shuffled_ckpts: &[String],
    cfg: &ExperimentConfig,
) -> Result<()> {
    let out = prepare_out_dir(cfg)?;
    let (ds, images, labels) = eval_subset(cfg)?;
    let (plan_v, _) = ModelPlan::load(vanilla_ckpts, ds.channels())?;
    let (plan_s, _) = ModelPlan::load(shuffled_ckpts, ds.channels())?;

    let recon_v = plan_v.reconstruct(&images)?;
    let recon_s = plan_s.reconstruct(&images)?;
    let batch = make_adversarial(&images, &recon_v, &recon_s, cfg.clamp)?;
    let adversarial = batch.adversarial.narrow();

    let report = quality_report(&images, &adversarial)?;
    report.write_csv(out.join("quality.csv"))?;
    let mut quality = quality_text(&report);
    quality.push_str(&format!("clipped pixel fraction: {:.6}\n", batch.clip_fraction));
    fs::write(out.join("quality.txt"), &quality)?;

    let ext = if ds.channels() == 1 { "pgm" } else { "ppm" };
    write_image_grid(
        &out.join(format!("attack_grid.{ext}")),
        &[&images, &adversarial],
    )?;

    let latents_v = plan_v.latents(&images)?;
    let latents_s = plan_s.latents(&images)?;
    let latents_a = plan_v.latents(&adversarial)?;
    let shift =
        latent_shift_from_points(&latents_v, &latents_s, &latents_a, &labels, batch.clip_fraction)?;
    fs::write(out.join("latent_shift.csv"), shift.to_csv())?;
    fs::write(out.join("latent_shift.txt"), shift.summary())?;

    let tsne_config = TsneConfig {
        perplexity: cfg.perplexity,
        seed: cfg.train.seed,
        ..TsneConfig::default()
    };
    let clean = run_tsne(&latents_v, &tsne_config)?;
    tsne_outputs(&out, "tsne_clean", &clean, &labels, ds.class_names())?;
    let adversarial = run_tsne(&latents_a, &tsne_config)?;
    tsne_outputs(&out, "tsne_adversarial", &adversarial, &labels, ds.class_names())?;

    print!("{quality}{}", shift.summary());
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn parse_csv_column(text: &str, column: usize) -> Vec<f64> {
    text.lines()
        .skip(1)
        .filter_map(|line| line.split(',').nth(column))
        .filter_map(|v| v.parse::<f64>().ok())
        .collect()
}

pub fn cmd_report(dir: &str) -> Result<()> {
    let dir = PathBuf::from(dir);
    if !dir.is_dir() {
        return Err(CliError::Usage(format!(
            "run directory not found: {}",
            dir.display()
        )));
    }
    let mut text = format!("run report for {}\n", dir.display());

    let config_path = dir.join("config.txt");
    if let Ok(config) = fs::read_to_string(&config_path) {
        for key in ["variant", "dataset", "iterations", "seed"] {
            if let Some(line) = config
                .lines()
                .find(|l| l.split('=').next().map(str::trim) == Some(key))
            {
                text.push_str(line);
                text.push('\n');
            }
        }
    }

    for trace in ["trace.csv", "trace_ch0.csv", "trace_ch1.csv", "trace_ch2.csv"] {
        if let Ok(csv) = fs::read_to_string(dir.join(trace)) {
            let totals = parse_csv_column(&csv, 3);
            if let (Some(first), Some(last)) = (totals.first(), totals.last()) {
                text.push_str(&format!(
                    "{trace}: total loss {first:.6} -> {last:.6} over {} records\n",
                    totals.len()
                ));
            }
        }
    }

    if let Ok(csv) = fs::read_to_string(dir.join("quality.csv")) {
        let psnr: Vec<f64> = parse_csv_column(&csv, 1);
        let finite: Vec<f64> = psnr.iter().copied().filter(|v| v.is_finite()).collect();
        let ssim = parse_csv_column(&csv, 2);
        if !ssim.is_empty() {
            let mean_psnr = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
            let mean_ssim = ssim.iter().sum::<f64>() / ssim.len() as f64;
            text.push_str(&format!(
                "quality.csv: mean PSNR {mean_psnr:.4} dB ({} infinite excluded), mean SSIM {mean_ssim:.6} ({:.2}%)\n",
                psnr.len() - finite.len(),
                100.0 * mean_ssim,
            ));
        }
    }

    if let Ok(summary) = fs::read_to_string(dir.join("latent_shift.txt")) {
        text.push_str(&summary);
    }

    for stem in ["embedding", "tsne_clean", "tsne_adversarial"] {
        if let Ok(csv) = fs::read_to_string(dir.join(format!("{stem}.csv"))) {
            let labels: Vec<usize> = parse_csv_column(&csv, 1)
                .into_iter()
                .map(|v| v as usize)
                .collect();
            let xs = parse_csv_column(&csv, 2);
            let ys = parse_csv_column(&csv, 3);
            let points: Vec<Vec<f64>> =
                xs.into_iter().zip(ys).map(|(x, y)| vec![x, y]).collect();
            if points.len() == labels.len() && !points.is_empty() {
                match silhouette_score(&points, &labels) {
                    Ok(s) => text.push_str(&format!("{stem}.csv: 2-D silhouette {s:.6}\n")),
                    Err(e) => text.push_str(&format!("{stem}.csv: silhouette unavailable ({e})\n")),
                }
            }
        }
    }

    fs::write(dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}
