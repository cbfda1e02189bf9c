//! Subcommand implementations.

use std::path::{Path, PathBuf};

use backscatter::config::ExperimentConfig;
use backscatter::data::{ensure_dataset, fetch_dataset, split_indices, DatasetId, LoadedDataset};
use backscatter::defenses::{fine_prune, strip_report, PruneConfig, StripConfig};
use backscatter::metrics::{dominant_class_shares, spearman_rank_correlation, EvalReport};
use backscatter::models::{load_checkpoint, Checkpoint};
use backscatter::training::{collect_records, evaluate, train_with_progress};
use backscatter::{Error, Result};
use ndarray::{s, Axis};

use crate::plots;
use crate::rundir::{resolve_checkpoint_base, RunDirectory};

fn cache_root(flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| {
        std::env::var("BACKSCATTER_DATA_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|_| PathBuf::from("data"))
    })
}

pub fn fetch_data(dataset: &str, cache_dir: Option<PathBuf>) -> Result<()> {
    let id: DatasetId = dataset.parse()?;
    let root = cache_root(cache_dir);
    let dir = fetch_dataset(id, &root)?;
    let ds = backscatter::data::load_dataset(id, &root)?;
    println!(
        "{id}: {} train / {} test samples cached at {}",
        ds.train.len(),
        ds.test.len(),
        dir.display()
    );
    Ok(())
}

pub fn train(
    config_path: &Path,
    out_root: &Path,
    resume: bool,
    force: bool,
    dry_run: bool,
) -> Result<()> {
    let config_text = std::fs::read_to_string(config_path).map_err(|e| {
        Error::InvalidConfig(vec![format!("cannot read {}: {e}", config_path.display())])
    })?;
    let experiment = ExperimentConfig::from_toml(&config_text)?;
    let train_config = experiment.to_train_config()?;
    let hash = experiment.hash();
    let cache = experiment.cache_root();
    let data = ensure_dataset(train_config.dataset, &cache)?;

    if dry_run {
        let mut state = backscatter::training::TrainState::new(train_config.clone())?;
        let (train_idx, _) =
            split_indices(data.train.len(), train_config.val_size, train_config.seed);
        let b = train_config.batch_size;
        for step in 0..2 {
            let chunk: Vec<usize> = train_idx[step * b..(step + 1) * b].to_vec();
            let (x, labels) = data.train.gather(&chunk);
            let losses = backscatter::training::train_step(&mut state, &x, &labels)?;
            println!(
                "dry-run step {step}: mse {:.6} ce {:.4} lnf {:.4} total {:.4}",
                losses.mse, losses.ce, losses.lnf, losses.total
            );
        }
        println!("dry-run ok: config valid (hash {hash}), models built, two steps completed");
        return Ok(());
    }

    let run = RunDirectory::prepare(
        out_root.join(&experiment.experiment.name),
        &config_text,
        &hash,
        force,
    )?;
    println!("run directory: {}", run.root().display());
    println!("{:>5} {:>9} {:>9} {:>9} {:>9} {:>8} {:>8} {:>8}", "epoch", "mse", "ce", "lnf", "total", "ca", "asr", "ds");

    let outcome = train_with_progress(
        &train_config,
        &data,
        run.root(),
        resume,
        force,
        &mut |r| {
            println!(
                "{:>5} {:>9.5} {:>9.4} {:>9.4} {:>9.4} {:>8.4} {:>8} {:>8}",
                r.epoch,
                r.mean_mse,
                r.mean_ce,
                r.mean_lnf,
                r.mean_total,
                r.val_ca,
                r.val_asr.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                r.val_ds.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            );
        },
    )?;

    println!("final test clean accuracy: {:.4}", outcome.final_ca);
    if let Some(report) = &outcome.final_report {
        println!(
            "final test attack: asr {:.4} ds {} (report: {})",
            report.asr,
            report.ds.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into()),
            run.reports().join("final_eval.json").display()
        );
        write_histogram_csv(&run.reports().join("final_histogram.csv"), report)?;
    }
    Ok(())
}

fn write_histogram_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut csv = String::from("class,successes\n");
    for (class, count) in &report.histogram {
        csv.push_str(&format!("{class},{count}\n"));
    }
    std::fs::write(path, csv)?;
    Ok(())
}

fn load_run(path: &Path) -> Result<(Checkpoint, PathBuf)> {
    let base = resolve_checkpoint_base(path)?;
    Ok((load_checkpoint(&base)?, base))
}

fn dataset_for(meta: &backscatter::models::CheckpointMeta, cache: &Path) -> Result<LoadedDataset> {
    let id: DatasetId = meta.dataset.parse()?;
    ensure_dataset(id, cache)
}

pub fn eval(
    checkpoint: &Path,
    split: &str,
    val_size: usize,
    cache_dir: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (mut ckpt, base) = load_run(checkpoint)?;
    let data = dataset_for(&ckpt.meta, &cache_root(cache_dir))?;
    let (split_data, indices) = match split {
        "test" => (&data.test, None),
        "val" => {
            let (_, val_idx) = split_indices(data.train.len(), val_size, ckpt.meta.seed);
            (&data.train, Some(val_idx))
        }
        other => {
            return Err(Error::InvalidInput(format!("unknown split '{other}' (test|val)")));
        }
    };
    let (ca, report) = evaluate(
        &mut ckpt.classifier,
        ckpt.generator.as_ref(),
        ckpt.meta.target.as_ref(),
        split_data,
        indices.as_deref(),
        256,
        &ckpt.meta.config_hash,
        ckpt.meta.seed,
    )?;
    let out_dir = out.unwrap_or_else(|| {
        base.parent()
            .and_then(|p| p.parent())
            .map(|p| p.join("reports"))
            .unwrap_or_else(|| PathBuf::from("."))
    });
    std::fs::create_dir_all(&out_dir)?;
    match &report {
        Some(r) => {
            let path = out_dir.join(format!("eval_{split}.json"));
            std::fs::write(&path, serde_json::to_string_pretty(r)?)?;
            write_histogram_csv(&out_dir.join(format!("eval_{split}_histogram.csv")), r)?;
            println!(
                "{split}: ca {ca:.4} asr {:.4} ds {} -> {}",
                r.asr,
                r.ds.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into()),
                path.display()
            );
        }
        None => {
            let path = out_dir.join(format!("eval_{split}.json"));
            std::fs::write(
                &path,
                serde_json::to_string_pretty(&serde_json::json!({
                    "clean_accuracy": ca,
                    "config_hash": ckpt.meta.config_hash,
                    "seed": ckpt.meta.seed,
                }))?,
            )?;
            println!("{split}: ca {ca:.4} (clean checkpoint) -> {}", path.display());
        }
    }
    Ok(())
}

/// Deterministically sample `n` row indices from `[0, len)`.
fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed ^ 0x73616d70);
    idx.shuffle(&mut rng);
    idx.truncate(n.min(len));
    idx
}

pub fn strip(
    checkpoint: &Path,
    n_overlays: usize,
    samples: usize,
    cache_dir: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (mut ckpt, base) = load_run(checkpoint)?;
    let generator = ckpt.generator.as_ref().ok_or_else(|| {
        Error::InvalidInput("entropy analysis needs a checkpoint with a trigger generator".into())
    })?;
    let data = dataset_for(&ckpt.meta, &cache_root(cache_dir))?;

    let pick = |ix: &[usize]| {
        let (x, _) = data.test.gather(ix);
        x
    };
    let clean_idx = sample_indices(data.test.len(), samples, ckpt.meta.seed);
    let overlay_idx = sample_indices(data.test.len(), n_overlays.max(64), ckpt.meta.seed ^ 1);
    let clean = pick(&clean_idx);
    let overlays = pick(&overlay_idx);
    let backdoor = generator.clone().forward(&clean, false);

    let cfg = StripConfig { n_overlays, ..Default::default() };
    let report = strip_report(&mut ckpt.classifier, &clean, &backdoor, &overlays, &cfg)?;
    if let Some(w) = &report.warning {
        eprintln!("warning: {w}");
    }

    let out_dir = out.unwrap_or_else(|| {
        base.parent()
            .and_then(|p| p.parent())
            .map(|p| p.join("reports"))
            .unwrap_or_else(|| PathBuf::from("."))
    });
    std::fs::create_dir_all(&out_dir)?;
    let mut csv = String::from("set,entropy\n");
    for e in &report.clean_entropies {
        csv.push_str(&format!("clean,{e}\n"));
    }
    for e in &report.backdoor_entropies {
        csv.push_str(&format!("backdoor,{e}\n"));
    }
    std::fs::write(out_dir.join("strip_entropies.csv"), csv)?;
    let full = serde_json::json!({
        "overlap": report.overlap,
        "n_overlays": n_overlays,
        "samples": samples,
        "config_hash": ckpt.meta.config_hash,
        "seed": ckpt.meta.seed,
        "warning": report.warning,
    });
    std::fs::write(out_dir.join("strip_report.json"), serde_json::to_string_pretty(&full)?)?;
    let svg = plots::histogram_overlay_svg(
        "prediction entropy under random overlays",
        "clean",
        &report.clean_entropies,
        "triggered",
        &report.backdoor_entropies,
        32,
    );
    std::fs::write(out_dir.join("strip_entropy_hist.svg"), svg)?;
    println!(
        "entropy overlap {:.4} -> {}",
        report.overlap,
        out_dir.join("strip_report.json").display()
    );
    Ok(())
}

pub fn prune(
    checkpoint: &Path,
    rates: Vec<f64>,
    calibration: usize,
    eval_samples: usize,
    cache_dir: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (ckpt, base) = load_run(checkpoint)?;
    let data = dataset_for(&ckpt.meta, &cache_root(cache_dir))?;
    let calib_idx = sample_indices(data.train.len(), calibration, ckpt.meta.seed ^ 2);
    let (calib, _) = data.train.gather(&calib_idx);
    let eval_idx = sample_indices(data.test.len(), eval_samples, ckpt.meta.seed ^ 3);

    let cfg = PruneConfig { rates };
    let swept = fine_prune(&ckpt.classifier, &calib, &cfg, 256)?;

    let mut rows = Vec::new();
    for (rate, mut model) in swept {
        let (ca, report) = evaluate(
            &mut model,
            ckpt.generator.as_ref(),
            ckpt.meta.target.as_ref(),
            &data.test,
            Some(&eval_idx),
            256,
            &ckpt.meta.config_hash,
            ckpt.meta.seed,
        )?;
        let asr = report.as_ref().map(|r| r.asr);
        println!(
            "rate {rate:.1}: ca {ca:.4} asr {}",
            asr.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
        );
        rows.push((rate, ca, asr));
    }

    let out_dir = out.unwrap_or_else(|| {
        base.parent()
            .and_then(|p| p.parent())
            .map(|p| p.join("reports"))
            .unwrap_or_else(|| PathBuf::from("."))
    });
    std::fs::create_dir_all(&out_dir)?;
    let mut csv = String::from("rate,clean_accuracy,attack_success_rate\n");
    for (rate, ca, asr) in &rows {
        csv.push_str(&format!(
            "{rate},{ca},{}\n",
            asr.map(|v| v.to_string()).unwrap_or_default()
        ));
    }
    std::fs::write(out_dir.join("prune_sweep.csv"), csv)?;

    let spearman = if rows.iter().all(|(_, _, asr)| asr.is_some()) && rows.len() >= 2 {
        let cas: Vec<f64> = rows.iter().map(|(_, ca, _)| *ca).collect();
        let asrs: Vec<f64> = rows.iter().map(|(_, _, a)| a.unwrap()).collect();
        spearman_rank_correlation(&asrs, &cas).ok()
    } else {
        None
    };
    let report = serde_json::json!({
        "rows": rows.iter().map(|(r, ca, asr)| serde_json::json!({
            "rate": r, "clean_accuracy": ca, "attack_success_rate": asr,
        })).collect::<Vec<_>>(),
        "spearman_asr_ca": spearman,
        "config_hash": ckpt.meta.config_hash,
        "seed": ckpt.meta.seed,
    });
    std::fs::write(out_dir.join("prune_report.json"), serde_json::to_string_pretty(&report)?)?;
    let labels: Vec<String> = rows.iter().map(|(r, _, _)| format!("{r:.1}")).collect();
    let svg = plots::bar_chart_svg(
        "metric decay under channel pruning",
        &labels,
        &[
            ("clean accuracy", rows.iter().map(|(_, ca, _)| *ca).collect()),
            ("attack success", rows.iter().map(|(_, _, a)| a.unwrap_or(0.0)).collect()),
        ],
        "metric",
    );
    std::fs::write(out_dir.join("prune_sweep.svg"), svg)?;
    if let Some(s) = spearman {
        println!("spearman(asr, ca) = {s:.4}");
    }
    println!("-> {}", out_dir.join("prune_report.json").display());
    Ok(())
}

pub fn compare_baseline(
    attack: &Path,
    baseline: &Path,
    cache_dir: Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let (mut a, _) = load_run(attack)?;
    let (mut b, _) = load_run(baseline)?;
    let cache = cache_root(cache_dir);

    let summarize = |ckpt: &mut Checkpoint, name: &str| -> Result<serde_json::Value> {
        let data = dataset_for(&ckpt.meta, &cache)?;
        let target = ckpt.meta.target.clone().ok_or_else(|| {
            Error::InvalidInput(format!("{name} checkpoint has no attack target"))
        })?;
        let (clean, backdoor, _) = collect_records(
            &mut ckpt.classifier,
            ckpt.generator.as_ref(),
            Some(&target),
            &data.test,
            None,
            256,
        )?;
        let report = backscatter::metrics::build_report(
            &clean,
            &backdoor,
            &target,
            None,
            &ckpt.meta.config_hash,
            ckpt.meta.seed,
        )?;
        let shares = dominant_class_shares(&backdoor);
        let max_share = shares.values().copied().fold(0.0f64, f64::max);
        Ok(serde_json::json!({
            "name": name,
            "asr": report.asr,
            "ds": report.ds,
            "ca": report.ca,
            "dominant_class_share_max": max_share,
            "dominant_class_share_per_source": shares,
            "histogram": report.histogram,
            "config_hash": report.config_hash,
        }))
    };

    let ja = summarize(&mut a, "attack")?;
    let jb = summarize(&mut b, "baseline")?;
    let ds_a = ja["ds"].as_f64().unwrap_or(0.0);
    let ds_b = jb["ds"].as_f64().unwrap_or(0.0);
    let comparison = serde_json::json!({
        "attack": ja,
        "baseline": jb,
        "ds_gap": ds_a - ds_b,
    });
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("comparison.json"), serde_json::to_string_pretty(&comparison)?)?;

    // grouped per-class histogram
    let hist = |v: &serde_json::Value| -> Vec<f64> {
        let map = v["histogram"].as_object().unwrap();
        let total: f64 = map.values().map(|c| c.as_f64().unwrap_or(0.0)).sum();
        map.values().map(|c| c.as_f64().unwrap_or(0.0) / total.max(1.0)).collect()
    };
    let labels: Vec<String> =
        ja["histogram"].as_object().unwrap().keys().cloned().collect();
    let svg = plots::bar_chart_svg(
        "successful-attack distribution over predicted classes",
        &labels,
        &[("dispersion-trained", hist(&ja)), ("naive baseline", hist(&jb))],
        "fraction of successes",
    );
    std::fs::write(out.join("comparison_histogram.svg"), svg)?;
    println!(
        "ds attack {ds_a:.4} vs baseline {ds_b:.4} (gap {:.4}); baseline max dominant share {:.3} -> {}",
        ds_a - ds_b,
        jb["dominant_class_share_max"].as_f64().unwrap_or(0.0),
        out.join("comparison.json").display()
    );
    Ok(())
}

pub fn plot(
    report: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    samples: usize,
    cache_dir: Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut did_something = false;

    if let Some(report_path) = report {
        let report: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(&report_path)?)?;
        let labels: Vec<String> = report.histogram.keys().map(|k| k.to_string()).collect();
        let values: Vec<f64> = report.histogram.values().map(|v| *v as f64).collect();
        let svg = plots::bar_chart_svg(
            "successful-attack counts per predicted class",
            &labels,
            &[("successes", values)],
            "count",
        );
        std::fs::write(out.join("prediction_histogram.svg"), svg)?;
        println!("wrote {}", out.join("prediction_histogram.svg").display());
        did_something = true;
    }

    if let Some(ckpt_path) = checkpoint {
        let (mut ckpt, _) = load_run(&ckpt_path)?;
        let generator = ckpt.generator.as_ref().ok_or_else(|| {
            Error::InvalidInput("image plots need a checkpoint with a trigger generator".into())
        })?;
        let data = dataset_for(&ckpt.meta, &cache_root(cache_dir))?;
        let idx = sample_indices(data.test.len(), samples, ckpt.meta.seed ^ 4);
        let (clean, _) = data.test.gather(&idx);
        let backdoor = generator.clone().forward(&clean, false);

        plots::residual_triptych_png(&out.join("residual_triptych.png"), &clean, &backdoor, 10.0)?;

        // per-sample softmax confidence on triggered inputs
        let logits = ckpt.classifier.forward(&backdoor.slice(s![..samples.min(9), .., .., ..]).to_owned(), false);
        let rows: Vec<(String, Vec<f64>)> = logits
            .axis_iter(Axis(0))
            .enumerate()
            .map(|(i, row)| {
                let z: Vec<f64> = row.iter().map(|v| *v as f64).collect();
                let p = backscatter::losses::softmax(&z);
                (format!("sample {i}"), p)
            })
            .collect();
        let svg = plots::confidence_grid_svg("triggered-input confidence distributions", &rows);
        std::fs::write(out.join("confidence_grid.svg"), svg)?;
        println!(
            "wrote {} and {}",
            out.join("residual_triptych.png").display(),
            out.join("confidence_grid.svg").display()
        );
        did_something = true;
    }

    if !did_something {
        return Err(Error::InvalidInput(
            "plot needs --report and/or --checkpoint".into(),
        ));
    }
    Ok(())
}
