use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use flowreg_core::curation::{generate_samples, generate_synthetic_dataset, CurationSample};
use flowreg_core::eval::{evaluate, EvalSample};
use flowreg_core::io::{
    apply_override, list_sample_dirs, read_registration_poses, read_sample_manifest,
    read_sequence, read_view_cache, sample_dir_name, write_registration, write_sample_manifest,
    write_view_cache, RunConfig,
};
use flowreg_core::model::checkpoint::read_checkpoint;
use flowreg_core::model::train::{TrainSample, Trainer};
use flowreg_core::rng::split_seed;
use flowreg_core::sampler::register;
use flowreg_core::sampling::{sample_view, SampledView};

use crate::CommonArgs;

const VIEW_CACHE_FILE: &str = "views.pfpv";

pub fn run(command: &str, args: CommonArgs) -> Result<()> {
    let mut doc = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text).context("parsing config JSON")?
        }
        None => serde_json::to_value(RunConfig::default())?,
    };
    for assignment in &args.set {
        apply_override(&mut doc, assignment)?;
    }
    let cfg = RunConfig::from_value(doc)?;
    cfg.validate_read_paths(command)?;

    println!("command: {command}");
    println!("resolved config:\n{}", serde_json::to_string_pretty(&cfg)?);
    println!(
        "seeds: run={} sampling={} sampler.noise={} model.init={} train={}",
        cfg.seed,
        cfg.sampling.seed,
        cfg.sampler.noise_seed,
        cfg.model.parameter_init_seed,
        cfg.train.seed
    );

    match command {
        "synth" => synth(&cfg),
        "curate" => curate(&cfg),
        "preprocess" => preprocess(&cfg),
        "train" => train(&cfg),
        "register" => register_cmd(&cfg),
        "evaluate" => evaluate_cmd(&cfg),
        other => bail!("unknown command {other}"),
    }
}

fn write_samples(dir: &Path, samples: &[CurationSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, sample) in samples.iter().enumerate() {
        let sample_dir = dir.join(sample_dir_name(i));
        fs::create_dir_all(&sample_dir)?;
        write_sample_manifest(&sample_dir, sample)?;
    }
    Ok(())
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let samples = generate_synthetic_dataset(
        cfg.synth.count,
        (cfg.synth.min_views, cfg.synth.max_views),
        &cfg.scene,
        cfg.seed,
    )?;
    write_samples(&cfg.paths.data_dir, &samples)?;
    println!(
        "synth: wrote {} samples to {}",
        samples.len(),
        cfg.paths.data_dir.display()
    );
    Ok(())
}

fn curate(cfg: &RunConfig) -> Result<()> {
    let seq = read_sequence(&cfg.paths.sequence)?;
    let outcome = generate_samples(&seq, &cfg.curation, cfg.seed)?;
    write_samples(&cfg.paths.data_dir, &outcome.samples)?;
    println!(
        "curate: wrote {} samples to {} ({} exhausted attempts)",
        outcome.samples.len(),
        cfg.paths.data_dir.display(),
        outcome.exhausted.len()
    );
    Ok(())
}

fn view_seed(root: u64, sample_idx: usize, view_idx: usize) -> u64 {
    split_seed(split_seed(root, 0xD5_0000 + sample_idx as u64), view_idx as u64)
}

fn sampled_views_for(
    cfg: &RunConfig,
    sample_dir: &Path,
    sample_idx: usize,
    sample: &CurationSample,
) -> Result<Vec<SampledView>> {
    let cache = sample_dir.join(VIEW_CACHE_FILE);
    if cache.exists() {
        return Ok(read_view_cache(&cache)?);
    }
    let mut views = Vec::with_capacity(sample.views.len());
    for (v, cloud) in sample.views.iter().enumerate() {
        let view_cfg = cfg
            .sampling
            .with_seed(view_seed(cfg.seed, sample_idx, v));
        views.push(sample_view(cloud, &view_cfg)?);
    }
    Ok(views)
}

fn preprocess(cfg: &RunConfig) -> Result<()> {
    let dirs = list_sample_dirs(&cfg.paths.data_dir)?;
    if dirs.is_empty() {
        bail!("no sample_* directories under {}", cfg.paths.data_dir.display());
    }
    for (i, dir) in dirs.iter().enumerate() {
        let sample = read_sample_manifest(dir)?;
        let mut views = Vec::with_capacity(sample.views.len());
        for (v, cloud) in sample.views.iter().enumerate() {
            let view_cfg = cfg.sampling.with_seed(view_seed(cfg.seed, i, v));
            views.push(sample_view(cloud, &view_cfg)?);
        }
        write_view_cache(&dir.join(VIEW_CACHE_FILE), &views)?;
    }
    println!("preprocess: cached {} samples", dirs.len());
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let dirs = list_sample_dirs(&cfg.paths.data_dir)?;
    if dirs.is_empty() {
        bail!("no sample_* directories under {}", cfg.paths.data_dir.display());
    }
    let mut dataset = Vec::with_capacity(dirs.len());
    for (i, dir) in dirs.iter().enumerate() {
        let sample = read_sample_manifest(dir)?;
        let views = sampled_views_for(cfg, dir, i, &sample)?;
        dataset.push(TrainSample {
            views,
            gt_poses: sample.gt_poses,
        });
    }

    fs::create_dir_all(&cfg.paths.checkpoint_dir)?;
    let mut trainer = if !cfg.paths.checkpoint.as_os_str().is_empty()
        && cfg.paths.checkpoint.exists()
    {
        println!("resuming from {}", cfg.paths.checkpoint.display());
        Trainer::resume_from(&cfg.paths.checkpoint, cfg.train.clone())?
    } else {
        Trainer::new(&cfg.model, cfg.train.clone())?
    };
    let report = trainer.run(&dataset, Some(&cfg.paths.checkpoint_dir))?;

    let mut log = String::from("step,loss\n");
    let first_step = report.final_step - report.losses.len() as u64;
    for (i, loss) in report.losses.iter().enumerate() {
        log.push_str(&format!("{},{}\n", first_step + i as u64 + 1, loss));
    }
    let log_path = cfg.paths.checkpoint_dir.join("loss.csv");
    fs::write(&log_path, log)?;
    println!(
        "train: {} steps, final loss {:.6}, checkpoint {} and log {}",
        report.losses.len(),
        report.losses.last().copied().unwrap_or(f64::NAN),
        cfg.paths.checkpoint_dir.join("latest.pfrg").display(),
        log_path.display()
    );
    Ok(())
}

fn register_cmd(cfg: &RunConfig) -> Result<()> {
    let ck = read_checkpoint(&cfg.paths.checkpoint)?;
    let (params, _) = ck.into_parameters()?;
    let dirs = list_sample_dirs(&cfg.paths.data_dir)?;
    if dirs.is_empty() {
        bail!("no sample_* directories under {}", cfg.paths.data_dir.display());
    }
    fs::create_dir_all(&cfg.paths.output_dir)?;
    for (i, dir) in dirs.iter().enumerate() {
        let sample = read_sample_manifest(dir)?;
        let mut sampler_cfg = cfg.sampler.clone();
        sampler_cfg.noise_seed = split_seed(cfg.sampler.noise_seed, i as u64);
        let result = register(&sample.views, &params, &sampler_cfg, &cfg.sampling)?;
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("sample_unknown");
        let out_dir = cfg.paths.output_dir.join(name);
        fs::create_dir_all(&out_dir)?;
        write_registration(&out_dir, &result)?;
        println!(
            "register: {name} residual {:.6} (generation {} of {})",
            result.rigidity_residual,
            result.selected_generation,
            result.generation_residuals.len()
        );
    }
    Ok(())
}

fn evaluate_cmd(cfg: &RunConfig) -> Result<()> {
    let dirs = list_sample_dirs(&cfg.paths.data_dir)?;
    if dirs.is_empty() {
        bail!("no sample_* directories under {}", cfg.paths.data_dir.display());
    }
    let mut samples = Vec::new();
    for dir in &dirs {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("sample_unknown");
        let out_dir = cfg.paths.output_dir.join(name);
        if !out_dir.exists() {
            bail!("no registration output for {name} under {}", cfg.paths.output_dir.display());
        }
        let manifest = read_sample_manifest(dir)?;
        let estimated = read_registration_poses(&out_dir)?;
        samples.push(EvalSample {
            estimated,
            ground_truth: manifest.gt_poses,
            views: manifest.views,
        });
    }
    let report = evaluate(&samples, &cfg.eval.criteria, cfg.eval.chamfer_voxel)?;
    fs::create_dir_all(&cfg.paths.output_dir)?;
    fs::write(
        cfg.paths.output_dir.join("report.csv"),
        report.to_table(),
    )?;
    fs::write(
        cfg.paths.output_dir.join("report.json"),
        serde_json::to_vec_pretty(&report)?,
    )?;
    println!(
        "evaluate: SR {:.2}% mean RE {:.4} deg mean TE {:.4} m mean CD {:.4} m over {} samples",
        report.success_rate_percent,
        report.mean_re_deg,
        report.mean_te_m,
        report.mean_chamfer_m,
        report.rows.len()
    );
    Ok(())
}
