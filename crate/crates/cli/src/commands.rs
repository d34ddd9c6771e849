use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::Utc;
use ezdit_core::autodiff::{ParamStore, Rng, Tensor};
use ezdit_core::diffusion::{sample_seeds, SamplerPlan};
use ezdit_core::dit::{count_params, load_checkpoint, save_checkpoint, Checkpoint, DitModel, Scale, Variant};
use ezdit_core::filter::{self, FileScorer, MockScorer, Scorer};
use ezdit_core::parallel::Exec;
use ezdit_core::training::{prepare_stage_model, spectral_class, sweep_cfg, train_stage, SweepCell};
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;
use crate::{Cli, CliError, Command};

type Outputs = Vec<String>;

fn write_file(dir: &Path, name: &str, bytes: &[u8], outputs: &mut Outputs) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    outputs.push(name.to_string());
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serialisable");
    s.push('\n');
    s.into_bytes()
}

/// Newest text-conditioned stage checkpoint in `dir`.
fn latest_conditional_checkpoint(dir: &Path) -> Result<PathBuf, CliError> {
    ["stage3.ezdt", "stage2.ezdt"]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| {
            CliError::Usage(format!(
                "no stage-2 or stage-3 checkpoint in {}; train first or set a checkpoint in the config",
                dir.display()
            ))
        })
}

fn load_model(path: &Path) -> Result<DitModel, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} not found", path.display())));
    }
    Ok(DitModel::from_checkpoint(load_checkpoint(path)?)?)
}

/// Folds command-line flags into the config and returns the run name.
fn resolve(command: &Command, config: &mut ExperimentConfig) -> Result<String, CliError> {
    let out = config.output_dir.clone();
    Ok(match command {
        Command::Variants { scale, .. } => {
            if let Some(s) = scale {
                config.variants.scale = s.parse::<Scale>()?;
            }
            "variants".into()
        }
        Command::Train { stage, .. } => {
            let st = config.stages.get_mut(*stage).expect("clap restricts the range");
            if *stage > 1 && st.resume.is_none() {
                st.resume = Some(out.join(format!("stage{}.ezdt", stage - 1)));
            }
            format!("train-stage{stage}")
        }
        Command::Sample {
            steps,
            cfg,
            rescale,
            seed,
            text,
        } => {
            let s = &mut config.sampler;
            if let Some(v) = steps {
                s.steps = *v;
            }
            if let Some(v) = cfg {
                s.w = *v;
            }
            if let Some(v) = rescale {
                s.phi = *v;
            }
            if let Some(v) = seed {
                s.seed = *v;
            }
            if let Some(v) = text {
                s.text = v.clone();
            }
            if s.steps < 1 {
                return Err(CliError::Usage("--steps must be at least 1".into()));
            }
            s.guidance().validate()?;
            if s.num_samples == 0 {
                return Err(CliError::Usage("sampler.num_samples must be positive".into()));
            }
            if s.checkpoint.is_none() {
                s.checkpoint = Some(latest_conditional_checkpoint(&out)?);
            }
            "sample".into()
        }
        Command::SweepCfg => {
            if config.sweep.checkpoint.is_none() {
                config.sweep.checkpoint = Some(latest_conditional_checkpoint(&out)?);
            }
            "sweep-cfg".into()
        }
        Command::Filter {
            manifest,
            threshold,
            scorer,
        } => {
            let f = &mut config.filter;
            f.manifest = Some(manifest.clone());
            if let Some(t) = threshold {
                f.threshold = *t;
            }
            if let Some(s) = scorer {
                f.scorer = s.clone();
            }
            if !(-1.0..=1.0).contains(&f.threshold) {
                return Err(CliError::Usage(format!("--threshold {} outside [-1, 1]", f.threshold)));
            }
            "filter".into()
        }
    })
}

pub fn dispatch(cli: Cli, command_line: &str) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = cli.out {
        config.output_dir = out;
    }
    config.validate()?;
    let name = resolve(&cli.command, &mut config)?;

    let out = config.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let resolved = config.to_json();
    let config_file = format!("{name}.config.json");
    let mut outputs = Vec::new();
    write_file(&out, &config_file, resolved.as_bytes(), &mut outputs)?;

    let started = Utc::now();
    let result = execute(&cli.command, &config, &mut outputs);
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => e.to_string(),
    };
    RunManifest::new(command_line, &resolved, started, status, outputs).append(&out)?;
    result
}

fn execute(command: &Command, config: &ExperimentConfig, outputs: &mut Outputs) -> Result<(), CliError> {
    match command {
        Command::Variants { train_toy, .. } => variants(config, *train_toy, outputs),
        Command::Train { stage, dry_run } => train(config, *stage, *dry_run, outputs),
        Command::Sample { .. } => sample(config, outputs),
        Command::SweepCfg => sweep(config, outputs),
        Command::Filter { .. } => filter_manifest(config, outputs),
    }
}

/// Mean loss of the last tenth of a run (at least one step).
fn final_loss(losses: &[f64]) -> f64 {
    let k = (losses.len() / 10).max(1);
    losses[losses.len() - k..].iter().sum::<f64>() / k as f64
}

fn variants(config: &ExperimentConfig, train_toy: bool, outputs: &mut Outputs) -> Result<(), CliError> {
    let vc = &config.variants;
    let base = vc.scale.config();
    let groups: Vec<String> = count_params(&base).groups.into_iter().map(|(g, _)| g).collect();
    let mut csv = format!("variant,scale,total_params,{},param_bytes,activation_bytes,memory_bytes", groups.join(","));
    if train_toy {
        csv.push_str(",toy_final_loss");
    }
    csv.push('\n');

    let (train, _) = config.dataset.splits(config.data_seed);
    let schedule = config.noise_schedule()?;
    for v in Variant::ALL {
        let cfg = v.apply(&base);
        let table = count_params(&cfg);
        let mem = table.memory_estimate(&cfg, vc.batch, vc.frames, vc.text_len);
        let counts: Vec<String> = table.groups.iter().map(|(_, c)| c.to_string()).collect();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}",
            v.name(),
            vc.scale.name(),
            table.total,
            counts.join(","),
            mem.param_bytes,
            mem.activation_bytes,
            mem.total_bytes
        ));
        if train_toy {
            let mut toy = v.apply(&Scale::Toy.config());
            toy.latent_channels = config.dataset.latent_channels;
            toy.text_vocab = config.dataset.num_classes + 1;
            let st = ezdit_core::training::StageConfig::new(1, vc.train_steps, vc.train_batch, vc.train_lr, vc.train_seed);
            let model = prepare_stage_model(1, &toy, None, &mut Rng::new(vc.train_seed).fork(1))?;
            let run = train_stage(&st, model, &schedule, &train, Exec::Parallel, None)?;
            let losses: Vec<f64> = run.losses.iter().map(|r| r.loss).collect();
            csv.push_str(&format!(",{}", final_loss(&losses)));
        }
        csv.push('\n');
    }
    print!("{csv}");
    write_file(&config.output_dir, "variants.csv", csv.as_bytes(), outputs)
}

fn window_mean(losses: &[f64], head: bool) -> f64 {
    let k = 100.min(losses.len());
    let w = if head { &losses[..k] } else { &losses[losses.len() - k..] };
    w.iter().sum::<f64>() / k as f64
}

fn train(config: &ExperimentConfig, stage: u8, dry_run: bool, outputs: &mut Outputs) -> Result<(), CliError> {
    let st = config.stages.get(stage).expect("validated stage").clone();
    let model_cfg = config.model_config()?;
    let resume = match &st.resume {
        Some(p) if stage > 1 => {
            if !p.exists() {
                return Err(CliError::Usage(format!(
                    "stage {stage} resumes from {}, which does not exist; run stage {} first",
                    p.display(),
                    stage - 1
                )));
            }
            Some(load_checkpoint(p)?)
        }
        _ => None,
    };
    let model = prepare_stage_model(stage, &model_cfg, resume, &mut Rng::new(st.seed).fork(1))?;
    if dry_run {
        println!("stage {stage}: config valid, {} parameters", model.num_params());
        return Ok(());
    }
    let (train_set, _) = config.dataset.splits(config.data_seed);
    let schedule = config.noise_schedule()?;
    let run = train_stage(&st, model, &schedule, &train_set, Exec::Parallel, Some(&config.output_dir))?;
    outputs.push(format!("stage{stage}.ezdt"));
    outputs.push(format!("loss_stage{stage}.csv"));
    let losses: Vec<f64> = run.losses.iter().map(|r| r.loss).collect();
    let summary = json!({
        "stage": stage,
        "steps": losses.len(),
        "first_100_mean": window_mean(&losses, true),
        "last_100_mean": window_mean(&losses, false),
        "final_loss": final_loss(&losses),
    });
    println!("{summary}");
    write_file(&config.output_dir, &format!("train_stage{stage}.json"), &to_json(&summary), outputs)
}

fn sample(config: &ExperimentConfig, outputs: &mut Outputs) -> Result<(), CliError> {
    let s = &config.sampler;
    let model = load_model(s.checkpoint.as_deref().expect("resolved"))?;
    let null = model.config.null_token();
    if let Some(&bad) = s.text.iter().find(|&&t| t >= null) {
        return Err(CliError::Usage(format!("text token {bad} out of range (tokens are 0..{null})")));
    }
    let schedule = config.noise_schedule()?;
    let plan = SamplerPlan::trailing(schedule.len(), s.steps)?;
    let seeds: Vec<u64> = (0..s.num_samples as u64).map(|i| s.seed + i).collect();
    let shape = (model.config.latent_channels, config.dataset.frames);
    let xs = sample_seeds(&model, &s.text, shape, &schedule, &plan, &s.guidance(), &seeds, Exec::Parallel)?;

    let mut data = Vec::with_capacity(xs.len() * shape.0 * shape.1);
    let mut argmax = Vec::with_capacity(xs.len());
    for x in &xs {
        data.extend_from_slice(x.data());
        argmax.push(spectral_class(x, config.dataset.num_classes)?);
    }
    let all = Tensor::new(&[xs.len(), shape.0, shape.1], data)?;
    let mut tensors = ParamStore::new();
    tensors.insert("latent", all.clone());
    let ckpt = Checkpoint {
        tensors,
        metadata: [
            ("seeds".to_string(), json!(seeds)),
            ("steps".to_string(), json!(s.steps)),
            ("w".to_string(), json!(s.w)),
            ("phi".to_string(), json!(s.phi)),
            ("text".to_string(), json!(s.text)),
        ]
        .into_iter()
        .collect(),
    };
    save_checkpoint(config.output_dir.join("sample.ezdt"), &ckpt)?;
    outputs.push("sample.ezdt".into());
    let stats = json!({
        "mean": all.mean(),
        "std": all.std(),
        "spectral_argmax": argmax,
    });
    println!("{stats}");
    write_file(&config.output_dir, "sample_stats.json", &to_json(&stats), outputs)
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut csv = String::from("w,phi,alignment,std_drift,n\n");
    for c in cells {
        csv.push_str(&format!("{},{},{},{},{}\n", c.w, c.phi, c.alignment, c.std_drift, c.n));
    }
    csv
}

fn sweep(config: &ExperimentConfig, outputs: &mut Outputs) -> Result<(), CliError> {
    let sc = &config.sweep;
    let model = load_model(sc.checkpoint.as_deref().expect("resolved"))?;
    let schedule = config.noise_schedule()?;
    let cells = sweep_cfg(&model, &config.dataset, &schedule, &sc.plan(), &sc.ws, &sc.phis, Exec::Parallel)?;
    let csv = sweep_csv(&cells);
    print!("{csv}");
    write_file(&config.output_dir, "sweep_cfg.csv", csv.as_bytes(), outputs)
}

fn scorer(spec: &str) -> Result<Box<dyn Scorer>, CliError> {
    if spec == "mock" {
        Ok(Box::new(MockScorer))
    } else if let Some(path) = spec.strip_prefix("file:") {
        Ok(Box::new(FileScorer::load(path)?))
    } else {
        Err(CliError::Usage(format!("unknown scorer `{spec}`, expected `mock` or `file:PATH`")))
    }
}

fn filter_manifest(config: &ExperimentConfig, outputs: &mut Outputs) -> Result<(), CliError> {
    let fc = &config.filter;
    let path = fc.manifest.as_deref().expect("resolved");
    let records = filter::load_manifest(path)?;
    let scorer = scorer(&fc.scorer)?;
    let scored = filter::score_manifest(&records, scorer.as_ref(), Exec::Parallel)?;
    let (kept, dropped) = filter::filter_threshold(&scored, fc.threshold)?;
    for (name, set) in [("kept.jsonl", &kept), ("dropped.jsonl", &dropped)] {
        let mut buf = Vec::new();
        filter::write_manifest(&mut buf, set)?;
        buf.flush().expect("in-memory write");
        write_file(&config.output_dir, name, &buf, outputs)?;
    }
    let summary = json!({
        "input_count": records.len(),
        "kept_count": kept.len(),
        "threshold": fc.threshold,
    });
    println!("{summary}");
    write_file(&config.output_dir, "filter_summary.json", &to_json(&summary), outputs)
}
