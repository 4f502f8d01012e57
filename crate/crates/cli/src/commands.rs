use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use mlada::analysis::{analyze, export_embeddings, FeatureSpace};
use mlada::data::{downsample_source, load_csv, Dataset, Domain};
use mlada::experiments::{ablation_grid, format_comparison, margin_sweep, write_comparison_csv};
use mlada::networks::ModelParams;
use mlada::robustness::{evaluate_noisy, write_robustness_csv};
use mlada::seeds;
use mlada::trainer::{evaluate_accuracy, fit};

use crate::config::{DataSource, Grid, RunConfig};
use crate::{CliError, Manifest, COMMANDS};

/// Runs `command` and returns a short human-readable summary.
pub fn run(command: &str, cfg: &RunConfig) -> Result<String, CliError> {
    if !COMMANDS.contains(&command) {
        return Err(CliError::Usage(format!(
            "unknown command {:?}; expected one of {}",
            command,
            COMMANDS.join(", ")
        )));
    }
    let data = cfg.data_source()?;
    cfg.train.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let manifest = Manifest::new(command, cfg);
    fs::write(
        cfg.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;

    match command {
        "gen-data" => gen_data(cfg),
        "train" => {
            let (source, target) = load_data(cfg, &data)?;
            train(cfg, &source, &target).map(|(_, s)| s)
        }
        "eval" => eval(cfg, &data),
        "perturb" => perturb(cfg, &data),
        "analyze" => analyze_cmd(cfg, &data),
        "ablate" => ablate(cfg, &data),
        _ => unreachable!("checked above"),
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn load_data(cfg: &RunConfig, data: &DataSource) -> Result<(Dataset, Dataset), CliError> {
    match data {
        DataSource::Generated(task) => Ok(task.generate(cfg.train.seed)?),
        DataSource::Files {
            source,
            target,
            header,
            target_labeled,
            downsample,
        } => {
            let source = load_csv(source, true, *header, Domain::Source)?;
            let mut target = load_csv(target, *target_labeled, *header, Domain::Target)?;
            if target.dim() != source.dim() {
                return Err(mlada::Error::Data(format!(
                    "source has {} features but target has {}",
                    source.dim(),
                    target.dim()
                ))
                .into());
            }
            if target.labels.is_some() {
                if target.class_count > source.class_count {
                    return Err(mlada::Error::Data(format!(
                        "target label {} has no source class",
                        target.class_count - 1
                    ))
                    .into());
                }
                target.class_count = source.class_count;
            }
            let source = downsample_source(
                &source,
                *downsample,
                seeds::derive(cfg.train.seed, seeds::DOWNSAMPLE),
            )?;
            Ok((source, target))
        }
    }
}

fn gen_data(cfg: &RunConfig) -> Result<String, CliError> {
    let (source, target) = cfg.task.generate(cfg.train.seed)?;
    source.write_csv(&cfg.out_dir.join("source.csv"))?;
    target.write_csv(&cfg.out_dir.join("target.csv"))?;
    Ok(format!(
        "wrote {} source and {} target rows to {}",
        source.len(),
        target.len(),
        cfg.out_dir.display()
    ))
}

fn train(
    cfg: &RunConfig,
    source: &Dataset,
    target: &Dataset,
) -> Result<(ModelParams, String), CliError> {
    let (params, log) = fit(&cfg.train, source, target, cfg.eval_every)?;
    let out = &cfg.out_dir;
    let mut w = create(out, "losses.csv")?;
    log.write_losses_csv(&mut w)?;
    w.flush()?;
    let mut w = create(out, "evals.csv")?;
    log.write_evals_csv(&mut w)?;
    w.flush()?;
    params.save(&out.join("params.bin"))?;
    let mut summary = format!("trained {} iterations", cfg.train.max_iters);
    if let Some(last) = log.steps.last() {
        summary.push_str(&format!(", final total loss {:.6}", last.loss.total));
    }
    if let Some(acc) = log.final_target_acc() {
        summary.push_str(&format!(", target accuracy {:.4}", acc));
    }
    Ok((params, summary))
}

/// Loads `params` when given, otherwise trains first.
fn obtain_params(
    cfg: &RunConfig,
    source: &Dataset,
    target: &Dataset,
) -> Result<ModelParams, CliError> {
    match &cfg.params {
        Some(path) => {
            let params = ModelParams::load(path)?;
            let spec = params.spec();
            if spec.input_dim() != source.dim() || spec.classes() != source.class_count {
                return Err(mlada::Error::Data(format!(
                    "{} expects {} features and {} classes; data has {} and {}",
                    path.display(),
                    spec.input_dim(),
                    spec.classes(),
                    source.dim(),
                    source.class_count
                ))
                .into());
            }
            Ok(params)
        }
        None => Ok(train(cfg, source, target)?.0),
    }
}

fn eval(cfg: &RunConfig, data: &DataSource) -> Result<String, CliError> {
    let (source, target) = load_data(cfg, data)?;
    let params = obtain_params(cfg, &source, &target)?;
    let source_acc = evaluate_accuracy(&params, &source)?;
    let target_acc = match target.labels {
        Some(_) => Some(evaluate_accuracy(&params, &target)?),
        None => None,
    };
    let mut w = create(&cfg.out_dir, "accuracy.csv")?;
    writeln!(w, "source_acc,target_acc")?;
    writeln!(
        w,
        "{:?},{}",
        source_acc,
        target_acc.map_or(String::new(), |a| format!("{:?}", a))
    )?;
    w.flush()?;
    Ok(match target_acc {
        Some(t) => format!(
            "source accuracy {:.4}, target accuracy {:.4}",
            source_acc, t
        ),
        None => format!("source accuracy {:.4}, target unlabeled", source_acc),
    })
}

fn perturb(cfg: &RunConfig, data: &DataSource) -> Result<String, CliError> {
    let (source, target) = load_data(cfg, data)?;
    if target.labels.is_none() {
        return Err(CliError::Usage(
            "perturb scores the target and needs target labels".into(),
        ));
    }
    let params = obtain_params(cfg, &source, &target)?;
    let rows = evaluate_noisy(
        &params,
        &target,
        &cfg.intensities,
        seeds::derive(cfg.train.seed, seeds::NOISE),
        cfg.train.batch_size,
    )?;
    let mut w = create(&cfg.out_dir, "robustness.csv")?;
    write_robustness_csv(&rows, &mut w)?;
    w.flush()?;
    let mut out = String::from("intensity  accuracy");
    for r in &rows {
        out.push_str(&format!("\n{:>9}  {:.4}", r.intensity, r.accuracy));
    }
    Ok(out)
}

fn analyze_cmd(cfg: &RunConfig, data: &DataSource) -> Result<String, CliError> {
    let (source, target) = load_data(cfg, data)?;
    let params = obtain_params(cfg, &source, &target)?;
    let x = &target.features;
    let truth = target.labels.as_deref();
    let report = analyze(&params, x, truth, cfg.space, cfg.label_mode)?;
    fs::write(
        cfg.out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    let text = report.to_string();
    fs::write(cfg.out_dir.join("report.txt"), text.clone() + "\n")?;
    let feats = match cfg.space {
        FeatureSpace::Feature => params.features(x)?,
        FeatureSpace::Metric => params.metric_features(x)?,
    };
    export_embeddings(
        &feats,
        truth,
        &params.predict(x)?,
        &cfg.out_dir.join("embeddings.csv"),
    )?;
    Ok(text)
}

fn ablate(cfg: &RunConfig, data: &DataSource) -> Result<String, CliError> {
    let DataSource::Generated(task) = data else {
        return Err(CliError::Usage("ablate runs on generated data only".into()));
    };
    if cfg.seeds.is_empty() {
        return Err(CliError::Usage("seeds: at least one seed is needed".into()));
    }
    let (rows, file) = match cfg.grid {
        Grid::Loss => (ablation_grid(&cfg.train, task, &cfg.seeds)?, "ablation.csv"),
        Grid::Margin => (
            margin_sweep(&cfg.train, task, &cfg.seeds, &cfg.margins)?,
            "margin_sweep.csv",
        ),
    };
    let mut w = create(&cfg.out_dir, file)?;
    write_comparison_csv(&rows, &cfg.seeds, &mut w)?;
    w.flush()?;
    Ok(format_comparison(&rows))
}
