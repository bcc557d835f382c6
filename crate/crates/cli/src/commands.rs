use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use countconf_core::data::{load_manifest, save_json, ImageRecord};
use countconf_core::image_metrics::to_gray;
use countconf_core::niqe::{fit_pristine_model, NiqeConfig};
use countconf_core::pipeline::{
    builtin_score_table, join_samples, label_records, load_corpus, load_labels, load_rgb, load_scores,
    resolve_niqe_model, score_corpus, write_labels, write_predictions, write_scores, ImageScores, LabelRow,
    METRIC_EDGE_DENSITY, METRIC_ENTROPY, METRIC_NIQE,
};
use countconf_core::regression::{
    ablation, export_scatter, fit, train_test_split, write_scatter_csv, AblationTable, ConfidenceModel,
    ModelEvaluation, Sample,
};
use countconf_core::sensitivity::{HypothesisReport, Polarity, SensitivityOptions};
use countconf_core::synth::{generate_corpus, pristine_images, PlanFile, PRISTINE_SEED};
use countconf_core::{Error, PipelineConfig, Result};
use serde::Serialize;

use crate::{effective_config, Canned, Cli, Command};

pub fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    if let Some(n) = cfg.threads {
        // Fails only if a pool already exists, which is harmless here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Synth { plan, canned, images } => synth(&cfg, cli.seed, plan.as_deref(), *canned, *images, out),
        Command::Score { manifest, detections, niqe_model } => {
            let cfg = with_model(cfg, niqe_model);
            let records = load_corpus(manifest, detections, None)?;
            let scores = score_corpus(&records, &cfg, &resolve_niqe_model(&cfg)?)?;
            write_scores(&scores, sink(out)?)
        }
        Command::Label { manifest, detections, ground_truth, summary } => {
            let records = load_corpus(manifest, detections, Some(ground_truth))?;
            let (rows, report) = label_records(&records, cfg.iou_thresh)?;
            write_labels(&rows, sink(out)?)?;
            match summary {
                Some(p) => save_json(p, &report),
                None if out.is_some() => print_json(&report),
                None => {
                    eprintln!("{}", to_json(&report)?);
                    Ok(())
                }
            }
        }
        Command::Analyze { scores, manifest, external_iqa, external_ica, negate, no_normalize } => {
            let dir = require_dir(out)?;
            let records = load_manifest(manifest)?;
            let scores = load_scores(scores)?;
            let opts = SensitivityOptions {
                alpha: cfg.alpha,
                normalize: cfg.normalization.sensitivity && !no_normalize,
            };
            let a = analyze(&records, &scores, external_iqa, external_ica, negate, &opts)?;
            a.write(&dir)?;
            print_json(&a.verdict())
        }
        Command::Fit { scores, labels } => {
            let out = out.ok_or_else(|| Error::invalid("fit needs --out for the model file"))?;
            let samples = samples(scores, labels)?;
            let summary = fit_split(&cfg, &samples, out)?;
            print_json(&summary)
        }
        Command::Predict { model, scores } => {
            let model = ConfidenceModel::load(model)?;
            let scores = load_scores(scores)?;
            let preds = scores
                .iter()
                .map(|s| model.predict(&s.factors))
                .collect::<Result<Vec<_>>>()?;
            write_predictions(&scores, &preds, sink(out)?)
        }
        Command::Ablate { scores, labels, json, scatter } => {
            let samples = samples(scores, labels)?;
            let table = ablate(&cfg, &samples)?;
            table.write_csv(sink(out)?)?;
            if let Some(p) = json {
                save_json(p, &table)?;
            }
            if let Some(p) = scatter {
                write_scatter_csv(&export_scatter(&samples)?, create(p)?)?;
            }
            Ok(())
        }
        Command::Report { corpus, niqe_model } => report(with_model(cfg, niqe_model), corpus, &require_dir(out)?),
        Command::NiqeFit { images, pristine } => {
            let out = out.ok_or_else(|| Error::invalid("niqe-fit needs --out for the model file"))?;
            let imgs = match (images, pristine) {
                (Some(dir), _) => load_gray_dir(dir)?,
                (None, Some(n)) => pristine_images(cli.seed.unwrap_or(PRISTINE_SEED), *n)?,
                (None, None) => unreachable!("clap requires one of the two"),
            };
            let model = fit_pristine_model(&imgs, NiqeConfig::default())?;
            model.save(out)
        }
    }
}

fn with_model(mut cfg: PipelineConfig, path: &Option<PathBuf>) -> PipelineConfig {
    if path.is_some() {
        cfg.niqe_model_path = path.clone();
    }
    cfg
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// `--out` file, or stdout when absent.
fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn require_dir(out: Option<&Path>) -> Result<PathBuf> {
    let dir = out.ok_or_else(|| Error::invalid("this subcommand needs --out <dir>"))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|source| Error::Json {
        path: "<stdout>".into(),
        source,
    })
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", to_json(v)?);
    Ok(())
}

fn synth(
    cfg: &PipelineConfig,
    seed_flag: Option<u64>,
    plan: Option<&Path>,
    canned: Option<Canned>,
    images: u32,
    out: Option<&Path>,
) -> Result<()> {
    let dir = require_dir(out)?;
    let mut plan = match (plan, canned) {
        (Some(p), _) => PlanFile::load(p)?,
        (None, Some(Canned::SingleVariable)) => PlanFile::single_variable(cfg.seed),
        (None, Some(Canned::Confidence)) => PlanFile::confidence(cfg.seed, images),
        (None, None) => unreachable!("clap requires a plan or a canned corpus"),
    };
    if let Some(s) = seed_flag {
        plan.seed = s;
    }
    let files = generate_corpus(&plan.expand()?, &cfg.segmentation, &dir)?;
    print_json(&files)
}

fn load_gray_dir(dir: &Path) -> Result<Vec<countconf_core::image_metrics::GrayImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(|p| to_gray(&load_rgb(p)?)).collect()
}

fn samples(scores: &Path, labels: &Path) -> Result<Vec<Sample>> {
    join_samples(&load_scores(scores)?, &load_labels(labels)?)
}

#[derive(Serialize)]
struct FitSummary {
    n_train: usize,
    n_test: usize,
    train: ModelEvaluation,
    test: Option<ModelEvaluation>,
}

fn fit_split(cfg: &PipelineConfig, samples: &[Sample], model_out: &Path) -> Result<FitSummary> {
    let r = &cfg.regression;
    let (train, test) = train_test_split(samples, r.train_fraction, cfg.seed)?;
    let model = fit(&train, &r.factors, r.degree, r.ridge_lambda)?;
    model.save(model_out)?;
    Ok(FitSummary {
        n_train: train.len(),
        n_test: test.len(),
        train: model.info.train,
        test: if test.is_empty() { None } else { Some(model.evaluate(&test)?) },
    })
}

fn ablate(cfg: &PipelineConfig, samples: &[Sample]) -> Result<AblationTable> {
    let r = &cfg.regression;
    let (train, test) = train_test_split(samples, r.train_fraction, cfg.seed)?;
    ablation(&train, &test, r.degree, r.ridge_lambda)
}

struct Analysis {
    iqa: HypothesisReport,
    ica: HypothesisReport,
}

#[derive(Serialize)]
struct Verdict<'a> {
    optimal_iqa: Option<&'a str>,
    optimal_ica: Option<&'a str>,
    iqa: &'a HypothesisReport,
    ica: &'a HypothesisReport,
}

impl Analysis {
    fn verdict(&self) -> Verdict<'_> {
        Verdict {
            optimal_iqa: self.iqa.best().map(|m| m.metric.as_str()),
            optimal_ica: self.ica.best().map(|m| m.metric.as_str()),
            iqa: &self.iqa,
            ica: &self.ica,
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        self.iqa.write_csv(create(&dir.join("iqa_hypotheses.csv"))?)?;
        self.ica.write_csv(create(&dir.join("ica_hypotheses.csv"))?)?;
        save_json(dir.join("analysis.json"), &self.verdict())
    }
}

fn analyze(
    records: &[ImageRecord],
    scores: &[ImageScores],
    external_iqa: &[PathBuf],
    external_ica: &[PathBuf],
    negate: &[String],
    opts: &SensitivityOptions,
) -> Result<Analysis> {
    let mut table = builtin_score_table(records, scores)?;
    let mut iqa = vec![METRIC_NIQE.to_string()];
    let mut ica = vec![METRIC_ENTROPY.to_string(), METRIC_EDGE_DENSITY.to_string()];
    for p in external_iqa {
        iqa.extend(table.join_external(p)?);
    }
    for p in external_ica {
        ica.extend(table.join_external(p)?);
    }
    for name in negate {
        if iqa[..1].contains(name) || ica[..2].contains(name) {
            return Err(Error::invalid(format!("`{name}` is a built-in metric and already oriented")));
        }
        table.negate(name)?;
    }
    Ok(Analysis {
        iqa: HypothesisReport::build(&table, &iqa, Polarity::Quality, opts)?,
        ica: HypothesisReport::build(&table, &ica, Polarity::Complexity, opts)?,
    })
}

#[derive(Serialize)]
struct ReportSummary<'a> {
    images: usize,
    detection: &'a countconf_core::eval::DetectionEvalReport,
    optimal_iqa: Option<&'a str>,
    optimal_ica: Option<&'a str>,
    fit: FitSummary,
    ablation: &'a AblationTable,
}

fn report(cfg: PipelineConfig, corpus: &Path, dir: &Path) -> Result<()> {
    let records = load_corpus(
        &corpus.join("manifest.csv"),
        &corpus.join("detections.json"),
        Some(&corpus.join("ground_truth.json")),
    )?;
    let scores = score_corpus(&records, &cfg, &resolve_niqe_model(&cfg)?)?;
    write_scores(&scores, create(&dir.join("scores.csv"))?)?;
    let (labels, detection): (Vec<LabelRow>, _) = label_records(&records, cfg.iou_thresh)?;
    write_labels(&labels, create(&dir.join("labels.csv"))?)?;
    save_json(dir.join("label_summary.json"), &detection)?;

    let opts = SensitivityOptions {
        alpha: cfg.alpha,
        normalize: cfg.normalization.sensitivity,
    };
    let analysis = analyze(&records, &scores, &[], &[], &[], &opts)?;
    analysis.write(dir)?;

    let samples = join_samples(&scores, &labels)?;
    let fit = fit_split(&cfg, &samples, &dir.join("model.json"))?;
    let table = ablate(&cfg, &samples)?;
    table.write_csv(create(&dir.join("ablation.csv"))?)?;
    save_json(dir.join("ablation.json"), &table)?;
    write_scatter_csv(&export_scatter(&samples)?, create(&dir.join("scatter.csv"))?)?;

    let summary = ReportSummary {
        images: records.len(),
        detection: &detection,
        optimal_iqa: analysis.iqa.best().map(|m| m.metric.as_str()),
        optimal_ica: analysis.ica.best().map(|m| m.metric.as_str()),
        fit,
        ablation: &table,
    };
    save_json(dir.join("summary.json"), &summary)?;
    print_json(&summary)
}
